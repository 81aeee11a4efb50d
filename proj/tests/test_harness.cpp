#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "swifthydra/dataset.hpp"
#include "swifthydra/errors.hpp"
#include "swifthydra/harness.hpp"
#include "swifthydra/rng.hpp"

using namespace sh;

namespace {

std::string temp_dir(const std::string& tag) {
  std::string d =
      (std::filesystem::temp_directory_path() / ("swhy_test_" + tag))
          .string();
  std::filesystem::create_directories(d);
  return d;
}

// O(n^2) definition of the ranking probability, written independently of the
// rank-statistic implementation under test
double auc_pairwise(const std::vector<double>& scores,
                    const std::vector<int>& labels) {
  double wins = 0.0;
  long pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != -1) continue;
      ++pairs;
      if (scores[i] > scores[j])
        wins += 1.0;
      else if (scores[i] == scores[j])
        wins += 0.5;
    }
  }
  return wins / pairs;
}

} // namespace

TEST_CASE("auc is 1 for a perfect ranking and 0 for an inverted one") {
  CHECK(harness::auc_roc({0.9, 0.1}, {1, -1}) == 1.0);
  CHECK(harness::auc_roc({0.1, 0.9}, {1, -1}) == 0.0);
}

TEST_CASE("auc matches the pairwise brute-force oracle with ties") {
  Rng rng(3);
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 200; ++i) {
    // quantized scores force ties across and within classes
    scores.push_back(std::round(rng.normal() * 4.0) / 4.0);
    labels.push_back(rng.uniform_int(3) == 0 ? 1 : -1);
  }
  CHECK(std::abs(harness::auc_roc(scores, labels) -
                 auc_pairwise(scores, labels)) <= 1e-12);
}

TEST_CASE("auc is invariant under strictly monotone score transforms") {
  Rng rng(7);
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 150; ++i) {
    scores.push_back(rng.normal());
    labels.push_back(i % 3 == 0 ? 1 : -1);
  }
  double base = harness::auc_roc(scores, labels);
  std::vector<double> warped = scores;
  for (double& s : warped) s = std::exp(0.3 * s) + std::tanh(s);
  CHECK(harness::auc_roc(warped, labels) == base);
}

TEST_CASE("auc rejects single-class input") {
  CHECK_THROWS_AS(harness::auc_roc({0.5, 0.7}, {1, 1}), DataError);
  CHECK_THROWS_AS(harness::auc_roc({0.5, 0.7}, {-1, -1}), DataError);
}

TEST_CASE("precision, recall, and f1 are all 1 when every positive clears "
          "the threshold") {
  harness::Prf p = harness::prf_at_threshold({0.9, 0.8, 0.7}, {1, 1, 1}, 0.2);
  CHECK(p.precision == 1.0);
  CHECK(p.recall == 1.0);
  CHECK(p.f1 == 1.0);
  CHECK_FALSE(p.degenerate);
}

TEST_CASE("no predicted positives flags the zero division") {
  harness::Prf p =
      harness::prf_at_threshold({0.1, 0.05}, {1, -1}, 0.2);
  CHECK(p.precision == 0.0);
  CHECK(p.recall == 0.0);
  CHECK(p.f1 == 0.0);
  CHECK(p.degenerate);
}

TEST_CASE("prf hand example at the default 0.2 threshold") {
  harness::RunConfig cfg;
  CHECK(cfg.get_double("threshold") == 0.2);
  // scores: two true positives, one false positive, one false negative
  harness::Prf p = harness::prf_at_threshold({0.9, 0.3, 0.25, 0.1},
                                             {1, 1, -1, 1}, 0.2);
  CHECK(p.precision == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(p.recall == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(p.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("timing an empty dataset reports zero samples and zero time") {
  harness::TifResult t = harness::measure_tif([] {}, 0);
  CHECK(t.sample_count == 0);
  CHECK(t.median_seconds == 0.0);
  CHECK(t.variance == 0.0);
}

TEST_CASE("timing reports a median over repetitions and their variance") {
  harness::TifResult t = harness::measure_tif(
      [] {
        volatile double sink = 0.0;
        for (int i = 0; i < 20000; ++i) sink += std::sqrt(double(i));
      },
      100);
  CHECK(t.sample_count == 100);
  CHECK(t.median_seconds > 0.0);
  CHECK(t.variance >= 0.0);
}

TEST_CASE("point export writes one row per sample and round-trips values "
          "exactly") {
  data::Dataset ds = data::synth_sine_toy(30, 10, 0.05, 5);
  std::string path = temp_dir("export") + "/points.csv";
  harness::export_points(ds, path, 7);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "x,y,label,provenance,episode");
  int rows = 0;
  std::vector<double> xs, ys;
  std::vector<int> labels;
  while (std::getline(in, line)) {
    double x, y;
    int label, episode;
    char prov[32];
    REQUIRE(std::sscanf(line.c_str(), "%lf,%lf,%d,%31[^,],%d", &x, &y,
                        &label, prov, &episode) == 5);
    CHECK(x == ds.features()(rows, 0));
    CHECK(y == ds.features()(rows, 1));
    CHECK(label == ds.label(rows));
    CHECK(std::string(prov) == "original");
    CHECK(episode == 7);
    ++rows;
  }
  CHECK(rows == 40);

  Eigen::MatrixXd wide(2, 3);
  wide << 1, 2, 3, 4, 5, 6;
  data::Dataset d3(wide, {1, -1},
                   std::vector<data::Provenance>(2,
                                                 data::Provenance::original));
  CHECK_THROWS_AS(harness::export_points(d3, path), DataError);
  harness::export_points(d3, path, -1, 0, 2); // explicit index pair works
}

TEST_CASE("configs reject unknown keys and round-trip through files") {
  harness::RunConfig cfg;
  CHECK_THROWS_AS(cfg.set("not_a_real_key", "1"), UsageError);
  CHECK_THROWS_AS(cfg.get_string("not_a_real_key"), UsageError);
  cfg.set("episodes", "4");
  cfg.set("n_experts", "6");
  cfg.set("bandwidth", "silverman");
  std::string path = temp_dir("cfg") + "/run.cfg";
  cfg.write_resolved(path);
  harness::RunConfig loaded = harness::RunConfig::from_file(path);
  CHECK(loaded.entries() == cfg.entries());
  CHECK(loaded.get_int("episodes") == 4);
  CHECK(loaded.get_double("bandwidth") == -1.0);

  // comments and blank lines are tolerated; malformed lines are not
  std::string hand = temp_dir("cfg") + "/hand.cfg";
  {
    std::ofstream out(hand);
    out << "# a comment\n\n  top_k = 3  # trailing comment\n";
  }
  CHECK(harness::RunConfig::from_file(hand).get_int("top_k") == 3);
  {
    std::ofstream out(hand);
    out << "top_k 3\n";
  }
  CHECK_THROWS_AS(harness::RunConfig::from_file(hand), UsageError);
}

TEST_CASE("config keys map onto the module hyperparameter structs") {
  harness::RunConfig cfg;
  cfg.set("episodes", "9");
  cfg.set("steps_per_episode", "17");
  cfg.set("latent_dim", "3");
  cfg.set("lr_policy", "0.005");
  cfg.set("n_experts", "11");
  cfg.set("top_k", "4");
  cfg.set("expert_epochs", "21");
  selfloop::LoopConfig loop = cfg.loop_config();
  CHECK(loop.episodes == 9);
  CHECK(loop.steps_per_episode == 17);
  CHECK(loop.latent_dim == 3);
  CHECK(loop.lr_policy == 0.005);
  mome::MomeHyper hyper = cfg.mome_hyper();
  CHECK(hyper.n_experts == 11);
  CHECK(hyper.top_k == 4);
  CHECK(hyper.expert_epochs == 21);
}

TEST_CASE("eval reports serialize without timing by default") {
  harness::EvalReport r;
  r.dataset_name = "demo";
  r.variant = "single";
  r.auc = 0.75;
  r.prf.precision = 0.5;
  r.prf.recall = 0.25;
  r.prf.f1 = 1.0 / 3.0;
  r.sample_count = 12;
  r.total_inference_seconds = 1.234;
  std::string without = r.to_json(false);
  CHECK(without.find("total_inference_seconds") == std::string::npos);
  CHECK(r.to_json(true).find("total_inference_seconds") !=
        std::string::npos);
  r.total_inference_seconds = 9.876;
  CHECK(r.to_json(false) == without); // timing never leaks into the output
}

TEST_CASE("model bundles round-trip through the checkpoint file") {
  data::Dataset ds = data::synth_sine_toy(40, 12, 0.05, 9);
  data::Standardizer std_ = data::Standardizer::fit(ds);
  data::Dataset ds_s = std_.apply(ds);

  detector::SsmDetectorSpec spec;
  spec.embed_dim = 4;
  spec.state_dim = 4;
  detector::DetectorModel det(2, spec, 3);
  det.train(data::trim_balance(ds_s, 1), 5, 1e-3, 32, 2);
  harness::ModelBundle b{std_, false, det, {}};
  std::string path = temp_dir("bundle") + "/single.ckpt";
  harness::save_bundle(b, path);
  harness::ModelBundle back = harness::load_bundle(path);
  CHECK_FALSE(back.is_mome);
  for (int i = 0; i < 10; ++i)
    CHECK(back.score(ds.row(i)) == b.score(ds.row(i)));

  mome::MomeHyper hyper;
  hyper.n_experts = 3;
  hyper.top_k = 2;
  hyper.expert_epochs = 3;
  hyper.gate_epochs = 2;
  hyper.expert_embed_dim = 4;
  hyper.expert_state_dim = 4;
  mome::MoMEModel mixture =
      mome::MoMEModel::train_two_phase(ds_s, hyper, 17);
  harness::ModelBundle mb{std_, true, {}, mixture};
  std::string mpath = temp_dir("bundle") + "/mome.ckpt";
  harness::save_bundle(mb, mpath);
  harness::ModelBundle mback = harness::load_bundle(mpath);
  CHECK(mback.is_mome);
  for (int i = 0; i < 10; ++i)
    CHECK(mback.score(ds.row(i)) == mb.score(ds.row(i)));
}

TEST_CASE("kendall tau hits the hand values") {
  CHECK(harness::kendall_tau({1, 2, 3, 4}, {10, 20, 30, 40}) == 1.0);
  CHECK(harness::kendall_tau({1, 2, 3, 4}, {4, 3, 2, 1}) == -1.0);
  // 3 concordant, 3 discordant pairs
  CHECK(harness::kendall_tau({1, 2, 3, 4}, {2, 1, 4, 3}) ==
        doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(harness::kendall_tau({1.0}, {1.0}), DataError);
}

TEST_CASE("chi-square survival function matches closed forms") {
  // dof 2: sf(x) = exp(-x/2)
  for (double x : {0.5, 1.0, 2.0, 4.60517}) {
    CHECK(harness::chi2_sf(x, 2) ==
          doctest::Approx(std::exp(-x / 2.0)).epsilon(1e-10));
  }
  // dof 1: sf(x) = erfc(sqrt(x/2))
  CHECK(harness::chi2_sf(3.841459, 1) == doctest::Approx(0.05).epsilon(1e-5));
  CHECK(harness::chi2_sf(0.0, 4) == 1.0);
  CHECK_THROWS_AS(harness::chi2_sf(1.0, 0), DataError);
}

TEST_CASE("widely spaced gaussian clusters are easy for both model "
          "variants") {
  harness::RunConfig cfg;
  cfg.set("clusters_samples_per", "60");
  cfg.set("epochs_detector", "250");
  cfg.set("detector_embed_dim", "8");
  cfg.set("detector_state_dim", "8");
  cfg.set("n_experts", "10");
  cfg.set("expert_epochs", "300");
  cfg.set("expert_embed_dim", "8");
  cfg.set("expert_state_dim", "8");
  cfg.set("gate_epochs", "200");
  cfg.set("train_fraction", "0.5");
  cfg.set("master_seed", "5");
  std::string out = temp_dir("thm");
  harness::TheoremClustersResult r =
      harness::run_theorem_clusters(cfg, out, 10.0, 1);
  REQUIRE(r.single_test_error.size() == 1);
  CHECK(r.single_test_error[0] <= 0.01);
  CHECK(r.mome_test_error[0] <= 0.01);
  CHECK(std::filesystem::exists(out + "/config.resolved"));
  CHECK(std::filesystem::exists(out + "/theorem_clusters.jsonl"));
}

TEST_CASE("the sine-toy preset is reproducible and writes its artifacts") {
  harness::RunConfig cfg;
  cfg.set("episodes", "2");
  cfg.set("steps_per_episode", "4");
  cfg.set("top_l", "2");
  cfg.set("toy_n_normal", "40");
  cfg.set("toy_n_anomalous", "12");
  cfg.set("train_fraction", "0.6");
  cfg.set("latent_dim", "2");
  cfg.set("epochs_generator", "10");
  cfg.set("epochs_generator_warm", "2");
  cfg.set("generator_hidden", "8");
  cfg.set("detector_embed_dim", "4");
  cfg.set("detector_state_dim", "4");
  cfg.set("epochs_detector", "10");
  cfg.set("epochs_detector_warm", "2");
  cfg.set("agent_hidden", "8");
  cfg.set("kde_samples", "20");
  cfg.set("eta_feasible", "3");
  cfg.set("n_experts", "3");
  cfg.set("top_k", "2");
  cfg.set("expert_epochs", "5");
  cfg.set("gate_epochs", "2");
  cfg.set("expert_embed_dim", "4");
  cfg.set("expert_state_dim", "4");
  cfg.set("master_seed", "13");

  std::string out_a = temp_dir("toy_a");
  std::string out_b = temp_dir("toy_b");
  harness::PresetResult a = harness::run_sine_toy(cfg, out_a);
  harness::PresetResult b = harness::run_sine_toy(cfg, out_b);

  REQUIRE(a.reports.size() == 2);
  CHECK(a.reports[0].variant == "single");
  CHECK(a.reports[1].variant == "mome");
  REQUIRE(a.episodes.size() == 2);

  // identical deterministic reports (timing is excluded from to_json)
  REQUIRE(b.reports.size() == a.reports.size());
  for (std::size_t i = 0; i < a.reports.size(); ++i)
    CHECK(a.reports[i].to_json(false) == b.reports[i].to_json(false));
  for (std::size_t e = 0; e < a.episodes.size(); ++e)
    CHECK(harness::episode_json(a.episodes[e]) ==
          harness::episode_json(b.episodes[e]));

  for (const char* f :
       {"/config.resolved", "/points_initial.csv", "/points_final.csv",
        "/episodes.jsonl", "/report.jsonl", "/model_single.ckpt",
        "/model_mome.ckpt"}) {
    CHECK(std::filesystem::exists(out_a + f));
  }

  // byte-for-byte determinism of every deterministic artifact
  for (const char* f : {"/points_initial.csv", "/points_final.csv",
                        "/episodes.jsonl", "/report.jsonl"}) {
    std::ifstream fa(out_a + f), fb(out_b + f);
    std::string ca((std::istreambuf_iterator<char>(fa)),
                   std::istreambuf_iterator<char>());
    std::string cb((std::istreambuf_iterator<char>(fb)),
                   std::istreambuf_iterator<char>());
    CHECK(ca == cb);
  }
}
