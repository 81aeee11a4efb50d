// Command-line front end: train, detect, bench, toy, inspect.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "swifthydra/errors.hpp"
#include "swifthydra/harness.hpp"

namespace {

using namespace sh;

harness::RunConfig load_config(const std::string& path) {
  if (path.empty()) return harness::RunConfig();
  return harness::RunConfig::from_file(path);
}

harness::EvalReport evaluate(const std::string& dataset_name,
                             const std::string& variant,
                             const Eigen::VectorXd& scores,
                             const data::Dataset& ds, double threshold) {
  harness::EvalReport r;
  r.dataset_name = dataset_name;
  r.variant = variant;
  r.sample_count = ds.size();
  std::vector<double> s(scores.data(), scores.data() + scores.size());
  r.auc = harness::auc_roc(s, ds.labels());
  r.prf = harness::prf_at_threshold(s, ds.labels(), threshold);
  return r;
}

// selfloop then MoME on a pre-split dataset; writes reports and bundles
void run_pipeline(const harness::RunConfig& cfg, const data::Dataset& train,
                  const data::Dataset& test, const std::string& name,
                  const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  cfg.write_resolved(out_dir + "/config.resolved");

  data::Standardizer std_ = data::Standardizer::fit(train);
  data::Dataset train_s = std_.apply(train);
  data::Dataset test_s = std_.apply(test);

  std::ofstream episodes(out_dir + "/episodes.jsonl");
  selfloop::TrainingArtifacts art = selfloop::run_training(
      cfg.loop_config(), train_s,
      [&](const selfloop::EpisodeReport& rep, const std::vector<diff::Vec>&) {
        episodes << harness::episode_json(rep) << '\n';
      });
  episodes.close();

  mome::MoMEModel mixture = mome::MoMEModel::train_two_phase(
      art.ctx.balanced.dataset(), cfg.mome_hyper(),
      cfg.get_u64("master_seed") + 2);

  const double threshold = cfg.get_double("threshold");
  std::ofstream rep(out_dir + "/report.jsonl");
  std::ofstream timing(out_dir + "/timing.txt");
  {
    harness::EvalReport r = evaluate(
        name, "single", art.ctx.detector.score_batch(test_s.features()),
        test_s, threshold);
    harness::TifResult t = harness::measure_tif(
        [&] { (void)art.ctx.detector.score_batch_serial(test_s.features()); },
        test_s.size());
    r.total_inference_seconds = t.median_seconds;
    rep << r.to_json(false) << '\n';
    timing << "single total_inference_seconds " << t.median_seconds
           << " variance " << t.variance << '\n';
    std::cout << r.to_json(false) << '\n';
  }
  {
    harness::EvalReport r =
        evaluate(name, "mome", mixture.predict_batch(test_s.features()),
                 test_s, threshold);
    harness::TifResult t = harness::measure_tif(
        [&] {
          for (int i = 0; i < test_s.size(); ++i)
            (void)mixture.predict(test_s.row(i));
        },
        test_s.size());
    r.total_inference_seconds = t.median_seconds;
    rep << r.to_json(false) << '\n';
    timing << "mome total_inference_seconds " << t.median_seconds
           << " variance " << t.variance << '\n';
    std::cout << r.to_json(false) << '\n';
  }

  harness::ModelBundle b1{std_, false, art.ctx.detector, {}};
  harness::save_bundle(b1, out_dir + "/model_single.ckpt");
  harness::ModelBundle b2{std_, true, {}, mixture};
  harness::save_bundle(b2, out_dir + "/model_mome.ckpt");
}

int run(int argc, char** argv) {
  CLI::App app{"RL-guided anomaly synthesis and mixture-of-experts detection"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "train on a labeled dataset");
  std::string train_data, train_config, train_out = "out";
  train_cmd->add_option("--data", train_data, "dataset file")->required();
  train_cmd->add_option("--config", train_config, "config file");
  train_cmd->add_option("--out", train_out, "output directory");

  // detect
  auto* detect_cmd = app.add_subcommand("detect", "score samples with a "
                                                  "saved model");
  std::string det_model, det_input;
  double det_threshold = 0.2;
  detect_cmd->add_option("--model", det_model, "model bundle")->required();
  detect_cmd->add_option("--input", det_input, "dataset file")->required();
  detect_cmd->add_option("--threshold", det_threshold, "decision threshold");

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "train/test benchmark at a "
                                                "fixed split ratio");
  std::string bench_data, bench_split = "40/60", bench_config,
              bench_out = "bench_out";
  bench_cmd->add_option("--data", bench_data, "dataset file")->required();
  bench_cmd->add_option("--split", bench_split,
                        "train/test ratio: 40/60, 30/70, 20/80 or 10/90");
  bench_cmd->add_option("--config", bench_config, "config file");
  bench_cmd->add_option("--out", bench_out, "output directory");

  // toy
  auto* toy_cmd = app.add_subcommand("toy", "built-in toy experiment");
  std::string toy_name = "sine", toy_out = "toy_out", toy_config;
  toy_cmd->add_option("--name", toy_name, "toy name (sine)");
  toy_cmd->add_option("--out", toy_out, "output directory");
  toy_cmd->add_option("--config", toy_config, "config file");

  // inspect
  auto* inspect_cmd = app.add_subcommand("inspect", "print model parameter "
                                                    "counts");
  std::string ins_model;
  inspect_cmd->add_option("--model", ins_model, "model bundle")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (train_cmd->parsed()) {
    harness::RunConfig cfg = load_config(train_config);
    data::Dataset ds =
        data::load_dataset(train_data, cfg.get_int("label_column"));
    auto [train, test] =
        data::split(ds, cfg.get_double("train_fraction"),
                    cfg.get_u64("master_seed") + 1);
    run_pipeline(cfg, train, test,
                 std::filesystem::path(train_data).stem().string(),
                 train_out);
  } else if (detect_cmd->parsed()) {
    harness::ModelBundle bundle = harness::load_bundle(det_model);
    data::Dataset ds = data::load_dataset(det_input);
    std::vector<double> scores;
    for (int i = 0; i < ds.size(); ++i) {
      double s = bundle.score(ds.row(i));
      scores.push_back(s);
      std::printf("{\"index\": %d, \"score\": %.17g, \"predicted\": %d}\n", i,
                  s, s > det_threshold ? 1 : -1);
    }
    if (ds.count_normal() > 0 && ds.count_anomalous() > 0) {
      harness::EvalReport r;
      r.dataset_name = std::filesystem::path(det_input).stem().string();
      r.variant = bundle.is_mome ? "mome" : "single";
      r.sample_count = ds.size();
      r.auc = harness::auc_roc(scores, ds.labels());
      r.prf = harness::prf_at_threshold(scores, ds.labels(), det_threshold);
      std::cout << r.to_json(false) << '\n';
    }
  } else if (bench_cmd->parsed()) {
    double train_fraction;
    if (bench_split == "40/60")
      train_fraction = 0.4;
    else if (bench_split == "30/70")
      train_fraction = 0.3;
    else if (bench_split == "20/80")
      train_fraction = 0.2;
    else if (bench_split == "10/90")
      train_fraction = 0.1;
    else
      throw UsageError("--split must be one of 40/60, 30/70, 20/80, 10/90");
    harness::RunConfig cfg = load_config(bench_config);
    cfg.set("train_fraction", std::to_string(train_fraction));
    data::Dataset ds =
        data::load_dataset(bench_data, cfg.get_int("label_column"));
    auto [train, test] = data::split(ds, train_fraction,
                                     cfg.get_u64("master_seed") + 1);
    run_pipeline(cfg, train, test,
                 std::filesystem::path(bench_data).stem().string(),
                 bench_out);
  } else if (toy_cmd->parsed()) {
    if (toy_name != "sine") throw UsageError("unknown toy: " + toy_name);
    harness::RunConfig cfg = load_config(toy_config);
    harness::PresetResult res = harness::run_sine_toy(cfg, toy_out);
    for (const auto& r : res.reports) std::cout << r.to_json(false) << '\n';
  } else if (inspect_cmd->parsed()) {
    harness::ModelBundle bundle = harness::load_bundle(ins_model);
    if (bundle.is_mome) {
      long total = 0;
      for (int m = 0; m < bundle.mixture.n_experts(); ++m) {
        long c = bundle.mixture.experts()[m].parameter_count();
        total += c;
        std::printf("expert %d: %ld parameters\n", m, c);
      }
      long gate = bundle.mixture.gate_weights().size() +
                  bundle.mixture.noise_weights().size();
      std::printf("gate: %ld parameters\n", gate);
      std::printf("total: %ld parameters (top-k = %d active per sample)\n",
                  total + gate, bundle.mixture.top_k());
    } else {
      std::printf("single detector: %ld parameters\n",
                  bundle.single.parameter_count());
    }
  }
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const sh::UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const sh::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const sh::TrainError& e) {
    std::fprintf(stderr, "training error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
