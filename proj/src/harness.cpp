#include "swifthydra/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "swifthydra/errors.hpp"

namespace sh::harness {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// metrics

double auc_roc(const std::vector<double>& scores,
               const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw DataError("auc_roc: scores and labels differ in length");
  const int n = static_cast<int>(scores.size());
  long n_pos = 0, n_neg = 0;
  for (int l : labels) {
    if (l == 1)
      ++n_pos;
    else if (l == -1)
      ++n_neg;
    else
      throw DataError("auc_roc: labels must be -1 or +1");
  }
  if (n_pos == 0 || n_neg == 0)
    throw DataError("auc_roc: both classes must be present");

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return scores[a] < scores[b]; });

  // average ranks for ties, 1-based
  std::vector<double> rank(n);
  int i = 0;
  while (i < n) {
    int j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    double avg = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (int k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  for (int k = 0; k < n; ++k)
    if (labels[k] == 1) rank_sum_pos += rank[k];
  double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) *
                                static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

Prf prf_at_threshold(const std::vector<double>& scores,
                     const std::vector<int>& labels, double threshold) {
  if (scores.size() != labels.size())
    throw DataError("prf_at_threshold: scores and labels differ in length");
  long tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    bool pred = scores[i] > threshold;
    bool truth = labels[i] == 1;
    if (pred && truth)
      ++tp;
    else if (pred && !truth)
      ++fp;
    else if (!pred && truth)
      ++fn;
  }
  Prf out;
  if (tp + fp == 0) {
    out.precision = 0.0;
    out.degenerate = true;
  } else {
    out.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  }
  if (tp + fn == 0) {
    out.recall = 0.0;
    out.degenerate = true;
  } else {
    out.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  }
  if (out.precision + out.recall == 0.0) {
    out.f1 = 0.0;
    out.degenerate = true;
  } else {
    out.f1 = 2.0 * out.precision * out.recall / (out.precision + out.recall);
  }
  return out;
}

TifResult measure_tif(const std::function<void()>& score_all, int samples) {
  TifResult out;
  out.sample_count = samples;
  if (samples == 0) return out;
  std::vector<double> times;
  for (int rep = 0; rep < 3; ++rep) {
    auto t0 = std::chrono::steady_clock::now();
    score_all();
    auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  out.median_seconds = times[1];
  double mean = (times[0] + times[1] + times[2]) / 3.0;
  double ss = 0.0;
  for (double t : times) ss += (t - mean) * (t - mean);
  out.variance = ss / 2.0; // sample variance over 3 repetitions
  return out;
}

std::string EvalReport::to_json(bool include_timing) const {
  json j;
  j["dataset"] = dataset_name;
  j["variant"] = variant;
  j["auc_roc"] = auc;
  j["precision"] = prf.precision;
  j["recall"] = prf.recall;
  j["f1"] = prf.f1;
  j["threshold_degenerate"] = prf.degenerate;
  j["sample_count"] = sample_count;
  if (include_timing) j["total_inference_seconds"] = total_inference_seconds;
  return j.dump();
}

std::string episode_json(const selfloop::EpisodeReport& r) {
  json j;
  j["episode"] = r.episode;
  j["average_reward"] = r.average_reward;
  j["infeasible_actions"] = r.infeasible_actions;
  j["steps"] = r.steps;
  j["train_size"] = r.train_size;
  j["balanced_size"] = r.balanced_size;
  j["anomalous_size"] = r.anomalous_size;
  j["detector_final_loss"] = r.detector_final_loss;
  j["generator_final_loss"] = r.generator_final_loss;
  return j.dump();
}

// ---------------------------------------------------------------------------
// point export

void export_points(const data::Dataset& ds, const std::string& path,
                   int episode, int ix, int iy) {
  if (ix < 0 && iy < 0) {
    if (ds.feature_dim() != 2)
      throw DataError(
          "export_points: features are not 2-D; pass a feature index pair");
    ix = 0;
    iy = 1;
  }
  if (ix < 0 || iy < 0 || ix >= ds.feature_dim() || iy >= ds.feature_dim() ||
      ix == iy)
    throw DataError("export_points: invalid feature index pair");
  std::ofstream out(path);
  if (!out) throw DataError("export_points: cannot open " + path);
  out << "x,y,label,provenance,episode\n";
  char buf[64];
  for (int i = 0; i < ds.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", ds.features()(i, ix));
    out << buf << ',';
    std::snprintf(buf, sizeof(buf), "%.17g", ds.features()(i, iy));
    out << buf << ',' << ds.label(i) << ','
        << (ds.provenance(i) == data::Provenance::generated ? "generated"
                                                            : "original")
        << ',' << episode << '\n';
  }
}

// ---------------------------------------------------------------------------
// configuration

namespace {

const std::map<std::string, std::string>& default_config() {
  static const std::map<std::string, std::string> defaults = {
      {"episodes", "200"},
      {"steps_per_episode", "500"},
      {"top_l", "0"},
      {"gamma", "0.95"},
      {"omega", "0.001"},
      {"patience", "20"},
      {"latent_dim", "0"},
      {"kl_weight", "0.55"},
      {"lr_cvae", "0.003"},
      {"epochs_generator", "500"},
      {"epochs_generator_warm", "0"},
      {"generator_hidden", "32"},
      {"detector_embed_dim", "16"},
      {"detector_state_dim", "16"},
      {"detector_depth", "2"},
      {"lr_detector", "0.001"},
      {"epochs_detector", "600"},
      {"epochs_detector_warm", "0"},
      {"lr_policy", "0.0001"},
      {"minibatch", "256"},
      {"batch_size", "64"},
      {"bandwidth", "0.5"},
      {"kde_samples", "300"},
      {"eta_feasible", "10"},
      {"alpha_feasible", "0.01"},
      {"rho_margin", "0.1"},
      {"sigma_min", "0.001"},
      {"agent_hidden", "32"},
      {"master_seed", "0"},
      {"n_experts", "20"},
      {"top_k", "2"},
      {"alpha_assign", "1.0"},
      {"c0_assign", "1.0"},
      {"k_range_max", "10"},
      {"parallel_experts", "0"},
      {"expert_embed_dim", "6"},
      {"expert_state_dim", "6"},
      {"expert_depth", "2"},
      {"expert_epochs", "100"},
      {"expert_lr", "0.001"},
      {"gate_epochs", "50"},
      {"gate_lr", "0.01"},
      {"threshold", "0.2"},
      {"toy_n_normal", "400"},
      {"toy_n_anomalous", "80"},
      {"toy_noise", "0.05"},
      {"train_fraction", "0.4"},
      {"clusters_samples_per", "100"},
      {"clusters_sigma", "1.0"},
      {"label_column", "-1"},
      {"out_dir", ""},
  };
  return defaults;
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

} // namespace

RunConfig::RunConfig() : kv_(default_config()) {}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file: " + path);
  RunConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError("config line " + std::to_string(line_no) +
                       ": expected key = value");
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (default_config().find(key) == default_config().end())
    throw UsageError("unknown config key: " + key);
  kv_[key] = value;
}

std::string RunConfig::get_string(const std::string& key) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) throw UsageError("unknown config key: " + key);
  return it->second;
}

double RunConfig::get_double(const std::string& key) const {
  std::string v = get_string(key);
  if (key == "bandwidth" && v == "silverman") return -1.0;
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw UsageError("config key " + key + ": not a number: " + v);
  }
  if (used != v.size())
    throw UsageError("config key " + key + ": not a number: " + v);
  return out;
}

int RunConfig::get_int(const std::string& key) const {
  double d = get_double(key);
  int i = static_cast<int>(std::llround(d));
  if (static_cast<double>(i) != d)
    throw UsageError("config key " + key + ": not an integer");
  return i;
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  std::string v = get_string(key);
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw UsageError("config key " + key + ": not an unsigned integer: " + v);
  }
}

selfloop::LoopConfig RunConfig::loop_config() const {
  selfloop::LoopConfig c;
  c.episodes = get_int("episodes");
  c.steps_per_episode = get_int("steps_per_episode");
  c.top_l = get_int("top_l");
  c.gamma = get_double("gamma");
  c.omega = get_double("omega");
  c.patience = get_int("patience");
  c.latent_dim = get_int("latent_dim");
  c.kl_weight = get_double("kl_weight");
  c.lr_cvae = get_double("lr_cvae");
  c.epochs_generator = get_int("epochs_generator");
  c.epochs_generator_warm = get_int("epochs_generator_warm");
  c.generator_hidden = get_int("generator_hidden");
  c.detector_embed_dim = get_int("detector_embed_dim");
  c.detector_state_dim = get_int("detector_state_dim");
  c.detector_depth = get_int("detector_depth");
  c.lr_detector = get_double("lr_detector");
  c.epochs_detector = get_int("epochs_detector");
  c.epochs_detector_warm = get_int("epochs_detector_warm");
  c.lr_policy = get_double("lr_policy");
  c.minibatch = get_int("minibatch");
  c.batch_size = get_int("batch_size");
  c.bandwidth = get_double("bandwidth");
  c.kde_samples = get_int("kde_samples");
  c.eta_feasible = get_int("eta_feasible");
  c.alpha_feasible = get_double("alpha_feasible");
  c.rho_margin = get_double("rho_margin");
  c.sigma_min = get_double("sigma_min");
  c.agent_hidden = get_int("agent_hidden");
  c.master_seed = get_u64("master_seed");
  return c;
}

mome::MomeHyper RunConfig::mome_hyper() const {
  mome::MomeHyper h;
  h.n_experts = get_int("n_experts");
  h.top_k = get_int("top_k");
  h.alpha_assign = get_double("alpha_assign");
  h.c0_assign = get_double("c0_assign");
  h.k_range_max = get_int("k_range_max");
  h.parallel_experts = get_int("parallel_experts") != 0;
  h.expert_embed_dim = get_int("expert_embed_dim");
  h.expert_state_dim = get_int("expert_state_dim");
  h.expert_depth = get_int("expert_depth");
  h.expert_epochs = get_int("expert_epochs");
  h.expert_lr = get_double("expert_lr");
  h.gate_epochs = get_int("gate_epochs");
  h.gate_lr = get_double("gate_lr");
  h.batch_size = get_int("batch_size");
  return h;
}

void RunConfig::write_resolved(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write resolved config: " + path);
  for (const auto& [k, v] : kv_) out << k << " = " << v << '\n';
}

// ---------------------------------------------------------------------------
// model bundles

namespace {

constexpr const char* kMetaName = "bundle.meta";

void pack_store(diff::ParameterStore& dst, const diff::ParameterStore& src,
                const std::string& prefix) {
  for (const auto& [name, t] : src.tensors) dst.tensors[prefix + name] = t;
}

diff::ParameterStore unpack_store(const diff::ParameterStore& src,
                                  const std::string& prefix) {
  diff::ParameterStore out;
  for (const auto& [name, t] : src.tensors)
    if (name.rfind(prefix, 0) == 0)
      out.tensors[name.substr(prefix.size())] = t;
  return out;
}

} // namespace

double ModelBundle::score(const Eigen::VectorXd& raw) const {
  Eigen::VectorXd x = standardizer.apply(raw);
  return is_mome ? mixture.predict(x) : single.score(x);
}

void save_bundle(const ModelBundle& bundle, const std::string& path) {
  diff::ParameterStore store;
  store.tensors["std.mean"] = bundle.standardizer.mean;
  store.tensors["std.std"] = bundle.standardizer.std;
  Eigen::VectorXd meta(10);
  if (bundle.is_mome) {
    const auto& spec = bundle.mixture.experts().front().spec();
    meta << 1, bundle.mixture.experts().front().feature_dim(), spec.embed_dim,
        spec.state_dim, spec.depth, bundle.mixture.n_experts(),
        bundle.mixture.top_k(), 0, 0, 0;
    store.tensors["gate.w"] = bundle.mixture.gate_weights();
    store.tensors["gate.n"] = bundle.mixture.noise_weights();
    for (int m = 0; m < bundle.mixture.n_experts(); ++m)
      pack_store(store, bundle.mixture.experts()[m].params(),
                 "e" + std::to_string(m) + ".");
  } else {
    const auto& spec = bundle.single.spec();
    meta << 0, bundle.single.feature_dim(), spec.embed_dim, spec.state_dim,
        spec.depth, 0, 0, 0, 0, 0;
    pack_store(store, bundle.single.params(), "det.");
  }
  store.tensors[kMetaName] = meta;
  diff::save_checkpoint(store, path);
}

ModelBundle load_bundle(const std::string& path) {
  diff::ParameterStore store = diff::load_checkpoint(path);
  if (store.tensors.find(kMetaName) == store.tensors.end())
    throw DataError("not a model bundle: " + path);
  Eigen::VectorXd meta = store.tensors.at(kMetaName);
  ModelBundle out;
  out.standardizer.mean = store.tensors.at("std.mean");
  out.standardizer.std = store.tensors.at("std.std");
  const int p = static_cast<int>(meta(1));
  detector::SsmDetectorSpec spec;
  spec.embed_dim = static_cast<int>(meta(2));
  spec.state_dim = static_cast<int>(meta(3));
  spec.depth = static_cast<int>(meta(4));
  if (meta(0) == 0.0) {
    out.is_mome = false;
    out.single = detector::DetectorModel(p, spec, 0);
    out.single.params() = unpack_store(store, "det.");
  } else {
    out.is_mome = true;
    const int m = static_cast<int>(meta(5));
    std::vector<detector::DetectorModel> experts;
    for (int i = 0; i < m; ++i) {
      detector::DetectorModel e(p, spec, 0);
      e.params() = unpack_store(store, "e" + std::to_string(i) + ".");
      experts.push_back(std::move(e));
    }
    out.mixture = mome::MoMEModel::from_parts(
        std::move(experts), store.tensors.at("gate.w"),
        store.tensors.at("gate.n"), static_cast<int>(meta(6)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// statistics helpers

double kendall_tau(const std::vector<double>& xs,
                   const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2)
    throw DataError("kendall_tau: need two equal-length series");
  const int n = static_cast<int>(xs.size());
  long num = 0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double a = (xs[j] - xs[i]) * (ys[j] - ys[i]);
      if (a > 0)
        ++num;
      else if (a < 0)
        --num;
    }
  return static_cast<double>(num) /
         (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

namespace {

// regularized lower incomplete gamma P(a, x); series for x < a + 1,
// continued fraction otherwise
double gamma_p(double a, double x) {
  if (x < 0 || a <= 0) throw DataError("gamma_p: invalid arguments");
  if (x == 0) return 0.0;
  const double gln = std::lgamma(a);
  if (x < a + 1.0) {
    double ap = a, sum = 1.0 / a, del = sum;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - gln);
  }
  // Lentz continued fraction for Q(a, x)
  const double tiny = 1e-300;
  double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
  for (int i = 1; i <= 500; ++i) {
    double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  double q = std::exp(-x + a * std::log(x) - gln) * h;
  return 1.0 - q;
}

} // namespace

double chi2_sf(double stat, int dof) {
  if (dof <= 0) throw DataError("chi2_sf: dof must be positive");
  if (stat <= 0) return 1.0;
  return 1.0 - gamma_p(0.5 * dof, 0.5 * stat);
}

// ---------------------------------------------------------------------------
// presets

namespace {

std::vector<double> to_std(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

double classification_error(const Eigen::VectorXd& scores,
                            const data::Dataset& ds) {
  int wrong = 0;
  for (int i = 0; i < ds.size(); ++i) {
    int pred = scores(i) > 0.5 ? 1 : -1;
    if (pred != ds.label(i)) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(ds.size());
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace

PresetResult run_sine_toy(const RunConfig& cfg, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const std::uint64_t seed = cfg.get_u64("master_seed");

  data::Dataset full = data::synth_sine_toy(
      cfg.get_int("toy_n_normal"), cfg.get_int("toy_n_anomalous"),
      cfg.get_double("toy_noise"), seed);
  auto [train, test] = data::split(full, cfg.get_double("train_fraction"),
                                   seed + 1);
  data::Standardizer std_ = data::Standardizer::fit(train);
  data::Dataset train_s = std_.apply(train);
  data::Dataset test_s = std_.apply(test);

  cfg.write_resolved(out_dir + "/config.resolved");
  export_points(train_s, out_dir + "/points_initial.csv", 0);

  std::ofstream episodes_out(out_dir + "/episodes.jsonl");
  PresetResult result;
  selfloop::LoopConfig loop = cfg.loop_config();
  selfloop::TrainingArtifacts art = selfloop::run_training(
      loop, train_s,
      [&](const selfloop::EpisodeReport& rep,
          const std::vector<diff::Vec>& added) {
        result.episodes.push_back(rep);
        episodes_out << episode_json(rep) << '\n';
        if (!added.empty()) {
          Eigen::MatrixXd m(static_cast<int>(added.size()),
                            train_s.feature_dim());
          for (std::size_t i = 0; i < added.size(); ++i)
            m.row(static_cast<int>(i)) = added[i].transpose();
          data::Dataset gen(
              m, std::vector<int>(added.size(), 1),
              std::vector<data::Provenance>(added.size(),
                                            data::Provenance::generated));
          char name[64];
          std::snprintf(name, sizeof(name), "/points_ep%03d.csv",
                        rep.episode);
          export_points(gen, out_dir + name, rep.episode);
        }
      });
  episodes_out.close();
  export_points(art.ctx.train, out_dir + "/points_final.csv",
                art.episodes_run);

  const double threshold = cfg.get_double("threshold");
  std::vector<int> test_labels = test_s.labels();

  EvalReport single;
  single.dataset_name = "sine_toy";
  single.variant = "single";
  single.sample_count = test_s.size();
  Eigen::VectorXd s1 = art.ctx.detector.score_batch(test_s.features());
  single.auc = auc_roc(to_std(s1), test_labels);
  single.prf = prf_at_threshold(to_std(s1), test_labels, threshold);
  TifResult t1 = measure_tif(
      [&] { (void)art.ctx.detector.score_batch_serial(test_s.features()); },
      test_s.size());
  single.total_inference_seconds = t1.median_seconds;
  result.reports.push_back(single);

  mome::MoMEModel mixture = mome::MoMEModel::train_two_phase(
      art.ctx.balanced.dataset(), cfg.mome_hyper(), seed + 2);
  EvalReport moe;
  moe.dataset_name = "sine_toy";
  moe.variant = "mome";
  moe.sample_count = test_s.size();
  Eigen::VectorXd s2 = mixture.predict_batch(test_s.features());
  moe.auc = auc_roc(to_std(s2), test_labels);
  moe.prf = prf_at_threshold(to_std(s2), test_labels, threshold);
  TifResult t2 = measure_tif(
      [&] {
        for (int i = 0; i < test_s.size(); ++i) (void)mixture.predict(test_s.row(i));
      },
      test_s.size());
  moe.total_inference_seconds = t2.median_seconds;
  result.reports.push_back(moe);

  {
    std::ofstream rep(out_dir + "/report.jsonl");
    for (const auto& r : result.reports) rep << r.to_json(false) << '\n';
    std::ofstream timing(out_dir + "/timing.txt");
    for (const auto& r : result.reports)
      timing << r.variant << " total_inference_seconds "
             << r.total_inference_seconds << '\n';
  }

  ModelBundle b1{std_, false, art.ctx.detector, {}};
  save_bundle(b1, out_dir + "/model_single.ckpt");
  ModelBundle b2{std_, true, {}, mixture};
  save_bundle(b2, out_dir + "/model_mome.ckpt");
  return result;
}

TheoremClustersResult run_theorem_clusters(const RunConfig& cfg,
                                           const std::string& out_dir,
                                           double center_spacing_sigma,
                                           int n_seeds) {
  std::filesystem::create_directories(out_dir);
  cfg.write_resolved(out_dir + "/config.resolved");
  std::ofstream log(out_dir + "/theorem_clusters.jsonl");

  TheoremClustersResult out;
  const std::uint64_t master = cfg.get_u64("master_seed");
  const double sigma = cfg.get_double("clusters_sigma");

  for (int s = 0; s < n_seeds; ++s) {
    const std::uint64_t seed = master + 1000 * static_cast<std::uint64_t>(s);
    data::GaussianClusterSpec spec;
    spec.normal_clusters = 3;
    spec.anomalous_clusters = 3;
    spec.dim = 2;
    spec.sigma = sigma;
    spec.samples_per_cluster = cfg.get_int("clusters_samples_per");
    // alternate normal and anomalous centers around a hexagon whose side
    // length equals spacing * sigma, so class overlap is set by the spacing
    const double r = center_spacing_sigma * sigma;
    for (int c = 0; c < 3; ++c) {
      double ang = (2 * c) * M_PI / 3.0;
      spec.centers.push_back(Eigen::Vector2d(r * std::cos(ang),
                                             r * std::sin(ang)));
    }
    for (int c = 0; c < 3; ++c) {
      double ang = (2 * c + 1) * M_PI / 3.0;
      spec.centers.push_back(Eigen::Vector2d(r * std::cos(ang),
                                             r * std::sin(ang)));
    }
    data::Dataset full = data::synth_gaussian_clusters(spec, seed);
    auto [train, test] = data::split(full, cfg.get_double("train_fraction"),
                                     seed + 1);
    data::Standardizer std_ = data::Standardizer::fit(train);
    data::Dataset train_s = std_.apply(train);
    data::Dataset test_s = std_.apply(test);
    data::BalancedDataset bal = data::trim_balance(train_s, seed + 2);

    detector::SsmDetectorSpec dspec;
    dspec.embed_dim = cfg.get_int("detector_embed_dim");
    dspec.state_dim = cfg.get_int("detector_state_dim");
    dspec.depth = cfg.get_int("detector_depth");
    detector::DetectorModel singled(train_s.feature_dim(), dspec, seed + 3);
    singled.train(bal, cfg.get_int("epochs_detector"),
                  cfg.get_double("lr_detector"), cfg.get_int("batch_size"),
                  seed + 4);
    double single_err =
        classification_error(singled.score_batch(test_s.features()), test_s);

    mome::MoMEModel mixture = mome::MoMEModel::train_two_phase(
        bal.dataset(), cfg.mome_hyper(), seed + 5);
    double mome_err =
        classification_error(mixture.predict_batch(test_s.features()), test_s);
    double mome_train_acc =
        1.0 - classification_error(
                  mixture.predict_batch(bal.dataset().features()),
                  bal.dataset());

    out.single_test_error.push_back(single_err);
    out.mome_test_error.push_back(mome_err);
    out.mome_train_accuracy.push_back(mome_train_acc);

    json j;
    j["seed_index"] = s;
    j["single_test_error"] = single_err;
    j["mome_test_error"] = mome_err;
    j["mome_train_accuracy"] = mome_train_acc;
    log << j.dump() << '\n';
  }
  out.median_single_error = median_of(out.single_test_error);
  out.median_mome_error = median_of(out.mome_test_error);
  json j;
  j["median_single_error"] = out.median_single_error;
  j["median_mome_error"] = out.median_mome_error;
  log << j.dump() << '\n';
  return out;
}

} // namespace sh::harness
