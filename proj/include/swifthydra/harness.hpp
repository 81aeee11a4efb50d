#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "swifthydra/dataset.hpp"
#include "swifthydra/selfloop.hpp"
#include "swifthydra/mome.hpp"

namespace sh::harness {

// Probability that a random anomalous score exceeds a random normal score,
// ties counted 1/2. Rank-statistic implementation.
double auc_roc(const std::vector<double>& scores,
               const std::vector<int>& labels);

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool degenerate = false; // a zero-division was flagged
};

Prf prf_at_threshold(const std::vector<double>& scores,
                     const std::vector<int>& labels, double threshold);

// Median wall-clock seconds over 3 repetitions of scoring every sample.
struct TifResult {
  double median_seconds = 0.0;
  double variance = 0.0;
  int sample_count = 0;
};

TifResult measure_tif(const std::function<void()>& score_all, int samples);

struct EvalReport {
  std::string dataset_name;
  std::string variant; // "single" or "mome"
  double auc = 0.0;
  Prf prf;
  double total_inference_seconds = 0.0; // excluded from deterministic output
  int sample_count = 0;

  // timing omitted so reruns are byte-identical
  std::string to_json(bool include_timing = false) const;
};

// Columns: x, y, label, provenance, episode. Without an explicit feature
// index pair the dataset must be 2-D.
void export_points(const data::Dataset& ds, const std::string& path,
                   int episode = -1, int ix = -1, int iy = -1);

// Flat key = value configuration with '#' comments; unknown keys rejected.
class RunConfig {
public:
  RunConfig(); // defaults
  static RunConfig from_file(const std::string& path);
  void set(const std::string& key, const std::string& value);

  double get_double(const std::string& key) const;
  int get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  std::string get_string(const std::string& key) const;

  selfloop::LoopConfig loop_config() const;
  mome::MomeHyper mome_hyper() const;

  void write_resolved(const std::string& path) const;
  const std::map<std::string, std::string>& entries() const { return kv_; }

private:
  std::map<std::string, std::string> kv_;
};

struct PresetResult {
  std::vector<EvalReport> reports;
  std::vector<selfloop::EpisodeReport> episodes;
};

// sine_toy: full pipeline (selfloop + MoME) on the sine toy, AUC on a
// held-out split, per-episode point exports.
PresetResult run_sine_toy(const RunConfig& cfg, const std::string& out_dir);

// theorem_clusters: single detector vs MoME on overlapping Gaussian
// clusters, paired over 5 seeds.
struct TheoremClustersResult {
  std::vector<double> single_test_error; // per seed
  std::vector<double> mome_test_error;
  std::vector<double> mome_train_accuracy;
  double median_single_error = 0.0;
  double median_mome_error = 0.0;
};

TheoremClustersResult run_theorem_clusters(const RunConfig& cfg,
                                           const std::string& out_dir,
                                           double center_spacing_sigma,
                                           int n_seeds = 5);

// Saved model artifact: standardizer plus either a single detector or a
// mixture, packed into one "SWHY1" checkpoint.
struct ModelBundle {
  data::Standardizer standardizer;
  bool is_mome = false;
  detector::DetectorModel single;
  mome::MoMEModel mixture;

  double score(const Eigen::VectorXd& raw) const;
};

void save_bundle(const ModelBundle& bundle, const std::string& path);
ModelBundle load_bundle(const std::string& path);

std::string episode_json(const selfloop::EpisodeReport& r);

double kendall_tau(const std::vector<double>& xs,
                   const std::vector<double>& ys);

// upper-tail chi-square p-value (regularized incomplete gamma)
double chi2_sf(double stat, int dof);

} // namespace sh::harness
