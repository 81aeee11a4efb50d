#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "swifthydra/dataset.hpp"
#include "swifthydra/diffcore.hpp"

namespace sh::detector {

using diff::Vec;

struct SsmDetectorSpec {
  int embed_dim = 16;
  int state_dim = 16;
  int depth = 2;

  void validate() const;
};

struct DetectorTrainMetrics {
  std::vector<double> epoch_loss;
  bool diverged = false;
};

// Plain sequential selective scan over one block's parameters. Exposed
// separately so the recurrence can be tested on its own.
// Per step: delta_t = softplus(Wd u_t + bd); Abar_t = exp(delta_t .* A) with
// A = -softplus(a_raw); Bbar_t = delta_t .* (Wb u_t);
// h_t = Abar_t .* h_{t-1} + Bbar_t; y_t = (Wc u_t)' h_t + D .* u_t (the
// scalar state readout broadcasts over channels).
std::vector<Vec> ssm_scan(const diff::ParameterStore& p,
                          const std::string& block_prefix,
                          const std::vector<Vec>& u);

// Binary classifier over length-P feature vectors, scanned as a sequence of
// scalars with learned per-position embeddings, residual SSM blocks, mean
// pooling and a sigmoid head.
class DetectorModel {
public:
  DetectorModel() = default;
  DetectorModel(int feature_dim, SsmDetectorSpec spec, std::uint64_t seed);

  int feature_dim() const { return feature_dim_; }
  const SsmDetectorSpec& spec() const { return spec_; }

  double score(const Vec& x) const;
  double score_logit(const Vec& x) const;

  // gradient of log score w.r.t. the input features
  Vec score_input_grad(const Vec& x) const;

  // OpenMP-parallel batch scoring; identical to the serial reference.
  Eigen::VectorXd score_batch(const Eigen::MatrixXd& xs) const;
  Eigen::VectorXd score_batch_serial(const Eigen::MatrixXd& xs) const;

  // tape logit for composed chains (decode -> score)
  diff::Tape::Var logit_tape(diff::Tape& t, diff::GradStore& g,
                             diff::Tape::Var x) const;

  DetectorTrainMetrics train(const data::BalancedDataset& bal, int epochs,
                             double lr, int batch_size, std::uint64_t seed);
  DetectorTrainMetrics train_on(const data::Dataset& ds, int epochs, double lr,
                                int batch_size, std::uint64_t seed);

  diff::ParameterStore& params() { return params_; }
  const diff::ParameterStore& params() const { return params_; }
  long parameter_count() const { return params_.parameter_count(); }

private:
  int feature_dim_ = 0;
  SsmDetectorSpec spec_;
  mutable diff::ParameterStore params_;
};

} // namespace sh::detector
