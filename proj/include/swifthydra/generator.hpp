#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "swifthydra/dataset.hpp"
#include "swifthydra/diffcore.hpp"

namespace sh::generator {

using diff::Vec;

struct LatentCode {
  Vec mu;
  Vec logvar; // clamped to [-20, 20]
  Vec z;
};

struct ElboBreakdown {
  double reconstruction = 0.0;
  double kl = 0.0;
  double total = 0.0;
};

struct GeneratorTrainMetrics {
  std::vector<double> epoch_loss;
  bool diverged = false;
};

// Conditional VAE: encoder (x, one-hot y) -> (mu, logvar), decoder
// (z, one-hot y) -> x-hat. Decoder layers are spectral-capped at 1 so the
// decode map is 1-Lipschitz.
class GeneratorModel {
public:
  GeneratorModel() = default;
  GeneratorModel(int feature_dim, int latent_dim, int hidden,
                 double kl_weight, std::uint64_t seed);

  int feature_dim() const { return feature_dim_; }
  int latent_dim() const { return latent_dim_; }
  double kl_weight() const { return kl_weight_; }

  LatentCode encode(const Vec& x, int label, std::uint64_t seed) const;
  // deterministic (mu, logvar) without sampling
  LatentCode encode_mean(const Vec& x, int label) const;
  Vec decode(const Vec& z, int label) const;

  ElboBreakdown elbo_loss(const data::Dataset& ds,
                          const std::vector<int>& batch_idx,
                          std::uint64_t seed) const;

  GeneratorTrainMetrics train(const data::Dataset& ds, int epochs, double lr,
                              int batch_size, std::uint64_t seed);

  std::vector<Vec> sample_anomalies(int n, std::uint64_t seed) const;

  // gradient of log score(detector(decode(z, +1))) style chains: callers
  // build tapes via these hooks
  diff::Tape::Var decode_tape(diff::Tape& t, diff::GradStore& g,
                              diff::Tape::Var z, int label) const;

  diff::ParameterStore& params() { return params_; }
  const diff::ParameterStore& params() const { return params_; }
  const diff::NetworkSpec& decoder_spec() const { return dec_spec_; }

private:
  Vec label_onehot(int label) const;

  int feature_dim_ = 0;
  int latent_dim_ = 0;
  double kl_weight_ = 0.55;
  diff::NetworkSpec enc_spec_;
  diff::NetworkSpec dec_spec_;
  mutable diff::ParameterStore params_;
};

} // namespace sh::generator
