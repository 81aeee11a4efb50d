#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <vector>

#include "swifthydra/dataset.hpp"
#include "swifthydra/density.hpp"
#include "swifthydra/detector.hpp"
#include "swifthydra/diffcore.hpp"
#include "swifthydra/generator.hpp"

namespace sh::agent {

using diff::Vec;

// State seen by the policy: the latent point plus a 2-number dataset summary
// (current anomalous-set entropy estimate, normalized episode index).
struct AgentState {
  Vec z;
  double entropy = 0.0;
  double episode_frac = 0.0;

  Vec as_vector() const {
    Vec v(z.size() + 2);
    v << z, entropy, episode_frac;
    return v;
  }
};

struct Action {
  Vec mu;
  Vec sigma; // >= sigma_min
  Vec delta; // sampled modification vector
  double log_prob = 0.0;
};

struct RewardBreakdown {
  double entropy_term = 0.0;
  double evasion_term = 0.0;
  double total = 0.0;
};

struct TransitionRecord {
  AgentState state;
  Action action;
  RewardBreakdown reward;
  double value_estimate = 0.0;
  bool feasible = true;
  Vec generated_sample;
};

// Axis-aligned boxes in latent and data space, inflated by a margin fraction
// of each dimension's range.
struct FeasibleRegion {
  Vec latent_lo, latent_hi;
  Vec data_lo, data_hi;

  static FeasibleRegion build(const generator::GeneratorModel& gen,
                              const data::Dataset& train, double rho_margin);
};

struct RewardContext {
  const detector::DetectorModel* detector = nullptr;
  const density::KdeModel* kde_anomalous = nullptr; // data-space, anomalous
  int episode = 0;
  double gamma = 0.95;
  int kde_samples = 300;
  std::uint64_t entropy_seed = 0; // fixed per episode
};

RewardBreakdown compute_reward(const Vec& x_hat, const RewardContext& ctx);

bool is_feasible(const Vec& z_hat, const FeasibleRegion& region,
                 const generator::GeneratorModel& gen);

struct FeasibleSearchResult {
  Vec z;
  bool improved = false; // reward at z >= reward at start
};

// Gradient descent on L(z) = log W(decode(z,+1)) + gamma^e * log p-latent(z),
// stopping early if an iterate leaves the feasible region. The data-space
// reward of compute_reward stays the authoritative scalar; the latent KDE
// only supplies the differentiable diversity surrogate.
FeasibleSearchResult feasible_action_search(
    const Vec& z0, const generator::GeneratorModel& gen,
    const detector::DetectorModel& det, const density::KdeModel& kde_latent,
    const FeasibleRegion& region, const RewardContext& reward_ctx, int steps,
    double step_size);

struct PpoHyper {
  double clip = 0.2;
  int epochs = 4;
  int minibatch = 256;
  double value_coef = 0.5;
  double lr = 1e-4;
};

struct PpoMetrics {
  double mean_reward = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
};

// Diagonal-Gaussian policy and scalar value network over AgentState vectors.
class AgentBundle {
public:
  AgentBundle() = default;
  AgentBundle(int latent_dim, int hidden, double sigma_min, double lr,
              std::uint64_t seed);

  int latent_dim() const { return latent_dim_; }
  double sigma_min() const { return sigma_min_; }

  Action act(const AgentState& state, std::uint64_t seed) const;
  // mean/sigma heads without sampling
  std::pair<Vec, Vec> policy_heads(const Vec& state_vec) const;
  double value(const AgentState& state) const;

  double log_prob(const Vec& delta, const Vec& mu, const Vec& sigma) const;

  // one Adam step on the Gaussian NLL of a feasible delta at this state,
  // with the std fixed at sigma_target (the std the policy emitted when the
  // infeasible action was drawn); only the mean head receives gradient.
  // Returns the loss.
  double imitation_update(const AgentState& state, const Vec& feasible_delta,
                          const Vec& sigma_target);

  PpoMetrics ppo_update(const std::vector<TransitionRecord>& trajectory,
                        const PpoHyper& hyper, std::uint64_t seed);

  diff::ParameterStore& policy_params() { return policy_; }
  const diff::ParameterStore& policy_params() const { return policy_; }
  diff::ParameterStore& value_params() { return value_; }
  const diff::ParameterStore& value_params() const { return value_; }

private:
  diff::Tape::Var heads_tape(diff::Tape& t, diff::GradStore& g,
                             diff::Tape::Var state) const;
  diff::Tape::Var logprob_tape(diff::Tape& t, diff::Tape::Var mu,
                               diff::Tape::Var sigma, const Vec& delta) const;

  int latent_dim_ = 0;
  double sigma_min_ = 1e-3;
  diff::NetworkSpec policy_spec_;
  diff::NetworkSpec value_spec_;
  mutable diff::ParameterStore policy_;
  mutable diff::ParameterStore value_;
  diff::OptimizerState policy_opt_;
  diff::OptimizerState value_opt_;
};

} // namespace sh::agent
