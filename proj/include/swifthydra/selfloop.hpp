#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "swifthydra/agent.hpp"
#include "swifthydra/dataset.hpp"
#include "swifthydra/detector.hpp"
#include "swifthydra/generator.hpp"

namespace sh::selfloop {

struct LoopConfig {
  int episodes = 200;
  int steps_per_episode = 500;
  int top_l = 0; // 0 -> max(1, steps/10)
  double gamma = 0.95;
  double omega = 1e-3; // convergence threshold
  int patience = 20; // episodes with no improvement

  // module hyperparameters
  int latent_dim = 0; // 0 -> min(8, P)
  double kl_weight = 0.55;
  double lr_cvae = 0.003;
  int epochs_generator = 500;
  int epochs_generator_warm = 0; // 0 -> max(1, epochs_generator / 10)
  int generator_hidden = 32;
  int detector_embed_dim = 16;
  int detector_state_dim = 16;
  int detector_depth = 2;
  double lr_detector = 0.001;
  int epochs_detector = 600;
  int epochs_detector_warm = 0; // 0 -> max(1, epochs_detector / 10)
  double lr_policy = 0.0001;
  int minibatch = 256;
  int batch_size = 64;
  double bandwidth = 0.5; // < 0 means silverman
  int kde_samples = 300;
  int eta_feasible = 10;
  double alpha_feasible = 0.01;
  double rho_margin = 0.1;
  double sigma_min = 1e-3;
  int agent_hidden = 32;
  std::uint64_t master_seed = 0;

  int resolved_top_l() const;
  int resolved_latent_dim(int feature_dim) const;
};

struct EpisodeReport {
  int episode = 0;
  double average_reward = 0.0;
  int infeasible_actions = 0;
  int steps = 0;
  int train_size = 0;
  int balanced_size = 0;
  int anomalous_size = 0;
  double detector_final_loss = 0.0;
  double generator_final_loss = 0.0;
  std::vector<double> selected_rewards;
};

struct LoopContext {
  generator::GeneratorModel generator;
  detector::DetectorModel detector;
  agent::AgentBundle agent;
  data::Dataset train;
  data::BalancedDataset balanced;
  bool growth_halted = false;
};

struct EpisodeOutcome {
  std::vector<agent::TransitionRecord> trajectory;
  std::vector<diff::Vec> generated;
  EpisodeReport report;
};

struct TrainingArtifacts {
  LoopContext ctx;
  std::vector<EpisodeReport> reports;
  int episodes_run = 0;
  bool converged_early = false;
};

// One Algorithm-1 episode: retrain generator and detector, roll out the
// policy with feasibility fallback and imitation updates, PPO update.
EpisodeOutcome run_episode(LoopContext& ctx, int episode,
                           const LoopConfig& cfg, std::uint64_t seed);

// indices into the generated set, ordered by descending reward, ties by
// earlier step
std::vector<int> select_top_l(const std::vector<double>& rewards, int l);

using EpisodeCallback =
    std::function<void(const EpisodeReport&, const std::vector<diff::Vec>&)>;

TrainingArtifacts run_training(const LoopConfig& cfg,
                               const data::Dataset& data,
                               const EpisodeCallback& on_episode = nullptr);

} // namespace sh::selfloop
