#include "swifthydra/selfloop.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "swifthydra/density.hpp"
#include "swifthydra/errors.hpp"

namespace sh::selfloop {

int LoopConfig::resolved_top_l() const {
  if (top_l > 0) return top_l;
  return std::max(1, steps_per_episode / 10);
}

int LoopConfig::resolved_latent_dim(int feature_dim) const {
  if (latent_dim > 0) return latent_dim;
  return std::min(8, feature_dim);
}

std::vector<int> select_top_l(const std::vector<double>& rewards, int l) {
  int n = static_cast<int>(rewards.size());
  if (l > n) throw DataError("select_top_l: l exceeds set size");
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  // stable sort keeps earlier steps first on ties
  std::stable_sort(idx.begin(), idx.end(), [&rewards](int a, int b) {
    return rewards[a] > rewards[b];
  });
  idx.resize(l);
  return idx;
}

EpisodeOutcome run_episode(LoopContext& ctx, int episode, const LoopConfig& cfg,
                           std::uint64_t seed) {
  if (ctx.train.count_anomalous() < 1)
    throw TrainError("run_episode: no anomalous training samples");
  Rng rng(seed);

  int gen_epochs = episode == 0
                       ? cfg.epochs_generator
                       : (cfg.epochs_generator_warm > 0
                              ? cfg.epochs_generator_warm
                              : std::max(1, cfg.epochs_generator / 10));
  int det_epochs = episode == 0
                       ? cfg.epochs_detector
                       : (cfg.epochs_detector_warm > 0
                              ? cfg.epochs_detector_warm
                              : std::max(1, cfg.epochs_detector / 10));

  auto gen_metrics = ctx.generator.train(ctx.train, gen_epochs, cfg.lr_cvae,
                                         cfg.batch_size, rng.next_u64());
  if (gen_metrics.diverged)
    throw TrainError("generator training diverged in episode " +
                     std::to_string(episode));
  auto det_metrics = ctx.detector.train(ctx.balanced, det_epochs,
                                        cfg.lr_detector, cfg.batch_size,
                                        rng.next_u64());
  if (det_metrics.diverged)
    throw TrainError("detector training diverged in episode " +
                     std::to_string(episode));

  // per-episode fixed structures
  Eigen::MatrixXd anom_feats = ctx.train.features_of_label(+1);
  density::KdeModel kde_data = density::fit_kde(anom_feats, cfg.bandwidth);

  // latent KDE over encoded anomalous latents for the search surrogate
  Eigen::MatrixXd anom_latents(anom_feats.rows(),
                               ctx.generator.latent_dim());
  auto anom_idx = ctx.train.indices_of_label(+1);
  for (std::size_t i = 0; i < anom_idx.size(); ++i) {
    anom_latents.row(static_cast<int>(i)) =
        ctx.generator.encode_mean(ctx.train.row(anom_idx[i]), +1)
            .mu.transpose();
  }
  density::KdeModel kde_latent = density::fit_kde(anom_latents, cfg.bandwidth);

  agent::FeasibleRegion region =
      agent::FeasibleRegion::build(ctx.generator, ctx.train, cfg.rho_margin);

  agent::RewardContext rctx;
  rctx.detector = &ctx.detector;
  rctx.kde_anomalous = &kde_data;
  rctx.episode = episode;
  rctx.gamma = cfg.gamma;
  rctx.kde_samples = cfg.kde_samples;
  rctx.entropy_seed = rng.next_u64();

  double episode_entropy = kde_data.entropy_mc(cfg.kde_samples,
                                               rctx.entropy_seed);
  double episode_frac =
      static_cast<double>(episode) / std::max(1, cfg.episodes);

  EpisodeOutcome out;
  out.report.episode = episode;
  out.report.steps = cfg.steps_per_episode;

  // uniform without replacement over anomalous points, cycling when h
  // exceeds the count
  std::vector<int> pool = anom_idx;
  std::size_t pool_pos = pool.size();

  for (int t = 0; t < cfg.steps_per_episode; ++t) {
    if (pool_pos >= pool.size()) {
      for (std::size_t i = pool.size(); i > 1; --i) {
        std::size_t j = rng.uniform_int(i);
        std::swap(pool[i - 1], pool[j]);
      }
      pool_pos = 0;
    }
    int idx = pool[pool_pos++];

    agent::AgentState state;
    state.z = ctx.generator.encode_mean(ctx.train.row(idx), +1).mu;
    state.entropy = episode_entropy;
    state.episode_frac = episode_frac;

    agent::Action action = ctx.agent.act(state, rng.next_u64());
    diff::Vec z_hat = state.z + action.delta;

    bool feasible = agent::is_feasible(z_hat, region, ctx.generator);
    if (!feasible) {
      out.report.infeasible_actions += 1;
      auto search = agent::feasible_action_search(
          state.z, ctx.generator, ctx.detector, kde_latent, region, rctx,
          cfg.eta_feasible, cfg.alpha_feasible);
      z_hat = search.z;
      diff::Vec delta_hat = z_hat - state.z;
      ctx.agent.imitation_update(state, delta_hat, action.sigma);
      // replace the action; keep sigma, recompute log-prob for the new delta
      action.delta = delta_hat;
      action.log_prob =
          ctx.agent.log_prob(delta_hat, action.mu, action.sigma);
    }

    diff::Vec x_hat = ctx.generator.decode(z_hat, +1);
    agent::RewardBreakdown reward = agent::compute_reward(x_hat, rctx);

    agent::TransitionRecord rec;
    rec.state = state;
    rec.action = action;
    rec.reward = reward;
    rec.value_estimate = ctx.agent.value(state);
    rec.feasible = feasible;
    rec.generated_sample = x_hat;
    out.trajectory.push_back(rec);
    out.generated.push_back(x_hat);
  }

  agent::PpoHyper hyper;
  hyper.minibatch = cfg.minibatch;
  hyper.lr = cfg.lr_policy;
  ctx.agent.ppo_update(out.trajectory, hyper, rng.next_u64());

  double sum_r = 0.0;
  for (const auto& tr : out.trajectory) sum_r += tr.reward.total;
  out.report.average_reward = sum_r / out.trajectory.size();
  out.report.generator_final_loss =
      gen_metrics.epoch_loss.empty() ? 0.0 : gen_metrics.epoch_loss.back();
  out.report.detector_final_loss =
      det_metrics.epoch_loss.empty() ? 0.0 : det_metrics.epoch_loss.back();
  return out;
}

TrainingArtifacts run_training(const LoopConfig& cfg,
                               const data::Dataset& data,
                               const EpisodeCallback& on_episode) {
  if (data.count_normal() == 0 || data.count_anomalous() == 0)
    throw DataError("run_training: both classes required");

  Rng rng(cfg.master_seed);
  TrainingArtifacts art;
  int p = data.feature_dim();
  int d = cfg.resolved_latent_dim(p);

  art.ctx.generator = generator::GeneratorModel(
      p, d, cfg.generator_hidden, cfg.kl_weight, rng.next_u64());
  detector::SsmDetectorSpec dspec;
  dspec.embed_dim = cfg.detector_embed_dim;
  dspec.state_dim = cfg.detector_state_dim;
  dspec.depth = cfg.detector_depth;
  art.ctx.detector = detector::DetectorModel(p, dspec, rng.next_u64());
  art.ctx.agent = agent::AgentBundle(d, cfg.agent_hidden, cfg.sigma_min,
                                     cfg.lr_policy, rng.next_u64());
  art.ctx.train = data; // D_0 = D_train
  art.ctx.balanced = data::trim_balance(art.ctx.train, rng.next_u64());

  double best_avg_reward = -std::numeric_limits<double>::infinity();
  int no_improvement = 0;
  int top_l = cfg.resolved_top_l();

  for (int e = 0; e < cfg.episodes; ++e) {
    EpisodeOutcome out = run_episode(art.ctx, e, cfg, rng.next_u64());

    std::vector<double> rewards;
    rewards.reserve(out.trajectory.size());
    for (const auto& tr : out.trajectory) rewards.push_back(tr.reward.total);
    int l = std::min<int>(top_l, static_cast<int>(out.generated.size()));
    auto selected = select_top_l(rewards, l);

    // growth guard: never let anomalies outnumber normals
    int room = art.ctx.train.count_normal() - art.ctx.train.count_anomalous();
    if (!art.ctx.growth_halted && room < static_cast<int>(selected.size())) {
      std::fprintf(stderr,
                   "warning: anomalous count would exceed normal count; "
                   "halting dataset growth at episode %d\n",
                   e);
      art.ctx.growth_halted = true;
    }
    std::vector<diff::Vec> keep;
    if (!art.ctx.growth_halted) {
      for (int i : selected) {
        keep.push_back(out.generated[i]);
        out.report.selected_rewards.push_back(rewards[i]);
      }
      art.ctx.train = data::append_generated(art.ctx.train, keep);
      art.ctx.balanced = data::trim_balance(art.ctx.train, rng.next_u64());
    }

    out.report.train_size = art.ctx.train.size();
    out.report.balanced_size = art.ctx.balanced.dataset().size();
    out.report.anomalous_size = art.ctx.train.count_anomalous();
    art.reports.push_back(out.report);
    if (on_episode) on_episode(out.report, keep);
    art.episodes_run = e + 1;

    bool first = !std::isfinite(best_avg_reward);
    if (first || out.report.average_reward > best_avg_reward + cfg.omega) {
      best_avg_reward = out.report.average_reward;
      no_improvement = 0;
    } else {
      no_improvement += 1;
      if (no_improvement >= cfg.patience) {
        art.converged_early = true;
        break;
      }
    }
  }
  return art;
}

} // namespace sh::selfloop
