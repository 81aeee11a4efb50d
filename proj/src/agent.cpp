#include "swifthydra/agent.hpp"

#include <algorithm>
#include <cmath>

#include "swifthydra/errors.hpp"

namespace sh::agent {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

FeasibleRegion FeasibleRegion::build(const generator::GeneratorModel& gen,
                                     const data::Dataset& train,
                                     double rho_margin) {
  FeasibleRegion r;
  int d = gen.latent_dim();
  int p = train.feature_dim();
  r.latent_lo = Vec::Constant(d, std::numeric_limits<double>::infinity());
  r.latent_hi = Vec::Constant(d, -std::numeric_limits<double>::infinity());
  for (int idx : train.indices_of_label(+1)) {
    generator::LatentCode code = gen.encode_mean(train.row(idx), +1);
    // one-sigma posterior envelope: encoded latents are posterior samples,
    // so the box must cover their spread, not just the means. A dimension
    // the encoder ignores keeps a near-prior posterior, and a mean-only box
    // would collapse there and reject almost every action.
    Vec sd = (0.5 * code.logvar.array()).exp();
    r.latent_lo = r.latent_lo.cwiseMin(code.mu - sd);
    r.latent_hi = r.latent_hi.cwiseMax(code.mu + sd);
  }
  r.data_lo = train.features().colwise().minCoeff().transpose();
  r.data_hi = train.features().colwise().maxCoeff().transpose();
  auto inflate = [rho_margin](Vec& lo, Vec& hi) {
    Vec range = hi - lo;
    lo -= rho_margin * range;
    hi += rho_margin * range;
  };
  inflate(r.latent_lo, r.latent_hi);
  inflate(r.data_lo, r.data_hi);
  (void)p;
  return r;
}

RewardBreakdown compute_reward(const Vec& x_hat, const RewardContext& ctx) {
  RewardBreakdown r;
  density::KdeModel kde = ctx.kde_anomalous->with_extra_point(x_hat);
  double h = kde.entropy_mc(ctx.kde_samples, ctx.entropy_seed);
  r.entropy_term = std::pow(ctx.gamma, static_cast<double>(ctx.episode)) * h;
  double score = ctx.detector->score(x_hat);
  r.evasion_term = -std::log(score);
  r.total = r.entropy_term + r.evasion_term;
  return r;
}

bool is_feasible(const Vec& z_hat, const FeasibleRegion& region,
                 const generator::GeneratorModel& gen) {
  for (int i = 0; i < z_hat.size(); ++i) {
    if (z_hat(i) < region.latent_lo(i) || z_hat(i) > region.latent_hi(i))
      return false;
  }
  Vec x = gen.decode(z_hat, +1);
  for (int i = 0; i < x.size(); ++i) {
    if (x(i) < region.data_lo(i) || x(i) > region.data_hi(i)) return false;
  }
  return true;
}

FeasibleSearchResult feasible_action_search(
    const Vec& z0, const generator::GeneratorModel& gen,
    const detector::DetectorModel& det, const density::KdeModel& kde_latent,
    const FeasibleRegion& region, const RewardContext& reward_ctx, int steps,
    double step_size) {
  double gamma_e = std::pow(reward_ctx.gamma,
                            static_cast<double>(reward_ctx.episode));
  Vec z = z0;
  Vec last_feasible = z0;
  diff::GradStore ggen = diff::GradStore::zeros_like(gen.params());
  diff::GradStore gdet = diff::GradStore::zeros_like(det.params());
  for (int it = 0; it < steps; ++it) {
    // d/dz [log W(decode(z,+1))]
    diff::Tape t;
    diff::Tape::Var zin = t.input(z, /*needs_grad=*/true);
    diff::Tape::Var xhat = gen.decode_tape(t, ggen, zin, +1);
    diff::Tape::Var logit = det.logit_tape(t, gdet, xhat);
    diff::Tape::Var log_score = t.neg(t.softplus(t.neg(logit)));
    t.backward(log_score);
    Vec grad = t.grad(zin) + gamma_e * kde_latent.log_pdf_grad(z);
    z -= step_size * grad;
    if (!is_feasible(z, region, gen)) break;
    last_feasible = z;
  }
  FeasibleSearchResult result;
  result.z = last_feasible;
  RewardBreakdown before = compute_reward(gen.decode(z0, +1), reward_ctx);
  RewardBreakdown after =
      compute_reward(gen.decode(last_feasible, +1), reward_ctx);
  result.improved = after.total >= before.total;
  return result;
}

AgentBundle::AgentBundle(int latent_dim, int hidden, double sigma_min,
                         double lr, std::uint64_t seed)
    : latent_dim_(latent_dim), sigma_min_(sigma_min) {
  using diff::Activation;
  int in = latent_dim_ + 2;
  policy_spec_.sizes = {in, hidden, hidden, 2 * latent_dim_};
  policy_spec_.acts = {Activation::tanh, Activation::tanh,
                       Activation::identity};
  value_spec_.sizes = {in, hidden, hidden, 1};
  value_spec_.acts = {Activation::tanh, Activation::tanh,
                      Activation::identity};
  Rng rng(seed);
  diff::init_mlp(policy_, policy_spec_, "pi.", rng, 0.5);
  diff::init_mlp(value_, value_spec_, "v.", rng, 0.5);
  policy_opt_ = diff::OptimizerState::for_params(policy_, lr);
  value_opt_ = diff::OptimizerState::for_params(value_, lr);
}

std::pair<Vec, Vec> AgentBundle::policy_heads(const Vec& state_vec) const {
  Vec out = diff::mlp_forward(policy_, policy_spec_, "pi.", state_vec);
  Vec mu = out.head(latent_dim_);
  Vec sigma(latent_dim_);
  for (int i = 0; i < latent_dim_; ++i) {
    double s = out(latent_dim_ + i);
    sigma(i) = (s > 30.0 ? s : std::log1p(std::exp(s))) + sigma_min_;
  }
  return {mu, sigma};
}

double AgentBundle::log_prob(const Vec& delta, const Vec& mu,
                             const Vec& sigma) const {
  double lp = 0.0;
  for (int i = 0; i < delta.size(); ++i) {
    double zi = (delta(i) - mu(i)) / sigma(i);
    lp += -0.5 * zi * zi - std::log(sigma(i)) - 0.5 * kLog2Pi;
  }
  return lp;
}

Action AgentBundle::act(const AgentState& state, std::uint64_t seed) const {
  auto [mu, sigma] = policy_heads(state.as_vector());
  Rng rng(seed);
  Action a;
  a.mu = mu;
  a.sigma = sigma;
  a.delta = mu;
  for (int i = 0; i < latent_dim_; ++i) a.delta(i) += sigma(i) * rng.normal();
  a.log_prob = log_prob(a.delta, mu, sigma);
  return a;
}

double AgentBundle::value(const AgentState& state) const {
  return diff::mlp_forward(value_, value_spec_, "v.", state.as_vector())(0);
}

diff::Tape::Var AgentBundle::heads_tape(diff::Tape& t, diff::GradStore& g,
                                        diff::Tape::Var state) const {
  return diff::mlp_forward_tape(t, policy_, g, policy_spec_, "pi.", state);
}

diff::Tape::Var AgentBundle::logprob_tape(diff::Tape& t, diff::Tape::Var mu,
                                          diff::Tape::Var sigma,
                                          const Vec& delta) const {
  using V = diff::Tape::Var;
  V d = t.input(delta);
  V diffv = t.sub(d, mu);
  V inv_sigma = t.exp(t.neg(t.log(sigma)));
  V zi = t.mul(diffv, inv_sigma);
  V quad = t.scale(t.sum(t.mul(zi, zi)), -0.5);
  V logs = t.neg(t.sum(t.log(sigma)));
  V constant = t.constant(-0.5 * kLog2Pi * latent_dim_);
  return t.add(t.add(quad, logs), constant);
}

double AgentBundle::imitation_update(const AgentState& state,
                                     const Vec& feasible_delta,
                                     const Vec& sigma_target) {
  diff::GradStore g = diff::GradStore::zeros_like(policy_);
  diff::Tape t;
  diff::Tape::Var s = t.input(state.as_vector());
  diff::Tape::Var out = heads_tape(t, g, s);
  diff::Tape::Var mu = t.slice(out, 0, latent_dim_);
  // sigma enters as a constant: keeping the std fixed makes the loss
  // quadratic in mu, so repeated updates converge without the runaway
  // feedback of letting sigma chase the shrinking residual
  diff::Tape::Var sigma = t.input(sigma_target);
  diff::Tape::Var nll = t.neg(logprob_tape(t, mu, sigma, feasible_delta));
  double loss = t.val(nll)(0);
  t.backward(nll);
  diff::adam_step(policy_, g, policy_opt_);
  return loss;
}

PpoMetrics AgentBundle::ppo_update(
    const std::vector<TransitionRecord>& trajectory, const PpoHyper& hyper,
    std::uint64_t seed) {
  if (trajectory.empty()) throw TrainError("ppo_update: empty trajectory");
  int n = static_cast<int>(trajectory.size());

  // one-step episodes: advantage = reward - value(state)
  Vec adv(n), returns(n), old_logprob(n);
  for (int i = 0; i < n; ++i) {
    returns(i) = trajectory[i].reward.total;
    adv(i) = returns(i) - trajectory[i].value_estimate;
    old_logprob(i) = trajectory[i].action.log_prob;
  }
  double adv_mean = adv.mean();
  double adv_std =
      std::sqrt((adv.array() - adv_mean).square().sum() / std::max(1, n - 1));
  if (adv_std > 1e-8) adv = (adv.array() - adv_mean) / adv_std;

  PpoMetrics metrics;
  metrics.mean_reward = returns.mean();

  Rng rng(seed);
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  diff::GradStore gp = diff::GradStore::zeros_like(policy_);
  diff::GradStore gv = diff::GradStore::zeros_like(value_);

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::size_t j = rng.uniform_int(i);
      std::swap(order[i - 1], order[j]);
    }
    for (int start = 0; start < n; start += hyper.minibatch) {
      int bs = std::min(hyper.minibatch, n - start);
      gp.zero();
      gv.zero();
      diff::Tape t;
      diff::Tape::Var ploss = t.constant(0.0);
      diff::Tape::Var vloss = t.constant(0.0);
      for (int k = 0; k < bs; ++k) {
        int idx = order[start + k];
        const TransitionRecord& tr = trajectory[idx];
        Vec sv = tr.state.as_vector();
        diff::Tape::Var s = t.input(sv);
        diff::Tape::Var out = heads_tape(t, gp, s);
        diff::Tape::Var mu = t.slice(out, 0, latent_dim_);
        diff::Tape::Var sigma = t.add(
            t.softplus(t.slice(out, latent_dim_, latent_dim_)),
            t.input(Vec::Constant(latent_dim_, sigma_min_)));
        diff::Tape::Var lp = logprob_tape(t, mu, sigma, tr.action.delta);
        diff::Tape::Var ratio =
            t.exp(t.sub(lp, t.constant(old_logprob(idx))));
        double a = adv(idx);
        // clipped surrogate: maximize min(r*A, clip(r)*A); here as a loss
        diff::Tape::Var r_a = t.scale(ratio, a);
        const diff::Vec& rv = t.val(ratio);
        double rclip =
            std::clamp(rv(0), 1.0 - hyper.clip, 1.0 + hyper.clip);
        double clipped = rclip * a;
        // min(rA, clipped): pick the branch by value; gradient flows only
        // through the unclipped branch when it is the active one
        diff::Tape::Var surr =
            (t.val(r_a)(0) <= clipped) ? r_a : t.constant(clipped);
        ploss = t.sub(ploss, surr);

        diff::Tape::Var v = diff::mlp_forward_tape(t, value_, gv, value_spec_,
                                                   "v.", t.input(sv));
        diff::Tape::Var verr = t.sub(v, t.constant(returns(idx)));
        vloss = t.add(vloss, t.mul(verr, verr));
      }
      ploss = t.scale(ploss, 1.0 / bs);
      vloss = t.scale(vloss, hyper.value_coef / bs);
      diff::Tape::Var total = t.add(ploss, vloss);
      t.backward(total);
      diff::adam_step(policy_, gp, policy_opt_);
      diff::adam_step(value_, gv, value_opt_);
      metrics.policy_loss = t.val(ploss)(0);
      metrics.value_loss = t.val(vloss)(0);
    }
  }
  return metrics;
}

} // namespace sh::agent
