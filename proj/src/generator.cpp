#include "swifthydra/generator.hpp"

#include <algorithm>
#include <cmath>

#include "swifthydra/errors.hpp"

namespace sh::generator {

namespace {
constexpr double kLogvarClamp = 20.0;
}

GeneratorModel::GeneratorModel(int feature_dim, int latent_dim, int hidden,
                               double kl_weight, std::uint64_t seed)
    : feature_dim_(feature_dim), latent_dim_(latent_dim),
      kl_weight_(kl_weight) {
  if (latent_dim_ < 1) throw TrainError("generator: latent_dim must be >= 1");
  if (!(kl_weight_ > 0.0 && kl_weight_ < 1.0))
    throw TrainError("generator: kl_weight must be in (0,1)");
  using diff::Activation;
  enc_spec_.sizes = {feature_dim_ + 2, hidden, hidden, 2 * latent_dim_};
  enc_spec_.acts = {Activation::relu, Activation::relu, Activation::identity};
  dec_spec_.sizes = {latent_dim_ + 2, hidden, hidden, feature_dim_};
  dec_spec_.acts = {Activation::relu, Activation::relu, Activation::identity};
  dec_spec_.spectral_cap = {1.0, 1.0, 1.0};
  Rng rng(seed);
  diff::init_mlp(params_, enc_spec_, "enc.", rng);
  diff::init_mlp_orthogonal(params_, dec_spec_, "dec.", rng);
  diff::apply_spectral_caps(params_, dec_spec_, "dec.");
}

Vec GeneratorModel::label_onehot(int label) const {
  Vec y = Vec::Zero(2);
  y(label == 1 ? 1 : 0) = 1.0;
  return y;
}

LatentCode GeneratorModel::encode_mean(const Vec& x, int label) const {
  if (x.size() != feature_dim_)
    throw TrainError("encode: input length mismatch");
  Vec in(feature_dim_ + 2);
  in << x, label_onehot(label);
  Vec out = diff::mlp_forward(params_, enc_spec_, "enc.", in);
  LatentCode c;
  c.mu = out.head(latent_dim_);
  c.logvar = out.tail(latent_dim_)
                 .cwiseMax(-kLogvarClamp)
                 .cwiseMin(kLogvarClamp);
  c.z = c.mu;
  return c;
}

LatentCode GeneratorModel::encode(const Vec& x, int label,
                                  std::uint64_t seed) const {
  LatentCode c = encode_mean(x, label);
  Rng rng(seed);
  c.z = c.mu;
  for (int i = 0; i < latent_dim_; ++i)
    c.z(i) += std::exp(0.5 * c.logvar(i)) * rng.normal();
  return c;
}

Vec GeneratorModel::decode(const Vec& z, int label) const {
  if (z.size() != latent_dim_) throw TrainError("decode: latent length mismatch");
  Vec in(latent_dim_ + 2);
  in << z, label_onehot(label);
  return diff::mlp_forward(params_, dec_spec_, "dec.", in);
}

diff::Tape::Var GeneratorModel::decode_tape(diff::Tape& t, diff::GradStore& g,
                                            diff::Tape::Var z,
                                            int label) const {
  diff::Tape::Var y = t.input(label_onehot(label));
  diff::Tape::Var in = t.concat(z, y);
  return diff::mlp_forward_tape(t, params_, g, dec_spec_, "dec.", in);
}

ElboBreakdown GeneratorModel::elbo_loss(const data::Dataset& ds,
                                        const std::vector<int>& batch_idx,
                                        std::uint64_t seed) const {
  if (batch_idx.empty()) throw TrainError("elbo_loss: empty batch");
  Rng rng(seed);
  ElboBreakdown b;
  for (int idx : batch_idx) {
    Vec x = ds.row(idx);
    LatentCode c = encode_mean(x, ds.label(idx));
    Vec z = c.mu;
    for (int i = 0; i < latent_dim_; ++i)
      z(i) += std::exp(0.5 * c.logvar(i)) * rng.normal();
    Vec xhat = decode(z, ds.label(idx));
    b.reconstruction += (xhat - x).squaredNorm();
    b.kl += 0.5 *
            (c.mu.array().square() + c.logvar.array().exp() - 1.0 -
             c.logvar.array())
                .sum() /
            latent_dim_;
  }
  b.reconstruction /= batch_idx.size();
  b.kl /= batch_idx.size();
  b.total = (1.0 - kl_weight_) * b.reconstruction + kl_weight_ * b.kl;
  return b;
}

GeneratorTrainMetrics GeneratorModel::train(const data::Dataset& ds, int epochs,
                                            double lr, int batch_size,
                                            std::uint64_t seed) {
  if (ds.size() == 0) throw TrainError("train_generator: empty dataset");
  GeneratorTrainMetrics metrics;
  if (epochs == 0) return metrics;
  Rng rng(seed);
  diff::OptimizerState opt = diff::OptimizerState::for_params(params_, lr);
  diff::GradStore grads = diff::GradStore::zeros_like(params_);
  diff::ParameterStore last_good = params_;

  std::vector<int> order(ds.size());
  for (int i = 0; i < ds.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::size_t j = rng.uniform_int(i);
      std::swap(order[i - 1], order[j]);
    }
    double epoch_loss = 0.0;
    int n_batches = 0;
    for (int start = 0; start < ds.size(); start += batch_size) {
      int bs = std::min(batch_size, ds.size() - start);
      grads.zero();
      diff::Tape t;
      diff::Tape::Var total = t.constant(0.0);
      for (int k = 0; k < bs; ++k) {
        int idx = order[start + k];
        Vec x = ds.row(idx);
        int label = ds.label(idx);
        diff::Tape::Var xin = t.input(x);
        diff::Tape::Var yin = t.input(label_onehot(label));
        diff::Tape::Var enc_out = diff::mlp_forward_tape(
            t, params_, grads, enc_spec_, "enc.", t.concat(xin, yin));
        diff::Tape::Var mu = t.slice(enc_out, 0, latent_dim_);
        diff::Tape::Var logvar = t.slice(enc_out, latent_dim_, latent_dim_);
        // reparameterized sample
        Vec eps(latent_dim_);
        for (int d = 0; d < latent_dim_; ++d) eps(d) = rng.normal();
        diff::Tape::Var std_ = t.exp(t.scale(logvar, 0.5));
        diff::Tape::Var z = t.add(mu, t.mul(std_, t.input(eps)));
        diff::Tape::Var xhat = diff::mlp_forward_tape(
            t, params_, grads, dec_spec_, "dec.", t.concat(z, yin));
        diff::Tape::Var err = t.sub(xhat, xin);
        diff::Tape::Var recon = t.dot(err, err);
        // kl = 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)
        diff::Tape::Var mu2 = t.mul(mu, mu);
        diff::Tape::Var ev = t.exp(logvar);
        diff::Tape::Var kl_terms =
            t.sub(t.sub(t.add(mu2, ev),
                        t.input(Vec::Ones(latent_dim_))),
                  logvar);
        diff::Tape::Var kl =
            t.scale(t.sum(kl_terms), 0.5 / latent_dim_);
        diff::Tape::Var loss =
            t.add(t.scale(recon, 1.0 - kl_weight_), t.scale(kl, kl_weight_));
        total = t.add(total, loss);
      }
      total = t.scale(total, 1.0 / bs);
      double loss_val = t.val(total)(0);
      if (!std::isfinite(loss_val)) {
        params_ = last_good;
        metrics.diverged = true;
        return metrics;
      }
      t.backward(total);
      diff::adam_step(params_, grads, opt);
      diff::apply_spectral_caps(params_, dec_spec_, "dec.");
      epoch_loss += loss_val;
      ++n_batches;
    }
    last_good = params_;
    metrics.epoch_loss.push_back(epoch_loss / n_batches);
  }
  return metrics;
}

std::vector<Vec> GeneratorModel::sample_anomalies(int n,
                                                  std::uint64_t seed) const {
  std::vector<Vec> out;
  out.reserve(n);
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    Vec z(latent_dim_);
    for (int d = 0; d < latent_dim_; ++d) z(d) = rng.normal();
    out.push_back(decode(z, +1));
  }
  return out;
}

} // namespace sh::generator
