#include "swifthydra/detector.hpp"

#include <algorithm>
#include <cmath>

#include "swifthydra/errors.hpp"

namespace sh::detector {

namespace {

inline double softplus_scalar(double x) {
  return x > 30.0 ? x : std::log1p(std::exp(x));
}

inline double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Vec leaky(const Vec& x) {
  return x.array().max(0.0) + 0.01 * x.array().min(0.0);
}

} // namespace

void SsmDetectorSpec::validate() const {
  if (embed_dim < 1 || state_dim < 1 || depth < 1)
    throw TrainError("detector spec: all dims must be >= 1");
}

std::vector<Vec> ssm_scan(const diff::ParameterStore& p,
                          const std::string& pre, const std::vector<Vec>& u) {
  if (u.empty()) throw TrainError("ssm_scan: empty sequence");
  const auto& wd = p.at(pre + "Wd");
  const auto& bd = p.at(pre + "bd");
  const auto& wb = p.at(pre + "Wb");
  const auto& wc = p.at(pre + "Wc");
  const auto& a_raw = p.at(pre + "a_raw");
  const auto& d = p.at(pre + "D");
  int s = static_cast<int>(wd.rows());

  Vec a(s);
  for (int i = 0; i < s; ++i) a(i) = -softplus_scalar(a_raw(i, 0));

  std::vector<Vec> out;
  out.reserve(u.size());
  Vec h = Vec::Zero(s);
  for (const Vec& ut : u) {
    Vec delta = wd * ut + bd.col(0);
    for (int i = 0; i < s; ++i) delta(i) = softplus_scalar(delta(i));
    Vec abar = (delta.array() * a.array()).exp();
    Vec bbar = delta.cwiseProduct(wb * ut);
    h = abar.cwiseProduct(h) + bbar;
    double readout = (wc * ut).dot(h);
    Vec y = d.col(0).cwiseProduct(ut);
    y.array() += readout;
    out.push_back(std::move(y));
  }
  return out;
}

DetectorModel::DetectorModel(int feature_dim, SsmDetectorSpec spec,
                             std::uint64_t seed)
    : feature_dim_(feature_dim), spec_(spec) {
  spec_.validate();
  Rng rng(seed);
  int e = spec_.embed_dim, s = spec_.state_dim;
  auto randn = [&rng](int r, int c, double std) {
    diff::Mat m(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) m(i, j) = std * rng.normal();
    return m;
  };
  params_.tensors["emb.w"] = randn(e, 1, 1.0);
  params_.tensors["emb.b"] = diff::Mat::Zero(e, 1);
  params_.tensors["pos"] = randn(e, feature_dim_, 0.1);
  for (int b = 0; b < spec_.depth; ++b) {
    std::string pre = "blk" + std::to_string(b) + ".";
    double std_e = std::sqrt(1.0 / e);
    params_.tensors[pre + "Wd"] = randn(s, e, std_e);
    params_.tensors[pre + "bd"] = diff::Mat::Zero(s, 1);
    params_.tensors[pre + "Wb"] = randn(s, e, std_e);
    params_.tensors[pre + "Wc"] = randn(s, e, std_e);
    params_.tensors[pre + "a_raw"] = diff::Mat::Zero(s, 1);
    params_.tensors[pre + "D"] = diff::Mat::Ones(e, 1);
  }
  // zero head: every model starts at logit 0 (loss ln 2), which avoids the
  // saturated-sigmoid basins a random head can start in
  params_.tensors["head.w"] = diff::Mat::Zero(1, e);
  params_.tensors["head.b"] = diff::Mat::Zero(1, 1);
}

double DetectorModel::score_logit(const Vec& x) const {
  if (x.size() != feature_dim_)
    throw TrainError("detector: input length mismatch");
  const auto& ew = params_.at("emb.w");
  const auto& eb = params_.at("emb.b");
  const auto& pos = params_.at("pos");
  std::vector<Vec> seq;
  seq.reserve(feature_dim_);
  // the activation turns each embedding channel into a hinge function of the
  // scalar feature, giving the scan a piecewise-linear basis per position
  for (int t = 0; t < feature_dim_; ++t)
    seq.push_back(leaky(ew.col(0) * x(t) + eb.col(0) + pos.col(t)));
  for (int b = 0; b < spec_.depth; ++b) {
    std::vector<Vec> y =
        ssm_scan(params_, "blk" + std::to_string(b) + ".", seq);
    for (std::size_t t = 0; t < seq.size(); ++t) seq[t] += leaky(y[t]);
  }
  Vec pool = Vec::Zero(spec_.embed_dim);
  for (const Vec& v : seq) pool += v;
  pool /= static_cast<double>(seq.size());
  return (params_.at("head.w") * pool)(0, 0) + params_.at("head.b")(0, 0);
}

double DetectorModel::score(const Vec& x) const {
  // clamp away from {0,1} so log-score terms stay finite even when the raw
  // logit saturates the sigmoid in double precision
  constexpr double eps = 1e-12;
  return std::min(1.0 - eps, std::max(eps, sigmoid_scalar(score_logit(x))));
}

Eigen::VectorXd DetectorModel::score_batch_serial(
    const Eigen::MatrixXd& xs) const {
  Eigen::VectorXd out(xs.rows());
  for (int i = 0; i < xs.rows(); ++i) out(i) = score(xs.row(i).transpose());
  return out;
}

Eigen::VectorXd DetectorModel::score_batch(const Eigen::MatrixXd& xs) const {
  Eigen::VectorXd out(xs.rows());
  int n = static_cast<int>(xs.rows());
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) out(i) = score(xs.row(i).transpose());
  return out;
}

diff::Tape::Var DetectorModel::logit_tape(diff::Tape& t, diff::GradStore& g,
                                          diff::Tape::Var x) const {
  using V = diff::Tape::Var;
  using diff::Activation;
  std::vector<V> seq;
  seq.reserve(feature_dim_);
  for (int tt = 0; tt < feature_dim_; ++tt) {
    V xt = t.slice(x, tt, 1);
    V u = t.matvec(params_, g, "emb.w", xt);
    u = t.add(u, t.param_vec(params_, g, "emb.b"));
    u = t.add(u, t.matcol(params_, g, "pos", tt));
    seq.push_back(t.act(u, Activation::leaky_relu));
  }
  for (int b = 0; b < spec_.depth; ++b) {
    std::string pre = "blk" + std::to_string(b) + ".";
    V a = t.neg(t.softplus(t.param_vec(params_, g, pre + "a_raw")));
    V h = t.input(Vec::Zero(spec_.state_dim));
    V d = t.param_vec(params_, g, pre + "D");
    for (auto& u : seq) {
      V delta = t.softplus(t.add(t.matvec(params_, g, pre + "Wd", u),
                                 t.param_vec(params_, g, pre + "bd")));
      V abar = t.exp(t.mul(delta, a));
      V bbar = t.mul(delta, t.matvec(params_, g, pre + "Wb", u));
      h = t.add(t.mul(abar, h), bbar);
      V readout = t.dot(t.matvec(params_, g, pre + "Wc", u), h);
      V y = t.add_scalar(t.mul(d, u), readout);
      u = t.add(u, t.act(y, Activation::leaky_relu));
    }
  }
  V pool = seq[0];
  for (std::size_t i = 1; i < seq.size(); ++i) pool = t.add(pool, seq[i]);
  pool = t.scale(pool, 1.0 / static_cast<double>(seq.size()));
  return t.add(t.matvec(params_, g, "head.w", pool),
               t.param_vec(params_, g, "head.b"));
}

Vec DetectorModel::score_input_grad(const Vec& x) const {
  diff::GradStore g = diff::GradStore::zeros_like(params_);
  diff::Tape t;
  diff::Tape::Var xin = t.input(x, /*needs_grad=*/true);
  diff::Tape::Var logit = logit_tape(t, g, xin);
  // log score = log sigmoid(logit) = -softplus(-logit)
  diff::Tape::Var log_score = t.neg(t.softplus(t.neg(logit)));
  t.backward(log_score);
  return t.grad(xin);
}

DetectorTrainMetrics DetectorModel::train(const data::BalancedDataset& bal,
                                          int epochs, double lr, int batch_size,
                                          std::uint64_t seed) {
  return train_on(bal.dataset(), epochs, lr, batch_size, seed);
}

DetectorTrainMetrics DetectorModel::train_on(const data::Dataset& ds,
                                             int epochs, double lr,
                                             int batch_size,
                                             std::uint64_t seed) {
  if (ds.size() == 0) throw TrainError("train_detector: empty dataset");
  DetectorTrainMetrics metrics;
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
        diff::Tape::Var x = t.input(ds.row(idx));
        diff::Tape::Var logit = logit_tape(t, grads, x);
        double target = ds.label(idx) == 1 ? 1.0 : 0.0;
        total = t.add(total, t.bce_with_logit(logit, target));
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
      epoch_loss += loss_val;
      ++n_batches;
    }
    last_good = params_;
    metrics.epoch_loss.push_back(epoch_loss / n_batches);
  }
  return metrics;
}

} // namespace sh::detector
