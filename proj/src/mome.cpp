#include "swifthydra/mome.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "swifthydra/errors.hpp"
#include "swifthydra/rng.hpp"

namespace sh::mome {

int ClusterModel::nearest(const Vec& x) const {
  int best = 0;
  double best_d = (centroids.row(0).transpose() - x).squaredNorm();
  for (int u = 1; u < n_clusters(); ++u) {
    double d = (centroids.row(u).transpose() - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = u;
    }
  }
  return best;
}

ClusterModel kmeans(const Eigen::MatrixXd& data, int k, std::uint64_t seed,
                    int max_iter) {
  int n = static_cast<int>(data.rows());
  if (k < 1 || k > n) throw DataError("kmeans: k out of range");
  Rng rng(seed);

  // init: k distinct random rows
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = perm.size(); i > 1; --i) {
    std::size_t j = rng.uniform_int(i);
    std::swap(perm[i - 1], perm[j]);
  }
  ClusterModel m;
  m.centroids.resize(k, data.cols());
  for (int u = 0; u < k; ++u) m.centroids.row(u) = data.row(perm[u]);

  m.assignment.assign(n, -1);
  for (int iter = 0; iter < max_iter; ++iter) {
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      int a = m.nearest(data.row(i).transpose());
      if (a != m.assignment[i]) {
        m.assignment[i] = a;
        changed = true;
      }
    }
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, data.cols());
    std::vector<int> counts(k, 0);
    for (int i = 0; i < n; ++i) {
      sums.row(m.assignment[i]) += data.row(i);
      counts[m.assignment[i]] += 1;
    }
    for (int u = 0; u < k; ++u) {
      if (counts[u] == 0) {
        // re-seed from the farthest point
        int far = 0;
        double far_d = -1.0;
        for (int i = 0; i < n; ++i) {
          double d = (data.row(i) -
                      m.centroids.row(m.assignment[i]))
                         .squaredNorm();
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        m.centroids.row(u) = data.row(far);
        changed = true;
      } else {
        m.centroids.row(u) = sums.row(u) / counts[u];
      }
    }
    if (!changed) break;
  }
  m.sizes.assign(k, 0);
  m.sse = 0.0;
  for (int i = 0; i < n; ++i) {
    m.sizes[m.assignment[i]] += 1;
    m.sse += (data.row(i) - m.centroids.row(m.assignment[i])).squaredNorm();
  }
  return m;
}

int elbow_select_k(const Eigen::MatrixXd& data, int k_max, std::uint64_t seed) {
  int n = static_cast<int>(data.rows());
  if (n == 0) throw DataError("elbow_select_k: empty data");
  k_max = std::min(k_max, n);
  std::vector<double> sse(k_max);
  for (int k = 1; k <= k_max; ++k) {
    double best = std::numeric_limits<double>::infinity();
    for (int trial = 0; trial < 3; ++trial) {
      ClusterModel m = kmeans(data, k, seed + 7919 * k + trial);
      best = std::min(best, m.sse);
    }
    sse[k - 1] = best;
  }
  if (k_max >= 2 && sse[1] > 0.0) {
    // One-cluster gate, calibrated against a null reference: splitting any
    // single Gaussian already cuts the SSE by roughly a third, so the raw
    // SSE(1)/SSE(2) ratio cannot distinguish "one blob" from "two blobs"
    // on its own. Sample same-size datasets from a Gaussian fitted to the
    // data (mean + full covariance) and measure what ratio a structureless
    // cloud produces; declare one cluster when the real ratio is within
    // 1.05x of that null ratio.
    Eigen::RowVectorXd mean = data.colwise().mean();
    Eigen::MatrixXd centered = data.rowwise() - mean;
    Eigen::MatrixXd cov =
        centered.adjoint() * centered / std::max(1, n - 1);
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    Eigen::MatrixXd chol;
    if (llt.info() == Eigen::Success) {
      chol = llt.matrixL();
    } else {
      chol = cov.diagonal().cwiseMax(0.0).cwiseSqrt().asDiagonal();
    }
    std::vector<double> null_ratios;
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    for (int rep = 0; rep < 3; ++rep) {
      Eigen::MatrixXd ref(n, data.cols());
      for (int i = 0; i < n; ++i) {
        Eigen::VectorXd z(data.cols());
        for (int j = 0; j < data.cols(); ++j) z(j) = rng.normal();
        ref.row(i) = mean + (chol * z).transpose();
      }
      double s1 = std::numeric_limits<double>::infinity();
      double s2 = std::numeric_limits<double>::infinity();
      for (int trial = 0; trial < 3; ++trial) {
        s1 = std::min(s1, kmeans(ref, 1, rng.next_u64()).sse);
        s2 = std::min(s2, kmeans(ref, 2, rng.next_u64()).sse);
      }
      if (s2 > 0.0) null_ratios.push_back(s1 / s2);
    }
    if (!null_ratios.empty()) {
      std::nth_element(null_ratios.begin(),
                       null_ratios.begin() + null_ratios.size() / 2,
                       null_ratios.end());
      double null_ratio = null_ratios[null_ratios.size() / 2];
      if (sse[0] <= 1.05 * sse[1] * null_ratio) return 1;
    }
  }
  return elbow_from_sse(sse);
}

int elbow_from_sse(const std::vector<double>& sse) {
  int k_max = static_cast<int>(sse.size());
  if (k_max == 0) throw DataError("elbow_from_sse: empty curve");
  if (k_max == 1) return 1;
  if (sse[0] <= 1.05 * sse[1]) return 1;
  int best_k = 2;
  double best_curv = -std::numeric_limits<double>::infinity();
  for (int k = 2; k <= k_max - 1; ++k) {
    double curv = sse[k - 2] - 2.0 * sse[k - 1] + sse[k];
    if (curv > best_curv) {
      best_curv = curv;
      best_k = k;
    }
  }
  return best_k;
}

Eigen::VectorXd assignment_probs(const std::vector<int>& counts,
                                 const std::vector<int>& sizes, double alpha,
                                 double c0) {
  int u_count = static_cast<int>(sizes.size());
  Eigen::VectorXd logits(u_count);
  for (int u = 0; u < u_count; ++u) {
    if (sizes[u] <= 0) throw DataError("assignment_probs: cluster size <= 0");
    logits(u) = c0 - (alpha / sizes[u]) * counts[u];
  }
  double m = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - m).exp();
  return e / e.sum();
}

ExpertAssignment assign_experts(int n_experts, const ClusterModel& clusters,
                                double alpha, double c0, std::uint64_t seed) {
  if (n_experts < 1) throw DataError("assign_experts: M must be >= 1");
  Rng rng(seed);
  ExpertAssignment a;
  a.alpha = alpha;
  a.c0 = c0;
  a.counts.assign(clusters.n_clusters(), 0);
  for (int m = 0; m < n_experts; ++m) {
    Eigen::VectorXd p = assignment_probs(a.counts, clusters.sizes, alpha, c0);
    double r = rng.uniform();
    double acc = 0.0;
    int chosen = clusters.n_clusters() - 1;
    for (int u = 0; u < p.size(); ++u) {
      acc += p(u);
      if (r < acc) {
        chosen = u;
        break;
      }
    }
    a.expert_cluster.push_back(chosen);
    a.counts[chosen] += 1;
  }
  return a;
}

Eigen::VectorXd gate_scores(const Vec& x, const diff::Mat& gate_w,
                            const diff::Mat& noise_w, bool noise_active,
                            std::uint64_t seed) {
  if (x.size() != gate_w.cols()) throw DataError("gate_scores: dim mismatch");
  Eigen::VectorXd h = gate_w * x;
  if (noise_active) {
    Rng rng(seed);
    Eigen::VectorXd noise_mag = noise_w * x;
    for (int m = 0; m < h.size(); ++m) {
      double sp = noise_mag(m) > 30.0 ? noise_mag(m)
                                      : std::log1p(std::exp(noise_mag(m)));
      h(m) += rng.normal() * sp;
    }
  }
  return h;
}

std::vector<int> topk_indices(const Eigen::VectorXd& h, int k) {
  int m = static_cast<int>(h.size());
  if (k < 1 || k > m) throw DataError("topk: k out of range");
  std::vector<int> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  // stable sort by descending value; lower index wins ties
  std::stable_sort(idx.begin(), idx.end(),
                   [&h](int a, int b) { return h(a) > h(b); });
  idx.resize(k);
  return idx;
}

Eigen::VectorXd topk_softmax(const Eigen::VectorXd& h, int k) {
  auto idx = topk_indices(h, k);
  double mx = -std::numeric_limits<double>::infinity();
  for (int i : idx) mx = std::max(mx, h(i));
  double denom = 0.0;
  for (int i : idx) denom += std::exp(h(i) - mx);
  Eigen::VectorXd lambda = Eigen::VectorXd::Zero(h.size());
  for (int i : idx) lambda(i) = std::exp(h(i) - mx) / denom;
  return lambda;
}

double MoMEModel::predict(const Vec& x, long* eval_count) const {
  Eigen::VectorXd h = gate_w_ * x;
  auto idx = topk_indices(h, top_k_);
  double mx = -std::numeric_limits<double>::infinity();
  for (int i : idx) mx = std::max(mx, h(i));
  double denom = 0.0;
  for (int i : idx) denom += std::exp(h(i) - mx);
  double out = 0.0;
  for (int i : idx) {
    double lam = std::exp(h(i) - mx) / denom;
    out += lam * experts_[i].score(x);
    if (eval_count) ++*eval_count;
  }
  return out;
}

Eigen::VectorXd MoMEModel::predict_batch(const Eigen::MatrixXd& xs) const {
  Eigen::VectorXd out(xs.rows());
  int n = static_cast<int>(xs.rows());
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) out(i) = predict(xs.row(i).transpose());
  return out;
}

Eigen::VectorXd MoMEModel::routing_fractions(const Eigen::MatrixXd& xs) const {
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(n_experts());
  for (int i = 0; i < xs.rows(); ++i) {
    Eigen::VectorXd h = gate_w_ * xs.row(i).transpose();
    for (int m : topk_indices(h, top_k_)) counts(m) += 1.0;
  }
  return counts / counts.sum();
}

namespace {

// BCE gate loss for one sample through the top-k softmax; expert scores are
// constants (frozen experts).
void gate_step_batch(diff::ParameterStore& gate_params,
                     diff::GradStore& grads, diff::OptimizerState& opt,
                     const Eigen::MatrixXd& feats,
                     const Eigen::MatrixXd& expert_scores,
                     const std::vector<int>& batch_idx,
                     const std::vector<int>& labels, int top_k,
                     Rng& noise_rng) {
  grads.zero();
  diff::Tape t;
  diff::Tape::Var total = t.constant(0.0);
  int m_experts = static_cast<int>(expert_scores.cols());
  for (int idx : batch_idx) {
    Vec x = feats.row(idx).transpose();
    diff::Tape::Var xin = t.input(x);
    diff::Tape::Var hg = t.matvec(gate_params, grads, "gate.w", xin);
    diff::Tape::Var sp =
        t.softplus(t.matvec(gate_params, grads, "gate.n", xin));
    Vec eps(m_experts);
    for (int m = 0; m < m_experts; ++m) eps(m) = noise_rng.normal();
    diff::Tape::Var h = t.add(hg, t.mul(sp, t.input(eps)));
    auto top = topk_indices(t.val(h), top_k);
    diff::Tape::Var hk = t.gather(h, top);
    diff::Tape::Var lambda = t.softmax(hk);
    Vec fvals(top.size());
    for (std::size_t j = 0; j < top.size(); ++j)
      fvals(j) = expert_scores(idx, top[j]);
    diff::Tape::Var f = t.dot(lambda, t.input(fvals));
    double target = labels[idx] == 1 ? 1.0 : 0.0;
    // F is a convex combination of values in (0,1), so logs are safe
    diff::Tape::Var loss = t.neg(
        t.add(t.scale(t.log(f), target),
              t.scale(t.log(t.sub(t.constant(1.0), f)), 1.0 - target)));
    total = t.add(total, loss);
  }
  total = t.scale(total, 1.0 / static_cast<double>(batch_idx.size()));
  t.backward(total);
  diff::adam_step(gate_params, grads, opt);
}

} // namespace

MoMEModel MoMEModel::train_two_phase(const data::Dataset& train,
                                     const MomeHyper& hyper,
                                     std::uint64_t seed) {
  if (train.size() == 0) throw TrainError("train_mome: empty data");
  MoMEModel model;
  model.top_k_ = std::min(hyper.top_k, hyper.n_experts);
  Rng rng(seed);

  // phase A: cluster on features (both classes), probabilistic assignment,
  // per-expert training restricted to its cluster
  int u = elbow_select_k(train.features(), hyper.k_range_max, rng.next_u64());
  model.clusters_ = kmeans(train.features(), u, rng.next_u64());
  model.assignment_ = assign_experts(hyper.n_experts, model.clusters_,
                                     hyper.alpha_assign, hyper.c0_assign,
                                     rng.next_u64());

  detector::SsmDetectorSpec espec;
  espec.embed_dim = hyper.expert_embed_dim;
  espec.state_dim = hyper.expert_state_dim;
  espec.depth = hyper.expert_depth;

  std::vector<std::uint64_t> expert_seeds(hyper.n_experts);
  for (int m = 0; m < hyper.n_experts; ++m) expert_seeds[m] = rng.next_u64();

  std::vector<std::vector<int>> cluster_members(u);
  for (int i = 0; i < train.size(); ++i)
    cluster_members[model.clusters_.assignment[i]].push_back(i);

  model.experts_.resize(hyper.n_experts);
  int m_total = hyper.n_experts;
#pragma omp parallel for schedule(dynamic) if (hyper.parallel_experts)
  for (int m = 0; m < m_total; ++m) {
    Rng err(expert_seeds[m]);
    detector::DetectorModel expert(train.feature_dim(), espec, err.next_u64());
    const auto& members = cluster_members[model.assignment_.expert_cluster[m]];
    if (!members.empty()) {
      data::Dataset slice = train.subset(members);
      expert.train_on(slice, hyper.expert_epochs, hyper.expert_lr,
                      hyper.batch_size, err.next_u64());
    }
    model.experts_[m] = std::move(expert);
  }

  // phase B: freeze experts, train the gate with noise active. Gate rows
  // start at the owning cluster's centroid so initial routing follows the
  // phase-A structure (the gate is linear in x, so this is the closest
  // expressible form of nearest-centroid routing); small noise breaks ties
  // between experts sharing a cluster.
  std::uint64_t gate_seed = rng.next_u64();
  Rng grng(gate_seed);
  model.gate_w_ = diff::Mat::Zero(hyper.n_experts, train.feature_dim());
  model.noise_w_ = diff::Mat::Zero(hyper.n_experts, train.feature_dim());
  for (int m = 0; m < hyper.n_experts; ++m) {
    model.gate_w_.row(m) =
        model.clusters_.centroids.row(model.assignment_.expert_cluster[m]);
    for (int j = 0; j < model.gate_w_.cols(); ++j)
      model.gate_w_(m, j) += 0.01 * grng.normal();
  }

  Eigen::MatrixXd expert_scores(train.size(), hyper.n_experts);
  for (int m = 0; m < hyper.n_experts; ++m)
    expert_scores.col(m) = model.experts_[m].score_batch(train.features());

  diff::ParameterStore gate_params;
  gate_params.tensors["gate.w"] = model.gate_w_;
  gate_params.tensors["gate.n"] = model.noise_w_;
  diff::GradStore grads = diff::GradStore::zeros_like(gate_params);
  diff::OptimizerState opt =
      diff::OptimizerState::for_params(gate_params, hyper.gate_lr);

  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < hyper.gate_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::size_t j = grng.uniform_int(i);
      std::swap(order[i - 1], order[j]);
    }
    for (int start = 0; start < train.size(); start += hyper.batch_size) {
      int bs = std::min(hyper.batch_size, train.size() - start);
      std::vector<int> batch(order.begin() + start,
                             order.begin() + start + bs);
      gate_step_batch(gate_params, grads, opt, train.features(), expert_scores,
                      batch, train.labels(), model.top_k_, grng);
    }
  }
  model.gate_w_ = gate_params.at("gate.w");
  model.noise_w_ = gate_params.at("gate.n");
  return model;
}

MoMEModel MoMEModel::train_gate_first(const data::Dataset& train,
                                      const MomeHyper& hyper,
                                      std::uint64_t seed) {
  if (train.size() == 0) throw TrainError("train_mome: empty data");
  MoMEModel model;
  model.top_k_ = std::min(hyper.top_k, hyper.n_experts);
  Rng rng(seed);

  detector::SsmDetectorSpec espec;
  espec.embed_dim = hyper.expert_embed_dim;
  espec.state_dim = hyper.expert_state_dim;
  espec.depth = hyper.expert_depth;

  model.experts_.clear();
  std::vector<diff::OptimizerState> expert_opts;
  std::vector<diff::GradStore> expert_grads;
  for (int m = 0; m < hyper.n_experts; ++m) {
    model.experts_.emplace_back(train.feature_dim(), espec, rng.next_u64());
    expert_opts.push_back(diff::OptimizerState::for_params(
        model.experts_[m].params(), hyper.expert_lr));
    expert_grads.push_back(
        diff::GradStore::zeros_like(model.experts_[m].params()));
  }

  model.gate_w_ = diff::Mat::Zero(hyper.n_experts, train.feature_dim());
  model.noise_w_ = diff::Mat::Zero(hyper.n_experts, train.feature_dim());
  for (int i = 0; i < model.gate_w_.rows(); ++i)
    for (int j = 0; j < model.gate_w_.cols(); ++j)
      model.gate_w_(i, j) = 0.1 * rng.normal();

  diff::ParameterStore gate_params;
  gate_params.tensors["gate.w"] = model.gate_w_;
  gate_params.tensors["gate.n"] = model.noise_w_;
  diff::GradStore ggrads = diff::GradStore::zeros_like(gate_params);
  diff::OptimizerState gopt =
      diff::OptimizerState::for_params(gate_params, hyper.gate_lr);

  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  int epochs = hyper.expert_epochs; // joint budget
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::size_t j = rng.uniform_int(i);
      std::swap(order[i - 1], order[j]);
    }
    for (int start = 0; start < train.size(); start += hyper.batch_size) {
      int bs = std::min(hyper.batch_size, train.size() - start);
      ggrads.zero();
      for (auto& g : expert_grads) g.zero();
      diff::Tape t;
      diff::Tape::Var total = t.constant(0.0);
      std::vector<bool> expert_touched(hyper.n_experts, false);
      for (int k = 0; k < bs; ++k) {
        int idx = order[start + k];
        Vec x = train.features().row(idx).transpose();
        diff::Tape::Var xin = t.input(x);
        diff::Tape::Var hg = t.matvec(gate_params, ggrads, "gate.w", xin);
        diff::Tape::Var sp =
            t.softplus(t.matvec(gate_params, ggrads, "gate.n", xin));
        Vec eps(hyper.n_experts);
        for (int m = 0; m < hyper.n_experts; ++m) eps(m) = rng.normal();
        diff::Tape::Var h = t.add(hg, t.mul(sp, t.input(eps)));
        auto top = topk_indices(t.val(h), model.top_k_);
        diff::Tape::Var hk = t.gather(h, top);
        diff::Tape::Var lambda = t.softmax(hk);
        // expert outputs on the tape so routed experts also learn
        diff::Tape::Var f = t.constant(0.0);
        for (std::size_t j = 0; j < top.size(); ++j) {
          int m = top[j];
          expert_touched[m] = true;
          diff::Tape::Var logit =
              model.experts_[m].logit_tape(t, expert_grads[m], xin);
          diff::Tape::Var s = t.sigmoid(logit);
          f = t.add(f, t.mul(t.slice(lambda, static_cast<int>(j), 1), s));
        }
        double target = train.label(idx) == 1 ? 1.0 : 0.0;
        diff::Tape::Var loss = t.neg(
            t.add(t.scale(t.log(f), target),
                  t.scale(t.log(t.sub(t.constant(1.0), f)), 1.0 - target)));
        total = t.add(total, loss);
      }
      total = t.scale(total, 1.0 / bs);
      t.backward(total);
      diff::adam_step(gate_params, ggrads, gopt);
      for (int m = 0; m < hyper.n_experts; ++m) {
        if (expert_touched[m])
          diff::adam_step(model.experts_[m].params(), expert_grads[m],
                          expert_opts[m]);
      }
    }
  }
  model.gate_w_ = gate_params.at("gate.w");
  model.noise_w_ = gate_params.at("gate.n");
  // no cluster structure in this baseline
  model.clusters_.centroids = Eigen::MatrixXd::Zero(1, train.feature_dim());
  model.clusters_.sizes = {train.size()};
  model.clusters_.assignment.assign(train.size(), 0);
  model.assignment_.expert_cluster.assign(hyper.n_experts, 0);
  model.assignment_.counts = {hyper.n_experts};
  return model;
}

MoMEModel MoMEModel::from_parts(std::vector<detector::DetectorModel> experts,
                                diff::Mat gate_w, diff::Mat noise_w,
                                int top_k) {
  MoMEModel model;
  model.experts_ = std::move(experts);
  model.gate_w_ = std::move(gate_w);
  model.noise_w_ = std::move(noise_w);
  model.top_k_ = top_k;
  const int m = model.n_experts();
  model.clusters_.centroids =
      Eigen::MatrixXd::Zero(1, model.gate_w_.cols());
  model.clusters_.sizes = {0};
  model.assignment_.expert_cluster.assign(m, 0);
  model.assignment_.counts = {m};
  return model;
}

} // namespace sh::mome
