#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "swifthydra/dataset.hpp"
#include "swifthydra/detector.hpp"
#include "swifthydra/diffcore.hpp"

namespace sh::mome {

using diff::Vec;

struct ClusterModel {
  Eigen::MatrixXd centroids; // U x P
  std::vector<int> assignment; // per training sample
  std::vector<int> sizes; // per cluster
  double sse = 0.0;

  int n_clusters() const { return static_cast<int>(centroids.rows()); }
  int nearest(const Vec& x) const;
};

ClusterModel kmeans(const Eigen::MatrixXd& data, int k, std::uint64_t seed,
                    int max_iter = 300);

// Elbow rule on a precomputed SSE curve (sse[0] = SSE at k=1): k of maximum
// discrete curvature among interior points, except k=1 wins when
// SSE(1) <= 1.05 * SSE(2).
int elbow_from_sse(const std::vector<double>& sse);

// Elbow selection over k in [1, k_max]; SSE(k) is the best of 3 seeds.
int elbow_select_k(const Eigen::MatrixXd& data, int k_max = 10,
                   std::uint64_t seed = 0);

// Eq.-style probabilistic expert-to-cluster assignment:
// P(u) = softmax over u of (c0 - (alpha / s_u) * n_u).
Eigen::VectorXd assignment_probs(const std::vector<int>& counts,
                                 const std::vector<int>& sizes, double alpha,
                                 double c0);

struct ExpertAssignment {
  std::vector<int> expert_cluster; // chosen cluster per expert
  std::vector<int> counts; // n_u after all draws
  double alpha = 1.0;
  double c0 = 1.0;
};

ExpertAssignment assign_experts(int n_experts, const ClusterModel& clusters,
                                double alpha, double c0, std::uint64_t seed);

// Gating scores h = G x (+ eps .* softplus(N x) when noise is active).
// Gate matrices are stored row-per-expert (M x P).
Eigen::VectorXd gate_scores(const Vec& x, const diff::Mat& gate_w,
                            const diff::Mat& noise_w, bool noise_active,
                            std::uint64_t seed);

// softmax over the k largest entries (ties broken by lower index), zeros
// elsewhere
Eigen::VectorXd topk_softmax(const Eigen::VectorXd& h, int k);
std::vector<int> topk_indices(const Eigen::VectorXd& h, int k);

struct MomeHyper {
  int n_experts = 20;
  int top_k = 2;
  double alpha_assign = 1.0;
  double c0_assign = 1.0;
  int k_range_max = 10;
  bool parallel_experts = false;
  int expert_embed_dim = 6;
  int expert_state_dim = 6;
  int expert_depth = 2;
  int expert_epochs = 100;
  double expert_lr = 1e-3;
  int gate_epochs = 50;
  double gate_lr = 1e-2;
  int batch_size = 64;
};

class MoMEModel {
public:
  MoMEModel() = default;

  int n_experts() const { return static_cast<int>(experts_.size()); }
  int top_k() const { return top_k_; }
  const ClusterModel& clusters() const { return clusters_; }
  const ExpertAssignment& assignment() const { return assignment_; }
  const std::vector<detector::DetectorModel>& experts() const {
    return experts_;
  }
  const diff::Mat& gate_weights() const { return gate_w_; }
  const diff::Mat& noise_weights() const { return noise_w_; }

  // reassemble a model from saved parts (checkpoint loading)
  static MoMEModel from_parts(std::vector<detector::DetectorModel> experts,
                              diff::Mat gate_w, diff::Mat noise_w, int top_k);

  // noise inactive at inference; eval_count (when given) receives the number
  // of expert evaluations performed
  double predict(const Vec& x, long* eval_count = nullptr) const;
  Eigen::VectorXd predict_batch(const Eigen::MatrixXd& xs) const;

  // routing distribution over experts for a dataset (noise off): fraction of
  // top-k routing slots landing on each expert
  Eigen::VectorXd routing_fractions(const Eigen::MatrixXd& xs) const;

  // Phase A: cluster, assign experts, train each expert on its cluster only.
  // Phase B: freeze experts, train the gate (noise active) end-to-end
  // through the top-k softmax.
  static MoMEModel train_two_phase(const data::Dataset& train,
                                   const MomeHyper& hyper, std::uint64_t seed);

  // Baseline exhibiting winner-take-all: gate and experts trained jointly
  // from scratch, experts updated only on the samples routed to them.
  static MoMEModel train_gate_first(const data::Dataset& train,
                                    const MomeHyper& hyper,
                                    std::uint64_t seed);

  friend class MoMETrainer;

private:
  std::vector<detector::DetectorModel> experts_;
  ClusterModel clusters_;
  ExpertAssignment assignment_;
  diff::Mat gate_w_; // M x P
  diff::Mat noise_w_; // M x P
  int top_k_ = 2;
};

} // namespace sh::mome
