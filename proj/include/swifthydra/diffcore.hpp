#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "swifthydra/rng.hpp"

namespace sh::diff {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class Activation { identity, relu, leaky_relu, softplus, sigmoid, tanh };

Activation activation_from_string(const std::string& s);

// Named real tensors. Biases are stored as n x 1 matrices.
struct ParameterStore {
  std::map<std::string, Mat> tensors;
  std::uint64_t version = 0;

  Mat& at(const std::string& name);
  const Mat& at(const std::string& name) const;
  long parameter_count() const;
};

// Gradient accumulator mirroring a ParameterStore's shapes.
struct GradStore {
  std::map<std::string, Mat> grads;

  static GradStore zeros_like(const ParameterStore& p);
  void zero();
  Mat& at(const std::string& name) { return grads.at(name); }
};

struct OptimizerState {
  std::map<std::string, Mat> m, v;
  long step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static OptimizerState for_params(const ParameterStore& p, double lr);
};

// Bias-corrected Adam update in place.
void adam_step(ParameterStore& params, const GradStore& grads,
               OptimizerState& state);

// Scale the matrix so its largest singular value does not exceed cap;
// identity when already within the cap. Power iteration to rel tol 1e-6.
Mat project_spectral(const Mat& weights, double cap);
double spectral_norm_power_iteration(const Mat& w, double rel_tol = 1e-6,
                                     int max_iter = 1000);

// Reverse-mode tape over vector-valued nodes. Matrix parameters enter as
// leaves whose gradients accumulate into an external GradStore.
class Tape {
public:
  struct Var {
    int id = -1;
  };

  // leaf holding a constant or differentiable input
  Var input(const Vec& v, bool needs_grad = false);
  Var constant(double v) { return input(Vec::Constant(1, v)); }

  // vector parameter leaf (n x 1 tensor in the store)
  Var param_vec(ParameterStore& p, GradStore& g, const std::string& name);

  // one column of a matrix parameter as a vector leaf
  Var matcol(ParameterStore& p, GradStore& g, const std::string& name, int col);

  // y = W x for a matrix parameter W
  Var matvec(ParameterStore& p, GradStore& g, const std::string& name, Var x);
  // y = W^T x
  Var matvec_t(ParameterStore& p, GradStore& g, const std::string& name, Var x);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b); // elementwise
  Var scale(Var a, double c);
  Var add_scalar(Var a, Var s); // broadcast length-1 s onto a
  Var neg(Var a) { return scale(a, -1.0); }

  Var act(Var a, Activation f);
  Var exp(Var a);
  Var log(Var a); // caller guarantees positivity
  Var softplus(Var a) { return act(a, Activation::softplus); }
  Var sigmoid(Var a) { return act(a, Activation::sigmoid); }

  Var concat(Var a, Var b);
  Var slice(Var a, int start, int len);
  Var gather(Var a, const std::vector<int>& idx);

  Var dot(Var a, Var b); // length-1 result
  Var sum(Var a);
  Var mean(Var a);
  Var softmax(Var a);

  // mean of (a - b)^2, length-1 result
  Var mse(Var a, Var b);
  // numerically stable binary cross entropy from a length-1 logit;
  // target in {0,1}
  Var bce_with_logit(Var logit, double target);

  const Vec& val(Var v) const { return nodes_[v.id].val; }
  int len(Var v) const { return static_cast<int>(nodes_[v.id].val.size()); }

  // seed d(out)/d(out) = 1 (out must be length-1) and run the reverse sweep
  void backward(Var out);
  const Vec& grad(Var v) const { return nodes_[v.id].grad; }

  std::size_t node_count() const { return nodes_.size(); }

private:
  struct Node {
    Vec val;
    Vec grad;
    bool needs_grad = false;
    std::function<void(Tape&)> back; // empty for leaves
  };

  int push(Vec val, bool needs_grad, std::function<void(Tape&)> back);
  Node& node(int id) { return nodes_[id]; }

  std::vector<Node> nodes_;
};

// Feed-forward network description shared by all learned components.
struct NetworkSpec {
  std::vector<int> sizes; // sizes[0] = input dim
  std::vector<Activation> acts; // one per layer (sizes.size() - 1 entries)
  std::vector<double> spectral_cap; // 0 = uncapped; per layer

  int n_layers() const { return static_cast<int>(sizes.size()) - 1; }
  void validate() const;
};

// He-style random init; weights named "<prefix>W<i>", biases "<prefix>b<i>".
void init_mlp(ParameterStore& p, const NetworkSpec& spec,
              const std::string& prefix, Rng& rng, double scale = 1.0);

// Semi-orthogonal init (every singular value 1); the right starting point
// for spectral-capped layers, which would otherwise begin as contractions.
void init_mlp_orthogonal(ParameterStore& p, const NetworkSpec& spec,
                         const std::string& prefix, Rng& rng);

// Plain evaluation; throws TrainError naming the layer on non-finite values.
Vec mlp_forward(const ParameterStore& p, const NetworkSpec& spec,
                const std::string& prefix, const Vec& input);

Tape::Var mlp_forward_tape(Tape& t, ParameterStore& p, GradStore& g,
                           const NetworkSpec& spec, const std::string& prefix,
                           Tape::Var input);

// Apply project_spectral to every capped layer of the network.
void apply_spectral_caps(ParameterStore& p, const NetworkSpec& spec,
                         const std::string& prefix);

// Checkpoint format: magic "SWHY1", tensor count, then per tensor a manifest
// entry (name, rows, cols, dtype "f64") followed by raw little-endian values.
void save_checkpoint(const ParameterStore& p, const std::string& path);
ParameterStore load_checkpoint(const std::string& path);

} // namespace sh::diff
