#include "swifthydra/diffcore.hpp"

#include <Eigen/QR>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "swifthydra/errors.hpp"

namespace sh::diff {

Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "leaky_relu") return Activation::leaky_relu;
  if (s == "softplus") return Activation::softplus;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "tanh") return Activation::tanh;
  throw UsageError("unknown activation: " + s);
}

Mat& ParameterStore::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw TrainError("missing parameter: " + name);
  return it->second;
}

const Mat& ParameterStore::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw TrainError("missing parameter: " + name);
  return it->second;
}

long ParameterStore::parameter_count() const {
  long n = 0;
  for (const auto& [k, v] : tensors) n += static_cast<long>(v.size());
  return n;
}

GradStore GradStore::zeros_like(const ParameterStore& p) {
  GradStore g;
  for (const auto& [k, v] : p.tensors) g.grads[k] = Mat::Zero(v.rows(), v.cols());
  return g;
}

void GradStore::zero() {
  for (auto& [k, v] : grads) v.setZero();
}

OptimizerState OptimizerState::for_params(const ParameterStore& p, double lr) {
  OptimizerState s;
  s.lr = lr;
  for (const auto& [k, v] : p.tensors) {
    s.m[k] = Mat::Zero(v.rows(), v.cols());
    s.v[k] = Mat::Zero(v.rows(), v.cols());
  }
  return s;
}

void adam_step(ParameterStore& params, const GradStore& grads,
               OptimizerState& state) {
  state.step += 1;
  double b1t = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  double b2t = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (auto& [name, w] : params.tensors) {
    const Mat& g = grads.grads.at(name);
    Mat& m = state.m.at(name);
    Mat& v = state.v.at(name);
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v.array().matrix() +
        (1.0 - state.beta2) * g.array().square().matrix();
    Mat mhat = m / b1t;
    Mat vhat = v / b2t;
    w.array() -= state.lr * mhat.array() / (vhat.array().sqrt() + state.eps);
  }
  params.version += 1;
}

double spectral_norm_power_iteration(const Mat& w, double rel_tol,
                                     int max_iter) {
  if (w.size() == 0) return 0.0;
  Mat wtw = w.transpose() * w;
  Vec v = Vec::Ones(w.cols()).normalized();
  double prev = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    Vec u = wtw * v;
    double norm = u.norm();
    if (norm == 0.0) return 0.0;
    v = u / norm;
    double sigma = std::sqrt(norm);
    if (it > 0 && std::abs(sigma - prev) <= rel_tol * sigma) return sigma;
    prev = sigma;
  }
  return prev;
}

Mat project_spectral(const Mat& weights, double cap) {
  if (!(cap > 0.0 && cap <= 1.0))
    throw TrainError("spectral cap must be in (0,1]");
  double sigma = spectral_norm_power_iteration(weights);
  if (sigma <= cap) return weights;
  return weights * (cap / sigma);
}

// ---------------------------------------------------------------------------
// Tape

int Tape::push(Vec val, bool needs_grad, std::function<void(Tape&)> back) {
  Node n;
  n.val = std::move(val);
  n.needs_grad = needs_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tape::Var Tape::input(const Vec& v, bool needs_grad) {
  return {push(v, needs_grad, nullptr)};
}

Tape::Var Tape::param_vec(ParameterStore& p, GradStore& g,
                          const std::string& name) {
  const Mat& m = p.at(name);
  Mat* gs = &g.at(name);
  int id = push(m.col(0), true, nullptr);
  nodes_[id].back = [id, gs](Tape& t) { gs->col(0) += t.nodes_[id].grad; };
  return {id};
}

Tape::Var Tape::matcol(ParameterStore& p, GradStore& g, const std::string& name,
                       int col) {
  const Mat& m = p.at(name);
  Mat* gs = &g.at(name);
  int id = push(m.col(col), true, nullptr);
  nodes_[id].back = [id, gs, col](Tape& t) {
    gs->col(col) += t.nodes_[id].grad;
  };
  return {id};
}

Tape::Var Tape::matvec(ParameterStore& p, GradStore& g, const std::string& name,
                       Var x) {
  const Mat& w = p.at(name);
  Mat* gs = &g.at(name);
  const Mat* wp = &w;
  Vec y = w * nodes_[x.id].val;
  int xid = x.id;
  bool ng = nodes_[x.id].needs_grad;
  int id = push(std::move(y), true, nullptr);
  nodes_[id].back = [id, xid, gs, wp, ng](Tape& t) {
    const Vec& gy = t.nodes_[id].grad;
    *gs += gy * t.nodes_[xid].val.transpose();
    if (ng) t.nodes_[xid].grad += wp->transpose() * gy;
  };
  return {id};
}

Tape::Var Tape::matvec_t(ParameterStore& p, GradStore& g,
                         const std::string& name, Var x) {
  const Mat& w = p.at(name);
  Mat* gs = &g.at(name);
  const Mat* wp = &w;
  Vec y = w.transpose() * nodes_[x.id].val;
  int xid = x.id;
  bool ng = nodes_[x.id].needs_grad;
  int id = push(std::move(y), true, nullptr);
  nodes_[id].back = [id, xid, gs, wp, ng](Tape& t) {
    const Vec& gy = t.nodes_[id].grad;
    *gs += t.nodes_[xid].val * gy.transpose();
    if (ng) t.nodes_[xid].grad += (*wp) * gy;
  };
  return {id};
}

Tape::Var Tape::add(Var a, Var b) {
  int ia = a.id, ib = b.id;
  bool ng = nodes_[ia].needs_grad || nodes_[ib].needs_grad;
  int id = push(nodes_[ia].val + nodes_[ib].val, ng, nullptr);
  if (ng) {
    nodes_[id].back = [id, ia, ib](Tape& t) {
      if (t.nodes_[ia].needs_grad) t.nodes_[ia].grad += t.nodes_[id].grad;
      if (t.nodes_[ib].needs_grad) t.nodes_[ib].grad += t.nodes_[id].grad;
    };
  }
  return {id};
}

Tape::Var Tape::sub(Var a, Var b) {
  int ia = a.id, ib = b.id;
  bool ng = nodes_[ia].needs_grad || nodes_[ib].needs_grad;
  int id = push(nodes_[ia].val - nodes_[ib].val, ng, nullptr);
  if (ng) {
    nodes_[id].back = [id, ia, ib](Tape& t) {
      if (t.nodes_[ia].needs_grad) t.nodes_[ia].grad += t.nodes_[id].grad;
      if (t.nodes_[ib].needs_grad) t.nodes_[ib].grad -= t.nodes_[id].grad;
    };
  }
  return {id};
}

Tape::Var Tape::mul(Var a, Var b) {
  int ia = a.id, ib = b.id;
  bool ng = nodes_[ia].needs_grad || nodes_[ib].needs_grad;
  int id = push(nodes_[ia].val.cwiseProduct(nodes_[ib].val), ng, nullptr);
  if (ng) {
    nodes_[id].back = [id, ia, ib](Tape& t) {
      const Vec& gy = t.nodes_[id].grad;
      if (t.nodes_[ia].needs_grad)
        t.nodes_[ia].grad += gy.cwiseProduct(t.nodes_[ib].val);
      if (t.nodes_[ib].needs_grad)
        t.nodes_[ib].grad += gy.cwiseProduct(t.nodes_[ia].val);
    };
  }
  return {id};
}

Tape::Var Tape::scale(Var a, double c) {
  int ia = a.id;
  bool ng = nodes_[ia].needs_grad;
  int id = push(nodes_[ia].val * c, ng, nullptr);
  if (ng) {
    nodes_[id].back = [id, ia, c](Tape& t) {
      t.nodes_[ia].grad += c * t.nodes_[id].grad;
    };
  }
  return {id};
}

Tape::Var Tape::add_scalar(Var a, Var s) {
  int ia = a.id, is = s.id;
  bool ng = nodes_[ia].needs_grad || nodes_[is].needs_grad;
  Vec v = nodes_[ia].val.array() + nodes_[is].val(0);
  int id = push(std::move(v), ng, nullptr);
  if (ng) {
    nodes_[id].back = [id, ia, is](Tape& t) {
      const Vec& gy = t.nodes_[id].grad;
      if (t.nodes_[ia].needs_grad) t.nodes_[ia].grad += gy;
      if (t.nodes_[is].needs_grad) t.nodes_[is].grad(0) += gy.sum();
    };
  }
  return {id};
}

namespace {

inline double softplus_scalar(double x) {
  // stable: log(1 + e^x)
  return x > 30.0 ? x : std::log1p(std::exp(x));
}

inline double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace

Tape::Var Tape::act(Var a, Activation f) {
  int ia = a.id;
  bool ng = nodes_[ia].needs_grad;
  const Vec& x = nodes_[ia].val;
  Vec y(x.size());
  switch (f) {
    case Activation::identity: y = x; break;
    case Activation::relu: y = x.cwiseMax(0.0); break;
    case Activation::leaky_relu:
      y = x.array().max(0.0) + 0.01 * x.array().min(0.0);
      break;
    case Activation::softplus:
      for (int i = 0; i < x.size(); ++i) y(i) = softplus_scalar(x(i));
      break;
    case Activation::sigmoid:
      for (int i = 0; i < x.size(); ++i) y(i) = sigmoid_scalar(x(i));
      break;
    case Activation::tanh: y = x.array().tanh(); break;
  }
  int id = push(std::move(y), ng, nullptr);
  if (ng) {
    nodes_[id].back = [id, ia, f](Tape& t) {
      const Vec& x2 = t.nodes_[ia].val;
      const Vec& y2 = t.nodes_[id].val;
      const Vec& gy = t.nodes_[id].grad;
      Vec d(x2.size());
      switch (f) {
        case Activation::identity: d.setOnes(); break;
        case Activation::relu:
          d = (x2.array() > 0.0).cast<double>();
          break;
        case Activation::leaky_relu:
          d = (x2.array() > 0.0).select(Vec::Ones(x2.size()),
                                        Vec::Constant(x2.size(), 0.01));
          break;
        case Activation::softplus:
          for (int i = 0; i < x2.size(); ++i) d(i) = sigmoid_scalar(x2(i));
          break;
        case Activation::sigmoid:
          d = y2.array() * (1.0 - y2.array());
          break;
        case Activation::tanh: d = 1.0 - y2.array().square(); break;
      }
      t.nodes_[ia].grad += gy.cwiseProduct(d);
    };
  }
  return {id};
}

Tape::Var Tape::exp(Var a) {
  int ia = a.id;
  bool ng = nodes_[ia].needs_grad;
  int id = push(nodes_[ia].val.array().exp(), ng, nullptr);
  if (ng) {
    nodes_[id].back = [id, ia](Tape& t) {
      t.nodes_[ia].grad += t.nodes_[id].grad.cwiseProduct(t.nodes_[id].val);
    };
  }
  return {id};
}

Tape::Var Tape::log(Var a) {
  int ia = a.id;
  bool ng = nodes_[ia].needs_grad;
  int id = push(nodes_[ia].val.array().log(), ng, nullptr);
  if (ng) {
    nodes_[id].back = [id, ia](Tape& t) {
      t.nodes_[ia].grad +=
          t.nodes_[id].grad.cwiseQuotient(t.nodes_[ia].val);
    };
  }
  return {id};
}

Tape::Var Tape::concat(Var a, Var b) {
  int ia = a.id, ib = b.id;
  bool ng = nodes_[ia].needs_grad || nodes_[ib].needs_grad;
  Vec v(nodes_[ia].val.size() + nodes_[ib].val.size());
  v << nodes_[ia].val, nodes_[ib].val;
  int id = push(std::move(v), ng, nullptr);
  if (ng) {
    nodes_[id].back = [id, ia, ib](Tape& t) {
      int na = static_cast<int>(t.nodes_[ia].val.size());
      int nb = static_cast<int>(t.nodes_[ib].val.size());
      if (t.nodes_[ia].needs_grad)
        t.nodes_[ia].grad += t.nodes_[id].grad.head(na);
      if (t.nodes_[ib].needs_grad)
        t.nodes_[ib].grad += t.nodes_[id].grad.tail(nb);
    };
  }
  return {id};
}

Tape::Var Tape::slice(Var a, int start, int len) {
  int ia = a.id;
  bool ng = nodes_[ia].needs_grad;
  int id = push(nodes_[ia].val.segment(start, len), ng, nullptr);
  if (ng) {
    nodes_[id].back = [id, ia, start, len](Tape& t) {
      t.nodes_[ia].grad.segment(start, len) += t.nodes_[id].grad;
    };
  }
  return {id};
}

Tape::Var Tape::gather(Var a, const std::vector<int>& idx) {
  int ia = a.id;
  bool ng = nodes_[ia].needs_grad;
  Vec v(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) v(i) = nodes_[ia].val(idx[i]);
  int id = push(std::move(v), ng, nullptr);
  if (ng) {
    nodes_[id].back = [id, ia, idx](Tape& t) {
      for (std::size_t i = 0; i < idx.size(); ++i)
        t.nodes_[ia].grad(idx[i]) += t.nodes_[id].grad(i);
    };
  }
  return {id};
}

Tape::Var Tape::dot(Var a, Var b) {
  int ia = a.id, ib = b.id;
  bool ng = nodes_[ia].needs_grad || nodes_[ib].needs_grad;
  Vec v(1);
  v(0) = nodes_[ia].val.dot(nodes_[ib].val);
  int id = push(std::move(v), ng, nullptr);
  if (ng) {
    nodes_[id].back = [id, ia, ib](Tape& t) {
      double gy = t.nodes_[id].grad(0);
      if (t.nodes_[ia].needs_grad) t.nodes_[ia].grad += gy * t.nodes_[ib].val;
      if (t.nodes_[ib].needs_grad) t.nodes_[ib].grad += gy * t.nodes_[ia].val;
    };
  }
  return {id};
}

Tape::Var Tape::sum(Var a) {
  int ia = a.id;
  bool ng = nodes_[ia].needs_grad;
  Vec v(1);
  v(0) = nodes_[ia].val.sum();
  int id = push(std::move(v), ng, nullptr);
  if (ng) {
    nodes_[id].back = [id, ia](Tape& t) {
      t.nodes_[ia].grad.array() += t.nodes_[id].grad(0);
    };
  }
  return {id};
}

Tape::Var Tape::mean(Var a) {
  return scale(sum(a), 1.0 / static_cast<double>(len(a)));
}

Tape::Var Tape::softmax(Var a) {
  int ia = a.id;
  bool ng = nodes_[ia].needs_grad;
  const Vec& x = nodes_[ia].val;
  double m = x.maxCoeff();
  Vec e = (x.array() - m).exp();
  Vec y = e / e.sum();
  int id = push(std::move(y), ng, nullptr);
  if (ng) {
    nodes_[id].back = [id, ia](Tape& t) {
      const Vec& y2 = t.nodes_[id].val;
      const Vec& gy = t.nodes_[id].grad;
      double s = y2.dot(gy);
      t.nodes_[ia].grad += (y2.array() * (gy.array() - s)).matrix();
    };
  }
  return {id};
}

Tape::Var Tape::mse(Var a, Var b) {
  Var d = sub(a, b);
  return mean(mul(d, d));
}

Tape::Var Tape::bce_with_logit(Var logit, double target) {
  // loss = softplus(logit) - target * logit, stable for all logits
  Var sp = softplus(logit);
  return sub(sp, scale(logit, target));
}

void Tape::backward(Var out) {
  if (len(out) != 1) throw TrainError("backward: output must be scalar");
  for (auto& n : nodes_) {
    if (n.needs_grad) n.grad = Vec::Zero(n.val.size());
  }
  nodes_[out.id].grad = Vec::Ones(1);
  for (int i = out.id; i >= 0; --i) {
    if (nodes_[i].needs_grad && nodes_[i].back) nodes_[i].back(*this);
  }
}

// ---------------------------------------------------------------------------
// MLP

void NetworkSpec::validate() const {
  if (sizes.size() < 2) throw TrainError("network spec: need >= 2 sizes");
  if (acts.size() != sizes.size() - 1)
    throw TrainError("network spec: one activation per layer required");
  if (!spectral_cap.empty() && spectral_cap.size() != acts.size())
    throw TrainError("network spec: spectral cap list length mismatch");
  for (double c : spectral_cap) {
    if (c != 0.0 && !(c > 0.0 && c <= 1.0))
      throw TrainError("network spec: spectral cap must be in (0,1]");
  }
}

void init_mlp(ParameterStore& p, const NetworkSpec& spec,
              const std::string& prefix, Rng& rng, double scale) {
  spec.validate();
  for (int l = 0; l < spec.n_layers(); ++l) {
    int fan_in = spec.sizes[l];
    int fan_out = spec.sizes[l + 1];
    double std = scale * std::sqrt(2.0 / fan_in);
    Mat w(fan_out, fan_in);
    for (int i = 0; i < fan_out; ++i)
      for (int j = 0; j < fan_in; ++j) w(i, j) = std * rng.normal();
    p.tensors[prefix + "W" + std::to_string(l)] = std::move(w);
    p.tensors[prefix + "b" + std::to_string(l)] = Mat::Zero(fan_out, 1);
  }
}

void init_mlp_orthogonal(ParameterStore& p, const NetworkSpec& spec,
                         const std::string& prefix, Rng& rng) {
  spec.validate();
  for (int l = 0; l < spec.n_layers(); ++l) {
    int fan_in = spec.sizes[l];
    int fan_out = spec.sizes[l + 1];
    // semi-orthogonal: all singular values 1, so spectral capping at 1 is a
    // no-op at init and the layer starts norm-preserving instead of
    // contracting
    int big = std::max(fan_in, fan_out);
    Mat g(big, big);
    for (int i = 0; i < big; ++i)
      for (int j = 0; j < big; ++j) g(i, j) = rng.normal();
    Eigen::HouseholderQR<Mat> qr(g);
    Mat q = qr.householderQ();
    p.tensors[prefix + "W" + std::to_string(l)] =
        q.topLeftCorner(fan_out, fan_in);
    p.tensors[prefix + "b" + std::to_string(l)] = Mat::Zero(fan_out, 1);
  }
}

Vec mlp_forward(const ParameterStore& p, const NetworkSpec& spec,
                const std::string& prefix, const Vec& input) {
  if (input.size() != spec.sizes[0])
    throw TrainError("mlp_forward: input length " +
                     std::to_string(input.size()) + " != " +
                     std::to_string(spec.sizes[0]));
  Vec h = input;
  for (int l = 0; l < spec.n_layers(); ++l) {
    const Mat& w = p.at(prefix + "W" + std::to_string(l));
    const Mat& b = p.at(prefix + "b" + std::to_string(l));
    h = w * h + b.col(0);
    switch (spec.acts[l]) {
      case Activation::identity: break;
      case Activation::relu: h = h.cwiseMax(0.0); break;
      case Activation::leaky_relu:
        h = h.array().max(0.0) + 0.01 * h.array().min(0.0);
        break;
      case Activation::softplus:
        for (int i = 0; i < h.size(); ++i) h(i) = softplus_scalar(h(i));
        break;
      case Activation::sigmoid:
        for (int i = 0; i < h.size(); ++i) h(i) = sigmoid_scalar(h(i));
        break;
      case Activation::tanh: h = h.array().tanh(); break;
    }
    if (!h.allFinite())
      throw TrainError("mlp_forward: non-finite value at layer " +
                       std::to_string(l));
  }
  return h;
}

Tape::Var mlp_forward_tape(Tape& t, ParameterStore& p, GradStore& g,
                           const NetworkSpec& spec, const std::string& prefix,
                           Tape::Var input) {
  Tape::Var h = input;
  for (int l = 0; l < spec.n_layers(); ++l) {
    std::string li = std::to_string(l);
    h = t.add(t.matvec(p, g, prefix + "W" + li, h),
              t.param_vec(p, g, prefix + "b" + li));
    h = t.act(h, spec.acts[l]);
  }
  return h;
}

void apply_spectral_caps(ParameterStore& p, const NetworkSpec& spec,
                         const std::string& prefix) {
  if (spec.spectral_cap.empty()) return;
  for (int l = 0; l < spec.n_layers(); ++l) {
    double cap = spec.spectral_cap[l];
    if (cap == 0.0) continue;
    Mat& w = p.at(prefix + "W" + std::to_string(l));
    w = project_spectral(w, cap);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kMagic[5] = {'S', 'W', 'H', 'Y', '1'};

void write_u64(std::ofstream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64(std::ifstream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}
} // namespace

void save_checkpoint(const ParameterStore& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write(kMagic, 5);
  write_u64(out, p.tensors.size());
  write_u64(out, p.version);
  for (const auto& [name, m] : p.tensors) {
    write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u64(out, static_cast<std::uint64_t>(m.rows()));
    write_u64(out, static_cast<std::uint64_t>(m.cols()));
    out.write("f64", 3);
    // Eigen is column-major; written column by column, little-endian host
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(double) * m.size()));
  }
}

ParameterStore load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[5];
  in.read(magic, 5);
  if (!in || std::memcmp(magic, kMagic, 5) != 0)
    throw DataError("bad checkpoint magic in " + path);
  ParameterStore p;
  std::uint64_t count = read_u64(in);
  p.version = read_u64(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint64_t name_len = read_u64(in);
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    std::uint64_t rows = read_u64(in);
    std::uint64_t cols = read_u64(in);
    char dtype[3];
    in.read(dtype, 3);
    if (std::memcmp(dtype, "f64", 3) != 0)
      throw DataError("unsupported dtype in checkpoint " + path);
    Mat m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
    if (!in) throw DataError("truncated checkpoint: " + path);
    p.tensors[name] = std::move(m);
  }
  return p;
}

} // namespace sh::diff
