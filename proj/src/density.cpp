#include "swifthydra/density.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>
#include <cstdio>

#include "swifthydra/errors.hpp"
#include "swifthydra/rng.hpp"

namespace sh::density {

namespace {
constexpr double kLogSqrt2Pi = 0.91893853320467274178; // log(sqrt(2*pi))
}

KdeModel::KdeModel(Eigen::MatrixXd points, double bandwidth)
    : points_(std::move(points)), h_(bandwidth) {
  if (points_.rows() < 1) throw DataError("kde: need at least one point");
  if (!(h_ > 0.0)) throw DataError("kde: bandwidth must be > 0");
  if (!points_.allFinite()) throw DataError("kde: non-finite support point");
  log_norm_ = -std::log(static_cast<double>(n())) -
              dim() * (std::log(h_) + kLogSqrt2Pi);
}

KdeModel KdeModel::with_extra_point(const Eigen::VectorXd& x) const {
  Eigen::MatrixXd p(n() + 1, dim());
  p.topRows(n()) = points_;
  p.row(n()) = x.transpose();
  return KdeModel(std::move(p), h_);
}

double KdeModel::log_pdf(const Eigen::VectorXd& x) const {
  if (x.size() != dim()) throw DataError("kde: query dim mismatch");
  // log-sum-exp over kernels
  double inv2h2 = 1.0 / (2.0 * h_ * h_);
  double max_e = -std::numeric_limits<double>::infinity();
  Eigen::VectorXd e(n());
  for (int i = 0; i < n(); ++i) {
    e(i) = -(points_.row(i).transpose() - x).squaredNorm() * inv2h2;
    if (e(i) > max_e) max_e = e(i);
  }
  double s = (e.array() - max_e).exp().sum();
  return max_e + std::log(s) + log_norm_;
}

Eigen::VectorXd KdeModel::log_pdf_grad(const Eigen::VectorXd& x) const {
  if (x.size() != dim()) throw DataError("kde: query dim mismatch");
  double inv2h2 = 1.0 / (2.0 * h_ * h_);
  Eigen::VectorXd e(n());
  double max_e = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n(); ++i) {
    e(i) = -(points_.row(i).transpose() - x).squaredNorm() * inv2h2;
    if (e(i) > max_e) max_e = e(i);
  }
  Eigen::VectorXd w = (e.array() - max_e).exp();
  w /= w.sum();
  // grad = sum_i w_i * (x_i - x) / h^2
  Eigen::VectorXd g = Eigen::VectorXd::Zero(dim());
  for (int i = 0; i < n(); ++i)
    g += w(i) * (points_.row(i).transpose() - x);
  return g / (h_ * h_);
}

Eigen::VectorXd KdeModel::log_pdf_batch_serial(
    const Eigen::MatrixXd& queries) const {
  Eigen::VectorXd out(queries.rows());
  for (int i = 0; i < queries.rows(); ++i)
    out(i) = log_pdf(queries.row(i).transpose());
  return out;
}

Eigen::VectorXd KdeModel::log_pdf_batch(const Eigen::MatrixXd& queries) const {
  Eigen::VectorXd out(queries.rows());
  int m = static_cast<int>(queries.rows());
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i)
    out(i) = log_pdf(queries.row(i).transpose());
  return out;
}

Eigen::MatrixXd KdeModel::sample(int count, std::uint64_t seed) const {
  if (count < 1) throw DataError("kde: sample count must be >= 1");
  Rng rng(seed);
  // draw against a canonical row order so results do not depend on how the
  // support points happen to be arranged
  std::vector<int> order(n());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    for (int c = 0; c < dim(); ++c) {
      if (points_(a, c) != points_(b, c)) return points_(a, c) < points_(b, c);
    }
    return false;
  });
  Eigen::MatrixXd out(count, dim());
  for (int i = 0; i < count; ++i) {
    int j =
        order[rng.uniform_int(static_cast<std::uint64_t>(n()))];
    for (int c = 0; c < dim(); ++c)
      out(i, c) = points_(j, c) + h_ * rng.normal();
  }
  return out;
}

double KdeModel::entropy_mc(int count, std::uint64_t seed) const {
  Eigen::MatrixXd draws = sample(count, seed);
  Eigen::VectorXd lp = log_pdf_batch(draws);
  return -lp.mean();
}

double silverman_bandwidth(const Eigen::MatrixXd& points) {
  int n = static_cast<int>(points.rows());
  Eigen::VectorXd mean = points.colwise().mean();
  Eigen::VectorXd var =
      ((points.rowwise() - mean.transpose()).array().square().colwise().sum() /
       std::max(1, n - 1))
          .transpose();
  double sigma_bar = var.array().sqrt().mean();
  if (sigma_bar <= 0.0) return -1.0; // caller handles fallback
  return 1.06 * sigma_bar * std::pow(static_cast<double>(n), -0.2);
}

KdeModel fit_kde_silverman(const Eigen::MatrixXd& points) {
  double h = silverman_bandwidth(points);
  if (h <= 0.0) {
    std::fprintf(stderr,
                 "warning: zero variance support, silverman bandwidth "
                 "undefined; falling back to h=0.5\n");
    h = 0.5;
  }
  return KdeModel(points, h);
}

KdeModel fit_kde(const Eigen::MatrixXd& points, double bandwidth) {
  if (bandwidth < 0.0) return fit_kde_silverman(points);
  return KdeModel(points, bandwidth);
}

} // namespace sh::density
