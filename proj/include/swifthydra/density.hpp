#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

namespace sh::density {

// Gaussian product-kernel density over support points with shared scalar
// bandwidth. Immutable; all queries are thread-safe.
class KdeModel {
public:
  KdeModel(Eigen::MatrixXd points, double bandwidth);

  int n() const { return static_cast<int>(points_.rows()); }
  int dim() const { return static_cast<int>(points_.cols()); }
  double bandwidth() const { return h_; }
  const Eigen::MatrixXd& points() const { return points_; }

  // Returns a copy with one extra mixture component (no refit).
  KdeModel with_extra_point(const Eigen::VectorXd& x) const;

  double log_pdf(const Eigen::VectorXd& x) const;
  // closed-form gradient of log p-hat at x
  Eigen::VectorXd log_pdf_grad(const Eigen::VectorXd& x) const;

  // OpenMP-parallel over queries; bitwise identical to the serial reference.
  Eigen::VectorXd log_pdf_batch(const Eigen::MatrixXd& queries) const;
  Eigen::VectorXd log_pdf_batch_serial(const Eigen::MatrixXd& queries) const;

  // each draw: uniformly chosen support point + h * N(0, I)
  Eigen::MatrixXd sample(int count, std::uint64_t seed) const;

  // H ~= -(1/count) * sum log p-hat(x_j) over draws from the model itself
  double entropy_mc(int count, std::uint64_t seed) const;

private:
  Eigen::MatrixXd points_; // n x dim
  double h_;
  double log_norm_; // -log(n) - dim*log(h*sqrt(2*pi))
};

// bandwidth < 0 means "silverman": h = 1.06 * sigma-bar * n^(-1/5) with
// sigma-bar the mean per-dimension sample std. Zero variance falls back to
// h = 0.5 with a warning on stderr.
KdeModel fit_kde(const Eigen::MatrixXd& points, double bandwidth);
KdeModel fit_kde_silverman(const Eigen::MatrixXd& points);

double silverman_bandwidth(const Eigen::MatrixXd& points);

} // namespace sh::density
