#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "swifthydra/rng.hpp"

namespace sh::data {

enum class Provenance : std::uint8_t { original = 0, generated = 1 };

// Labeled feature matrix. Labels are canonically {-1 normal, +1 anomalous}.
// Immutable after construction; every mutation-like operation returns a new
// Dataset.
class Dataset {
public:
  Dataset() = default;
  Dataset(Eigen::MatrixXd features, std::vector<int> labels,
          std::vector<Provenance> provenance);

  int size() const { return static_cast<int>(features_.rows()); }
  int feature_dim() const { return static_cast<int>(features_.cols()); }
  int count_normal() const { return n_normal_; }
  int count_anomalous() const { return n_anomalous_; }

  const Eigen::MatrixXd& features() const { return features_; }
  Eigen::VectorXd row(int i) const { return features_.row(i).transpose(); }
  int label(int i) const { return labels_[i]; }
  const std::vector<int>& labels() const { return labels_; }
  Provenance provenance(int i) const { return provenance_[i]; }

  std::vector<int> indices_of_label(int label) const;
  std::vector<int> generated_indices() const;

  // features of all rows with the given label, one row per sample
  Eigen::MatrixXd features_of_label(int label) const;

  Dataset subset(const std::vector<int>& idx) const;

private:
  Eigen::MatrixXd features_; // n x P
  std::vector<int> labels_;
  std::vector<Provenance> provenance_;
  int n_normal_ = 0;
  int n_anomalous_ = 0;
};

// Equal class counts; retains the full minority class.
class BalancedDataset {
public:
  BalancedDataset() = default;
  BalancedDataset(Dataset ds, int balance_count)
      : ds_(std::move(ds)), balance_count_(balance_count) {}

  const Dataset& dataset() const { return ds_; }
  int balance_count() const { return balance_count_; }

private:
  Dataset ds_;
  int balance_count_ = 0;
};

struct GaussianClusterSpec {
  int normal_clusters = 1;
  int anomalous_clusters = 1;
  int dim = 2;
  double sigma = 1.0;
  std::vector<Eigen::VectorXd> centers; // normal clusters first
  int samples_per_cluster = 100;

  void validate() const;
};

// File format: delimiter-separated numeric rows, optional single header row
// (auto-detected by a non-numeric first row), label column {0,1} or {-1,1}.
Dataset load_dataset(const std::string& path, int label_column = -1,
                     char delimiter = ',');
void save_dataset(const Dataset& ds, const std::string& path,
                  char delimiter = ',');

// Stratified split; train gets floor(count * train_fraction) of each class.
std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction,
                                  std::uint64_t seed);

BalancedDataset trim_balance(const Dataset& ds, std::uint64_t seed);

// Appended samples are flagged generated and labeled +1.
Dataset append_generated(const Dataset& ds,
                         const std::vector<Eigen::VectorXd>& new_samples);

Dataset synth_gaussian_clusters(const GaussianClusterSpec& spec,
                                std::uint64_t seed);

// Normal points follow (t, sin t) + noise over t in [0, 4*pi]; anomalies are
// uniform in the bounding box but at least the margin band away from the
// curve. Margin = max(3 * noise, 0.2).
Dataset synth_sine_toy(int n_normal, int n_anomalous, double noise,
                       std::uint64_t seed);

double sine_toy_margin(double noise);

// Per-feature z-score transform, fit on training data and applied everywhere.
struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd std; // zero-variance features get std 1

  static Standardizer fit(const Dataset& ds);
  Eigen::VectorXd apply(const Eigen::VectorXd& x) const;
  Dataset apply(const Dataset& ds) const;
};

} // namespace sh::data
