#include "swifthydra/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "swifthydra/errors.hpp"

namespace sh::data {

Dataset::Dataset(Eigen::MatrixXd features, std::vector<int> labels,
                 std::vector<Provenance> provenance)
    : features_(std::move(features)), labels_(std::move(labels)),
      provenance_(std::move(provenance)) {
  if (static_cast<int>(labels_.size()) != features_.rows() ||
      provenance_.size() != labels_.size()) {
    throw DataError("dataset: row/label/provenance count mismatch");
  }
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i] == -1) {
      ++n_normal_;
    } else if (labels_[i] == 1) {
      ++n_anomalous_;
    } else {
      throw DataError("dataset: label outside {-1,+1} at row " +
                      std::to_string(i));
    }
  }
  if (!features_.allFinite()) {
    throw DataError("dataset: non-finite feature value");
  }
}

std::vector<int> Dataset::indices_of_label(int label) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (labels_[i] == label) out.push_back(i);
  }
  return out;
}

std::vector<int> Dataset::generated_indices() const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (provenance_[i] == Provenance::generated) out.push_back(i);
  }
  return out;
}

Eigen::MatrixXd Dataset::features_of_label(int label) const {
  auto idx = indices_of_label(label);
  Eigen::MatrixXd out(idx.size(), feature_dim());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(i) = features_.row(idx[i]);
  return out;
}

Dataset Dataset::subset(const std::vector<int>& idx) const {
  Eigen::MatrixXd f(idx.size(), feature_dim());
  std::vector<int> l(idx.size());
  std::vector<Provenance> p(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    f.row(i) = features_.row(idx[i]);
    l[i] = labels_[idx[i]];
    p[i] = provenance_[idx[i]];
  }
  return Dataset(std::move(f), std::move(l), std::move(p));
}

void GaussianClusterSpec::validate() const {
  if (normal_clusters < 1 || anomalous_clusters < 1)
    throw DataError("cluster spec: need at least one cluster per class");
  if (sigma <= 0) throw DataError("cluster spec: sigma must be > 0");
  if (static_cast<int>(centers.size()) != normal_clusters + anomalous_clusters)
    throw DataError("cluster spec: center count must equal cluster count");
  for (const auto& c : centers) {
    if (c.size() != dim) throw DataError("cluster spec: center dim mismatch");
  }
  if (samples_per_cluster < 1)
    throw DataError("cluster spec: samples_per_cluster must be >= 1");
}

namespace {

bool parse_double(const std::string& tok, double& out) {
  const char* s = tok.c_str();
  char* end = nullptr;
  out = std::strtod(s, &end);
  if (end == s) return false;
  while (*end == ' ' || *end == '\t' || *end == '\r') ++end;
  return *end == '\0';
}

std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> toks;
  std::string cur;
  for (char c : line) {
    if (c == delim) {
      toks.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  toks.push_back(cur);
  return toks;
}

} // namespace

Dataset load_dataset(const std::string& path, int label_column,
                     char delimiter) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path);

  std::vector<std::vector<double>> rows;
  std::string line;
  int lineno = 0;
  int width = -1;
  bool first_data_row = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto toks = split_line(line, delimiter);
    std::vector<double> vals(toks.size());
    bool numeric = true;
    for (std::size_t c = 0; c < toks.size(); ++c) {
      if (!parse_double(toks[c], vals[c])) {
        numeric = false;
        if (!first_data_row) {
          throw DataError("non-numeric cell at row " + std::to_string(lineno) +
                          " column " + std::to_string(c + 1) + " in " + path);
        }
        break;
      }
    }
    if (!numeric) {
      // header row: only tolerated as the very first row
      first_data_row = false;
      continue;
    }
    first_data_row = false;
    if (width < 0) {
      width = static_cast<int>(vals.size());
      if (width < 2) throw DataError("rows must have >= 2 columns in " + path);
    } else if (static_cast<int>(vals.size()) != width) {
      throw DataError("row " + std::to_string(lineno) + " has width " +
                      std::to_string(vals.size()) + ", expected " +
                      std::to_string(width) + " in " + path);
    }
    rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw DataError("no data rows in " + path);

  int lc = label_column < 0 ? width - 1 : label_column;
  if (lc < 0 || lc >= width)
    throw DataError("label column " + std::to_string(lc) + " out of range");

  Eigen::MatrixXd f(rows.size(), width - 1);
  std::vector<int> labels(rows.size());
  std::vector<Provenance> prov(rows.size(), Provenance::original);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    int c2 = 0;
    for (int c = 0; c < width; ++c) {
      if (c == lc) continue;
      f(static_cast<int>(i), c2++) = rows[i][c];
    }
    double y = rows[i][lc];
    if (y == 0.0 || y == -1.0) {
      labels[i] = -1;
    } else if (y == 1.0) {
      labels[i] = 1;
    } else {
      throw DataError("label outside {0,1}/{-1,1} at row " +
                      std::to_string(i + 1));
    }
  }
  return Dataset(std::move(f), std::move(labels), std::move(prov));
}

void save_dataset(const Dataset& ds, const std::string& path, char delimiter) {
  std::FILE* fp = std::fopen(path.c_str(), "w");
  if (!fp) throw DataError("cannot write file: " + path);
  for (int i = 0; i < ds.size(); ++i) {
    for (int c = 0; c < ds.feature_dim(); ++c) {
      // %.17g round-trips doubles exactly
      std::fprintf(fp, "%.17g%c", ds.features()(i, c), delimiter);
    }
    std::fprintf(fp, "%d\n", ds.label(i));
  }
  std::fclose(fp);
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction,
                                  std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw DataError("train fraction must be in (0,1)");
  Rng rng(seed);
  std::vector<int> train_idx, test_idx;
  for (int label : {-1, +1}) {
    auto idx = ds.indices_of_label(label);
    if (idx.size() < 2)
      throw DataError("class " + std::to_string(label) +
                      " has fewer than 2 members");
    // Fisher-Yates with the shared rng
    for (std::size_t i = idx.size(); i > 1; --i) {
      std::size_t j = rng.uniform_int(i);
      std::swap(idx[i - 1], idx[j]);
    }
    std::size_t n_train =
        static_cast<std::size_t>(train_fraction * static_cast<double>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      (i < n_train ? train_idx : test_idx).push_back(idx[i]);
    }
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  return {ds.subset(train_idx), ds.subset(test_idx)};
}

BalancedDataset trim_balance(const Dataset& ds, std::uint64_t seed) {
  int n_min = std::min(ds.count_normal(), ds.count_anomalous());
  if (n_min == 0) throw DataError("trim_balance: empty class");
  Rng rng(seed);
  std::vector<int> keep;
  for (int label : {-1, +1}) {
    auto idx = ds.indices_of_label(label);
    if (static_cast<int>(idx.size()) > n_min) {
      for (std::size_t i = idx.size(); i > 1; --i) {
        std::size_t j = rng.uniform_int(i);
        std::swap(idx[i - 1], idx[j]);
      }
      idx.resize(n_min);
    }
    keep.insert(keep.end(), idx.begin(), idx.end());
  }
  std::sort(keep.begin(), keep.end());
  return BalancedDataset(ds.subset(keep), n_min);
}

Dataset append_generated(const Dataset& ds,
                         const std::vector<Eigen::VectorXd>& new_samples) {
  if (new_samples.empty()) return ds;
  for (const auto& s : new_samples) {
    if (s.size() != ds.feature_dim())
      throw DataError("append_generated: feature dim mismatch");
  }
  int n = ds.size();
  int m = static_cast<int>(new_samples.size());
  Eigen::MatrixXd f(n + m, ds.feature_dim());
  f.topRows(n) = ds.features();
  std::vector<int> labels(ds.labels());
  std::vector<Provenance> prov;
  prov.reserve(n + m);
  for (int i = 0; i < n; ++i) prov.push_back(ds.provenance(i));
  for (int i = 0; i < m; ++i) {
    f.row(n + i) = new_samples[i].transpose();
    labels.push_back(+1);
    prov.push_back(Provenance::generated);
  }
  return Dataset(std::move(f), std::move(labels), std::move(prov));
}

Dataset synth_gaussian_clusters(const GaussianClusterSpec& spec,
                                std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  int total_clusters = spec.normal_clusters + spec.anomalous_clusters;
  int n = total_clusters * spec.samples_per_cluster;
  Eigen::MatrixXd f(n, spec.dim);
  std::vector<int> labels(n);
  std::vector<Provenance> prov(n, Provenance::original);
  int row = 0;
  for (int u = 0; u < total_clusters; ++u) {
    int label = u < spec.normal_clusters ? -1 : +1;
    for (int i = 0; i < spec.samples_per_cluster; ++i, ++row) {
      for (int c = 0; c < spec.dim; ++c) {
        f(row, c) = spec.centers[u](c) + spec.sigma * rng.normal();
      }
      labels[row] = label;
    }
  }
  return Dataset(std::move(f), std::move(labels), std::move(prov));
}

double sine_toy_margin(double noise) { return std::max(3.0 * noise, 0.2); }

Dataset synth_sine_toy(int n_normal, int n_anomalous, double noise,
                       std::uint64_t seed) {
  if (n_normal < 1 || n_anomalous < 1)
    throw DataError("sine toy: counts must be >= 1");
  Rng rng(seed);
  const double t_lo = 0.0, t_hi = 4.0 * 3.141592653589793;
  double margin = sine_toy_margin(noise);
  double y_lo = -1.0 - margin - 1.0, y_hi = 1.0 + margin + 1.0;

  int n = n_normal + n_anomalous;
  Eigen::MatrixXd f(n, 2);
  std::vector<int> labels(n);
  std::vector<Provenance> prov(n, Provenance::original);
  for (int i = 0; i < n_normal; ++i) {
    double t = (n_normal == 1) ? 0.0 : t_lo + (t_hi - t_lo) * i / (n_normal - 1);
    f(i, 0) = t + noise * rng.normal();
    f(i, 1) = std::sin(t) + noise * rng.normal();
    labels[i] = -1;
  }
  for (int i = 0; i < n_anomalous; ++i) {
    double x, y;
    do {
      x = rng.uniform(t_lo, t_hi);
      y = rng.uniform(y_lo, y_hi);
    } while (std::abs(y - std::sin(x)) < margin);
    f(n_normal + i, 0) = x;
    f(n_normal + i, 1) = y;
    labels[n_normal + i] = +1;
  }
  return Dataset(std::move(f), std::move(labels), std::move(prov));
}

Standardizer Standardizer::fit(const Dataset& ds) {
  Standardizer s;
  const auto& f = ds.features();
  s.mean = f.colwise().mean();
  Eigen::VectorXd var =
      ((f.rowwise() - s.mean.transpose()).array().square().colwise().sum() /
       std::max(1, ds.size() - 1))
          .transpose();
  s.std = var.array().sqrt();
  for (int i = 0; i < s.std.size(); ++i) {
    if (s.std(i) <= 0) s.std(i) = 1.0;
  }
  return s;
}

Eigen::VectorXd Standardizer::apply(const Eigen::VectorXd& x) const {
  return (x - mean).cwiseQuotient(std);
}

Dataset Standardizer::apply(const Dataset& ds) const {
  Eigen::MatrixXd f = ds.features();
  f.rowwise() -= mean.transpose();
  f.array().rowwise() /= std.transpose().array();
  std::vector<int> labels = ds.labels();
  std::vector<Provenance> prov;
  prov.reserve(ds.size());
  for (int i = 0; i < ds.size(); ++i) prov.push_back(ds.provenance(i));
  return Dataset(std::move(f), std::move(labels), std::move(prov));
}

} // namespace sh::data
