#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aashnet/errors.hpp"

namespace aashnet {

struct Sample {
  std::vector<double> x;
  double y = 0.0;
};

// Row-major design matrix plus targets.
struct Dataset {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> x;
  std::vector<double> y;

  Dataset() = default;
  Dataset(std::size_t r, std::size_t c) : rows(r), cols(c), x(r * c, 0.0), y(r, 0.0) {}

  static Dataset from_samples(std::span<const Sample> samples) {
    if (samples.empty()) return {};
    Dataset d(samples.size(), samples.front().x.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].x.size() != d.cols) throw ShapeMismatch("samples have differing predictor counts");
      std::copy(samples[i].x.begin(), samples[i].x.end(), d.x.begin() + static_cast<std::ptrdiff_t>(i * d.cols));
      d.y[i] = samples[i].y;
    }
    return d;
  }

  bool empty() const { return rows == 0; }
  double& at(std::size_t i, std::size_t j) { return x[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return x[i * cols + j]; }
  std::span<const double> row(std::size_t i) const { return {x.data() + i * cols, cols}; }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset d(idx.size(), cols);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto r = row(idx[k]);
      std::copy(r.begin(), r.end(), d.x.begin() + static_cast<std::ptrdiff_t>(k * cols));
      d.y[k] = y[idx[k]];
    }
    return d;
  }

  // Rows [begin, end).
  Dataset slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > rows) throw ValidationError("dataset slice out of range");
    Dataset d(end - begin, cols);
    std::copy(x.begin() + static_cast<std::ptrdiff_t>(begin * cols),
              x.begin() + static_cast<std::ptrdiff_t>(end * cols), d.x.begin());
    std::copy(y.begin() + static_cast<std::ptrdiff_t>(begin), y.begin() + static_cast<std::ptrdiff_t>(end),
              d.y.begin());
    return d;
  }

  void validate() const {
    if (x.size() != rows * cols || y.size() != rows) throw ShapeMismatch("dataset storage does not match its shape");
    for (double v : x) {
      if (!std::isfinite(v)) throw ValidationError("dataset has a non-finite predictor");
    }
    for (double v : y) {
      if (!std::isfinite(v)) throw ValidationError("dataset has a non-finite target");
    }
  }
};

// Time-ordered split: the last `fraction` of rows become the second part.
inline std::pair<Dataset, Dataset> split_tail(const Dataset& d, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ValidationError("split fraction must lie in (0, 1)");
  const auto tail = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(d.rows)));
  if (tail == 0 || tail >= d.rows) throw ValidationError("dataset too small to split");
  return {d.slice(0, d.rows - tail), d.slice(d.rows - tail, d.rows)};
}

// Column z-scores. Zero-variance columns keep scale 1, so they map to zeros.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer fit(const Dataset& d) {
    Standardizer s;
    s.mean.assign(d.cols, 0.0);
    s.scale.assign(d.cols, 1.0);
    if (d.rows == 0) return s;
    const auto n = static_cast<double>(d.rows);
    for (std::size_t i = 0; i < d.rows; ++i) {
      for (std::size_t j = 0; j < d.cols; ++j) s.mean[j] += d.at(i, j);
    }
    for (double& m : s.mean) m /= n;
    std::vector<double> var(d.cols, 0.0);
    for (std::size_t i = 0; i < d.rows; ++i) {
      for (std::size_t j = 0; j < d.cols; ++j) {
        const double e = d.at(i, j) - s.mean[j];
        var[j] += e * e;
      }
    }
    for (std::size_t j = 0; j < d.cols; ++j) {
      const double sd = std::sqrt(var[j] / n);
      if (sd > 1e-12 * (1.0 + std::abs(s.mean[j]))) {
        s.scale[j] = sd;
      } else {
        s.mean[j] = d.at(0, j);  // exact zeros for a constant column, not rounding residue
      }
    }
    return s;
  }

  void apply(Dataset& d) const {
    for (std::size_t i = 0; i < d.rows; ++i) {
      for (std::size_t j = 0; j < d.cols; ++j) d.at(i, j) = (d.at(i, j) - mean[j]) / scale[j];
    }
  }

  std::vector<double> apply(std::span<const double> row) const {
    std::vector<double> out(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) out[j] = (row[j] - mean[j]) / scale[j];
    return out;
  }
};

// Scalar z-score used for targets.
struct TargetScaler {
  double mean = 0.0;
  double scale = 1.0;

  static TargetScaler fit(std::span<const double> y) {
    TargetScaler s;
    if (y.empty()) return s;
    for (double v : y) s.mean += v;
    s.mean /= static_cast<double>(y.size());
    double var = 0.0;
    for (double v : y) var += (v - s.mean) * (v - s.mean);
    const double sd = std::sqrt(var / static_cast<double>(y.size()));
    s.scale = sd > 1e-12 * (1.0 + std::abs(s.mean)) ? sd : 1.0;
    return s;
  }
  double forward(double v) const { return (v - mean) / scale; }
  double inverse(double z) const { return mean + scale * z; }
};

}  // namespace aashnet
