#pragma once

// Linear comparators: ridge and lasso with generalized cross-validation, and
// the random walk with drift.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "aashnet/dataset.hpp"
#include "aashnet/errors.hpp"
#include "aashnet/model.hpp"

namespace aashnet::baselines {

enum class Method { ridge, lasso };

inline std::string to_string(Method m) { return m == Method::ridge ? "ridge" : "lasso"; }

class RankDeficient : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

struct LinearFit {
  Method method = Method::ridge;
  std::vector<double> coef;  // slopes, one per column
  double intercept = 0.0;    // unpenalized
  double lambda = 0.0;
  double df = 0.0;   // effective degrees of freedom, intercept included
  double rss = 0.0;  // in-sample residual sum of squares
  double gcv = std::numeric_limits<double>::quiet_NaN();

  double predict(std::span<const double> x) const {
    if (x.size() != coef.size()) throw ShapeMismatch("predictor width does not match the fit");
    double s = intercept;
    for (std::size_t j = 0; j < coef.size(); ++j) s += coef[j] * x[j];
    return s;
  }
};

inline Eigen::MatrixXd design_matrix(const Dataset& d) {
  Eigen::MatrixXd x(d.rows, d.cols);
  for (std::size_t i = 0; i < d.rows; ++i) {
    for (std::size_t j = 0; j < d.cols; ++j) x(i, j) = d.at(i, j);
  }
  return x;
}

inline Eigen::VectorXd target_vector(const Dataset& d) {
  return Eigen::Map<const Eigen::VectorXd>(d.y.data(), static_cast<Eigen::Index>(d.rows));
}

inline double gcv_score(double rss, double df, std::size_t n) {
  const double nn = static_cast<double>(n);
  if (df >= nn) return std::numeric_limits<double>::infinity();
  const double denom = 1.0 - df / nn;
  return (rss / nn) / (denom * denom);
}

namespace detail {

struct Centered {
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
  Eigen::RowVectorXd x_mean;
  double y_mean = 0.0;
};

inline Centered center(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  if (x.rows() < 1) throw ValidationError("fit needs at least one row");
  if (x.rows() != y.size()) throw ShapeMismatch("design rows and target length differ");
  if (!x.allFinite() || !y.allFinite()) throw ValidationError("fit inputs must be finite");
  Centered c;
  c.x_mean = x.colwise().mean();
  c.y_mean = y.mean();
  c.x = x.rowwise() - c.x_mean;
  c.y = y.array() - c.y_mean;
  return c;
}

inline LinearFit finish(Method method, const Centered& c, const Eigen::VectorXd& beta, double lambda, double df) {
  LinearFit f;
  f.method = method;
  f.coef.assign(beta.data(), beta.data() + beta.size());
  f.intercept = c.y_mean - c.x_mean.dot(beta);
  f.lambda = lambda;
  f.df = df;
  f.rss = (c.y - c.x * beta).squaredNorm();
  f.gcv = gcv_score(f.rss, f.df, static_cast<std::size_t>(c.x.rows()));
  return f;
}

inline std::vector<double> log_grid(double hi, double ratio, std::size_t points) {
  if (points == 0) throw ValidationError("grid needs at least one point");
  if (!(hi > 0.0)) return {0.0};
  std::vector<double> g(points);
  for (std::size_t k = 0; k < points; ++k) {
    const double frac = points == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(points - 1);
    g[k] = hi * std::pow(ratio, frac);  // descending from hi to hi*ratio
  }
  return g;
}

}  // namespace detail

// Ridge for all lambdas from one SVD of the centered design.
class RidgePath {
 public:
  RidgePath(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) : c_(detail::center(x, y)) {
    svd_.compute(c_.x, Eigen::ComputeThinU | Eigen::ComputeThinV);
    uty_ = svd_.matrixU().transpose() * c_.y;
  }

  const Eigen::VectorXd& singular_values() const { return svd_.singularValues(); }
  double max_squared_singular_value() const {
    const auto& d = singular_values();
    return d.size() ? d(0) * d(0) : 0.0;
  }

  // minimizes ||y - b0 - X b||^2 + lambda ||b||^2
  LinearFit fit(double lambda) const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("ridge lambda must be finite and >= 0");
    const auto& d = singular_values();
    const double tol = d.size() ? d(0) * 1e-10 * static_cast<double>(std::max(c_.x.rows(), c_.x.cols())) : 0.0;
    const Eigen::Index p = c_.x.cols();
    if (lambda == 0.0 && (d.size() < p || (p > 0 && d(p - 1) <= tol))) {
      throw RankDeficient("rank-deficient design: least squares (lambda = 0) is not unique");
    }
    Eigen::VectorXd shrink(d.size());
    double df = 1.0;
    for (Eigen::Index k = 0; k < d.size(); ++k) {
      const double dk = d(k);
      const double denom = dk * dk + lambda;
      shrink(k) = denom > 0.0 ? dk / denom : 0.0;
      df += denom > 0.0 ? dk * dk / denom : 0.0;
    }
    const Eigen::VectorXd beta = svd_.matrixV() * (shrink.array() * uty_.array()).matrix();
    return detail::finish(Method::ridge, c_, beta, lambda, df);
  }

 private:
  detail::Centered c_;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd_;
  Eigen::VectorXd uty_;
};

inline LinearFit ridge_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda) {
  return RidgePath(x, y).fit(lambda);
}

struct LassoOptions {
  double tolerance = 1e-8;  // on the largest coefficient change in a sweep
  std::size_t max_sweeps = 100000;
};

// Coordinate descent on (1/2n)||y - b0 - X b||^2 + lambda ||b||_1.
class LassoPath {
 public:
  LassoPath(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, LassoOptions opts = {})
      : c_(detail::center(x, y)), opts_(opts) {
    const double n = static_cast<double>(c_.x.rows());
    col_sq_ = c_.x.colwise().squaredNorm().transpose() / n;
    xty_ = c_.x.transpose() * c_.y / n;
    beta_ = Eigen::VectorXd::Zero(c_.x.cols());
  }

  // Smallest lambda at which every coefficient is zero.
  double lambda_max() const { return xty_.size() ? xty_.cwiseAbs().maxCoeff() : 0.0; }

  // Warm-started from the previous call.
  LinearFit fit(double lambda) {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("lasso lambda must be finite and >= 0");
    const double n = static_cast<double>(c_.x.rows());
    Eigen::VectorXd r = c_.y - c_.x * beta_;
    double change = 0.0;
    std::size_t sweep = 0;
    for (; sweep < opts_.max_sweeps; ++sweep) {
      change = 0.0;
      for (Eigen::Index j = 0; j < beta_.size(); ++j) {
        if (col_sq_(j) <= 0.0) {
          beta_(j) = 0.0;
          continue;
        }
        const double old = beta_(j);
        const double rho = c_.x.col(j).dot(r) / n + col_sq_(j) * old;
        const double next = soft_threshold(rho, lambda) / col_sq_(j);
        if (next != old) {
          r -= (next - old) * c_.x.col(j);
          beta_(j) = next;
          change = std::max(change, std::abs(next - old));
        }
      }
      if (change < opts_.tolerance) break;
    }
    if (sweep == opts_.max_sweeps) {
      throw NumericalError("lasso did not converge in " + std::to_string(opts_.max_sweeps) +
                           " sweeps (last coefficient change " + std::to_string(change) + ")");
    }
    const double nonzero = static_cast<double>((beta_.array() != 0.0).count());
    return detail::finish(Method::lasso, c_, beta_, lambda, nonzero + 1.0);
  }

  static double soft_threshold(double z, double t) {
    if (z > t) return z - t;
    if (z < -t) return z + t;
    return 0.0;
  }

 private:
  detail::Centered c_;
  LassoOptions opts_;
  Eigen::VectorXd col_sq_;
  Eigen::VectorXd xty_;
  Eigen::VectorXd beta_;
};

inline LinearFit lasso_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda, LassoOptions opts = {}) {
  return LassoPath(x, y, opts).fit(lambda);
}

// 50 log-spaced strengths from lambda_max down to 1e-4 lambda_max.
// Ridge: lambda_max = 10 d_max^2 on the unscaled objective above.
inline std::vector<double> ridge_grid(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, std::size_t points = 50) {
  return detail::log_grid(10.0 * RidgePath(x, y).max_squared_singular_value(), 1e-4, points);
}

// Lasso: lambda_max = max |X'y| / n on centered data.
inline std::vector<double> lasso_grid(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, std::size_t points = 50) {
  return detail::log_grid(LassoPath(x, y).lambda_max(), 1e-4, points);
}

struct GcvPoint {
  double lambda = 0.0;
  double df = 0.0;
  double rss = 0.0;
  double gcv = 0.0;
};

struct GcvSelection {
  LinearFit fit;
  std::vector<GcvPoint> path;  // in grid order
};

enum class Criterion { gcv, bic };

// n log(RSS/n) + log(n) df. Consistent for the support, where GCV (tuned for
// prediction) tends to keep extra small coefficients.
inline double bic_score(double rss, double df, std::size_t n) {
  const auto nn = static_cast<double>(n);
  if (!(rss > 0.0)) return -std::numeric_limits<double>::infinity();
  return nn * std::log(rss / nn) + std::log(nn) * df;
}

// Fits every grid point and keeps the minimizer of the criterion; exact ties
// go to the larger lambda. `path` always records the GCV values.
inline GcvSelection select(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, std::vector<double> grid,
                           Method method, Criterion criterion, LassoOptions opts = {}) {
  if (grid.empty()) throw ValidationError("lambda grid is empty");
  // descending order: lasso warm starts run from sparse to dense
  std::sort(grid.begin(), grid.end(), std::greater<>());
  const auto n = static_cast<std::size_t>(x.rows());
  GcvSelection out;
  bool found = false;
  double best = 0.0;
  auto consider = [&](const LinearFit& f) {
    out.path.push_back({f.lambda, f.df, f.rss, f.gcv});
    const double score = criterion == Criterion::gcv ? f.gcv : (f.df < static_cast<double>(n) ? bic_score(f.rss, f.df, n) : std::numeric_limits<double>::quiet_NaN());
    if (std::isnan(score) || score == std::numeric_limits<double>::infinity()) return;
    if (!found || score < best) {  // strict: on ties the earlier (larger) lambda stays
      out.fit = f;
      best = score;
      found = true;
    }
  };
  if (method == Method::ridge) {
    const RidgePath path(x, y);
    for (double l : grid) consider(path.fit(l));
  } else {
    LassoPath path(x, y, opts);
    for (double l : grid) consider(path.fit(l));
  }
  if (!found) throw ValidationError("model selection is degenerate: df >= n at every grid point");
  return out;
}

inline GcvSelection gcv_select(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, std::vector<double> grid,
                               Method method, LassoOptions opts = {}) {
  return select(x, y, std::move(grid), method, Criterion::gcv, opts);
}

inline GcvSelection gcv_select(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, Method method,
                               LassoOptions opts = {}) {
  return gcv_select(x, y, method == Method::ridge ? ridge_grid(x, y) : lasso_grid(x, y), method, opts);
}

// One-step forecast of the random walk with drift: the in-sample mean.
inline double rw_drift_forecast(std::span<const double> window) {
  if (window.empty()) throw ValidationError("random-walk window is empty");
  return std::accumulate(window.begin(), window.end(), 0.0) / static_cast<double>(window.size());
}

// Same document layout as network weights, with empty dense blocks.
inline model::Weights to_weights(const LinearFit& f) {
  model::Topology t;
  t.inputs = f.coef.size();
  t.hidden = 0;
  t.bias = true;
  model::Weights w(t);
  std::copy(f.coef.begin(), f.coef.end(), w.skip().begin());
  w.skip()[t.inputs] = f.intercept;
  return w;
}

inline nlohmann::json to_json(const LinearFit& f) {
  nlohmann::json doc = model::to_json(to_weights(f));
  doc["fit"] = {{"method", to_string(f.method)}, {"lambda", f.lambda}, {"df", f.df}, {"rss", f.rss}};
  if (std::isfinite(f.gcv)) doc["fit"]["gcv"] = f.gcv;
  return doc;
}

inline LinearFit fit_from_json(const nlohmann::json& doc) {
  const model::Weights w = model::weights_from_json(doc);
  if (w.topology().hidden != 0 || !w.topology().bias) throw ValidationError("not a linear fit document");
  LinearFit f;
  const auto skip = w.skip();
  f.coef.assign(skip.begin(), skip.end() - 1);
  f.intercept = skip.back();
  if (doc.contains("fit")) {
    const auto& m = doc.at("fit");
    f.method = m.at("method").get<std::string>() == "lasso" ? Method::lasso : Method::ridge;
    f.lambda = m.at("lambda").get<double>();
    f.df = m.at("df").get<double>();
    f.rss = m.at("rss").get<double>();
    f.gcv = m.value("gcv", std::numeric_limits<double>::quiet_NaN());
  }
  return f;
}

}  // namespace aashnet::baselines
