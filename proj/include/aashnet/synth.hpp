#pragma once

// Synthetic return panels with a known generating process.

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "aashnet/errors.hpp"
#include "aashnet/panel.hpp"

namespace aashnet::synth {

enum class Kind { linear_var, nonlinear, random_walk };

inline std::string to_string(Kind k) {
  switch (k) {
    case Kind::linear_var: return "linear_var";
    case Kind::nonlinear: return "nonlinear";
    case Kind::random_walk: return "random_walk";
  }
  return "?";
}

inline Kind kind_from_string(const std::string& s) {
  if (s == "linear_var") return Kind::linear_var;
  if (s == "nonlinear") return Kind::nonlinear;
  if (s == "random_walk") return Kind::random_walk;
  throw ValidationError("unknown synth kind '" + s + "'");
}

struct Config {
  Kind kind = Kind::linear_var;
  std::size_t tickers = 10;
  std::size_t periods = 1500;
  std::uint64_t seed = 1;
  double sigma = 0.01;    // innovation sd
  double drift = 0.0;     // unconditional mean return
  double density = 0.2;   // share of nonzero linear coefficients
  double radius = 0.7;    // spectral radius of the linear part (linear_var)
  std::size_t burn_in = 250;
  // nonlinear: sum_k a_ik tanh(b_k . x / sigma) + sparse linear part
  std::size_t factors = 3;
  double factor_gain = 1.0;     // sd of a_ik in units of sigma
  double factor_sharpness = 2.0;
  double nonlinear_radius = 0.3;
  bool index_column = true;     // equal-weight mean of the tickers
  std::string first_date = "2000-01-03";

  void validate() const {
    if (tickers == 0) throw ValidationError("synth.tickers must be positive");
    if (periods < 2) throw ValidationError("synth.periods must be at least 2");
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ValidationError("synth.sigma must be finite and >= 0");
    if (!std::isfinite(drift)) throw ValidationError("synth.drift must be finite");
    if (!(density >= 0.0 && density <= 1.0)) throw ValidationError("synth.density must lie in [0, 1]");
    if (!(radius >= 0.0 && radius < 1.0)) throw ValidationError("synth.radius must lie in [0, 1)");
    if (!(nonlinear_radius >= 0.0 && nonlinear_radius < 1.0)) {
      throw ValidationError("synth.nonlinear_radius must lie in [0, 1)");
    }
    if (!(factor_gain >= 0.0) || !(factor_sharpness >= 0.0)) {
      throw ValidationError("synth factor parameters must be >= 0");
    }
    if (!parse_date(first_date)) throw ValidationError("synth.first_date is not a YYYY-MM-DD date");
  }
};

struct Generated {
  PanelData panel;
  Eigen::MatrixXd linear;  // m x m, x_{t+1} - mu = linear (x_t - mu) + ...
  Eigen::MatrixXd loadings;    // m x K (nonlinear only)
  Eigen::MatrixXd directions;  // K x m (nonlinear only)
};

inline double spectral_radius(const Eigen::MatrixXd& a) {
  if (a.size() == 0) return 0.0;
  Eigen::EigenSolver<Eigen::MatrixXd> es(a, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

namespace detail {

// Sparse matrix with entries of magnitude in [0.3, 1), rescaled so its
// spectral radius equals `radius` (never scaled up past it).
inline Eigen::MatrixXd sparse_stable(std::size_t m, double density, double radius, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      const double keep = unit(rng);
      const double mag = 0.3 + 0.7 * unit(rng);
      const double sign = unit(rng) < 0.5 ? -1.0 : 1.0;
      if (keep < density) a(i, j) = sign * mag;
    }
  }
  const double rho = spectral_radius(a);
  if (rho > 0.0) a *= radius / rho;
  return a;
}

}  // namespace detail

inline Generated generate(const Config& cfg) {
  cfg.validate();
  const std::size_t m = cfg.tickers;
  const auto mi = static_cast<Eigen::Index>(m);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Generated g;
  g.linear = Eigen::MatrixXd::Zero(mi, mi);
  if (cfg.kind == Kind::linear_var) {
    g.linear = detail::sparse_stable(m, cfg.density, cfg.radius, rng);
  } else if (cfg.kind == Kind::nonlinear) {
    g.linear = detail::sparse_stable(m, cfg.density, cfg.nonlinear_radius, rng);
    const auto k = static_cast<Eigen::Index>(cfg.factors);
    g.loadings = Eigen::MatrixXd::Zero(mi, k);
    g.directions = Eigen::MatrixXd::Zero(k, mi);
    for (Eigen::Index r = 0; r < k; ++r) {
      for (Eigen::Index j = 0; j < mi; ++j) g.directions(r, j) = normal(rng);
      g.directions.row(r) *= cfg.factor_sharpness / g.directions.row(r).norm();
    }
    for (Eigen::Index i = 0; i < mi; ++i) {
      for (Eigen::Index r = 0; r < k; ++r) g.loadings(i, r) = cfg.factor_gain * normal(rng);
    }
  }
  // The factor terms are expressed relative to the noise scale.
  const double scale = cfg.sigma > 0.0 ? cfg.sigma : 0.01;

  std::vector<double> x(m), next(m);
  auto step = [&](bool noisy) {
    for (std::size_t i = 0; i < m; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += g.linear(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * (x[j] - cfg.drift);
      next[i] = cfg.drift + acc;
    }
    if (cfg.kind == Kind::nonlinear) {
      for (Eigen::Index r = 0; r < g.directions.rows(); ++r) {
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j) z += g.directions(r, static_cast<Eigen::Index>(j)) * (x[j] - cfg.drift) / scale;
        const double h = std::tanh(z);
        for (std::size_t i = 0; i < m; ++i) next[i] += scale * g.loadings(static_cast<Eigen::Index>(i), r) * h;
      }
    }
    if (noisy) {
      for (std::size_t i = 0; i < m; ++i) next[i] += cfg.sigma * normal(rng);
    }
    x.swap(next);
  };

  if (cfg.sigma > 0.0) {
    for (double& v : x) v = cfg.drift + cfg.sigma * normal(rng);
    for (std::size_t t = 0; t < cfg.burn_in; ++t) step(true);
  } else {
    // Noiseless: start away from the fixed point so the recursion is visible.
    for (double& v : x) v = cfg.drift + scale * normal(rng);
  }

  PanelData& p = g.panel;
  p.dates = business_days(*parse_date(cfg.first_date), cfg.periods);
  for (std::size_t j = 0; j < m; ++j) {
    const std::string n = std::to_string(j + 1);
    p.tickers.push_back(n.size() < 2 ? "s0" + n : "s" + n);
  }
  p.returns.reserve(cfg.periods * m);
  for (std::size_t t = 0; t < cfg.periods; ++t) {
    if (t > 0) step(cfg.sigma > 0.0);
    p.returns.insert(p.returns.end(), x.begin(), x.end());
  }
  for (double v : p.returns) {
    if (!std::isfinite(v)) throw NumericalError("synthetic generator produced a non-finite value");
  }
  if (cfg.index_column) {
    p.benchmark.emplace(cfg.periods);
    for (std::size_t t = 0; t < cfg.periods; ++t) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += p.at(t, j);
      (*p.benchmark)[t] = s / static_cast<double>(m);
    }
  }
  return g;
}

}  // namespace aashnet::synth
