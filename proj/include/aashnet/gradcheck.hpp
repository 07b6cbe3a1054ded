#pragma once

// Self-checks of the differentiation stack: the two-input worked example with
// its primal/tangent/adjoint traces, and randomized comparisons of weight
// gradients, Hessian-vector products and hypergradients against central
// differences evaluated without the tape or the fixed-point trainer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "aashnet/adcore.hpp"
#include "aashnet/dataset.hpp"
#include "aashnet/hypergrad.hpp"
#include "aashnet/model.hpp"
#include "aashnet/trainer.hpp"

namespace aashnet::gradcheck {

struct TraceRow {
  std::string name;  // v1, v2, ...
  std::string op;
  double primal = 0.0;
  double tangent = 0.0;  // d/dx1
  double adjoint = 0.0;
};

struct WorkedExample {
  std::vector<TraceRow> trace;
  double y = 0.0;
  double dy_dx1 = 0.0;
  double dy_dx2 = 0.0;
};

// y = x1 * x2 - cos(x1).
inline WorkedExample worked_example(double x1 = 6.0, double x2 = 3.0) {
  ad::Tape<double> tape;
  const auto v1 = tape.input(ad::Tensor<double>::scalar(x1));
  const auto v2 = tape.input(ad::Tensor<double>::scalar(x2));
  const auto v3 = v1 * v2;
  const auto v4 = cos(v1);
  const auto y = v3 - v4;

  const std::vector<double> e1 = {1.0, 0.0};
  const auto tan = ad::tangents(tape, std::span<const double>(e1));
  const auto adj = ad::adjoints(tape, y);
  const auto grad = ad::reverse_grad(tape, y);

  WorkedExample ex;
  for (std::size_t i = 0; i < tape.size(); ++i) {
    ex.trace.push_back({"v" + std::to_string(i + 1), std::string(ad::op_name(tape.node(i).op)),
                        tape.node(i).value[0], tan[i][0], adj[i][0]});
  }
  ex.y = y.value()[0];
  ex.dy_dx1 = grad[0];
  ex.dy_dx2 = grad[1];
  return ex;
}

inline std::string format_trace(const WorkedExample& ex) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6);
  os << std::left << std::setw(6) << "node" << std::setw(10) << "op" << std::right << std::setw(14) << "primal"
     << std::setw(14) << "tangent" << std::setw(14) << "adjoint" << '\n';
  for (const auto& r : ex.trace) {
    os << std::left << std::setw(6) << r.name << std::setw(10) << r.op << std::right << std::setw(14) << r.primal
       << std::setw(14) << r.tangent << std::setw(14) << r.adjoint << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Reference computations.

inline double norm(std::span<const double> a) {
  double s = 0.0;
  for (double x : a) s += x * x;
  return std::sqrt(s);
}

inline double rel_error(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) d += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(d) / std::max(norm(b), 1e-300);
}

inline double rel_error(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

// Central differences, step rel_step * max(1, |x_k|).
inline std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                       std::span<const double> x, double rel_step = 1e-6) {
  std::vector<double> g(x.size()), p(x.begin(), x.end());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double h = rel_step * std::max(1.0, std::abs(x[k]));
    p[k] = x[k] + h;
    const double up = f(p);
    p[k] = x[k] - h;
    const double down = f(p);
    p[k] = x[k];
    g[k] = (up - down) / (2.0 * h);
  }
  return g;
}

// Train in plain float64 from the standard initialization, then score the
// unregularized validation MSE.
inline double float_pipeline(const model::Topology& topology, const model::HyperParams& h,
                             const trainer::Schedule& sched, const Dataset& train, const Dataset& valid,
                             std::uint64_t seed) {
  const model::Weights init = model::initialize(topology, seed);
  std::vector<double> w(init.flat().begin(), init.flat().end()), v(w.size(), 0.0);
  for (std::size_t t = 0; t < sched.size(); ++t) {
    const auto g = model::grad_w(model::Weights(topology, w), h, train);
    for (std::size_t k = 0; k < w.size(); ++k) {
      v[k] = sched.gamma[t] * v[k] - (1.0 - sched.gamma[t]) * g[k];
      w[k] += sched.eta[t] * v[k];
    }
  }
  return model::mse(model::Weights(topology, w), h, valid);
}

inline Dataset random_dataset(std::size_t n, std::size_t m, std::mt19937_64& rng, double noise = 0.3) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset d(n, m);
  std::vector<double> beta(m);
  for (double& b : beta) b = normal(rng);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      d.at(i, j) = normal(rng);
      s += beta[j] * d.at(i, j);
    }
    d.y[i] = 0.5 * s + 0.5 * std::tanh(d.at(i, 0)) + noise * normal(rng);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Checks.

struct CheckResult {
  std::string name;
  std::size_t cases = 0;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool pass() const { return max_error <= tolerance; }
};

struct Settings {
  std::size_t cases = 50;         // gradient and HVP draws
  std::size_t hyper_cases = 3;    // hypergradient draws (each is seven training runs)
  double tolerance = 1e-5;
  double hyper_tolerance = 1e-3;
  double example_tolerance = 0.005;
  std::uint64_t seed = 1;
};

namespace detail {

struct Draw {
  model::Topology topology;
  Dataset data;
  model::Weights weights;
  model::HyperParams hyper;
};

// m <= 10, J <= 5, both activations. eps_smooth is 1e-3 so the smoothed L1
// term is resolvable by a 1e-6 difference step.
inline Draw draw(std::mt19937_64& rng, std::size_t index) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(0.0, 0.7);
  Draw d;
  d.topology.inputs = 1 + rng() % 10;
  d.topology.hidden = rng() % 6;
  d.topology.activation = index % 2 ? model::Activation::tanh : model::Activation::logistic;
  d.data = random_dataset(12, d.topology.inputs, rng);
  d.weights = model::Weights(d.topology);
  for (double& x : d.weights.flat()) x = n(rng);
  d.hyper = model::HyperParams::from_natural(0.1 * u(rng), 0.5 * u(rng), 0.1 + 0.8 * u(rng), 1e-3);
  return d;
}

}  // namespace detail

inline CheckResult gradient_check(std::size_t cases, std::uint64_t seed, double tolerance) {
  std::mt19937_64 rng(seed);
  CheckResult r{"weight gradient vs central differences", cases, 0.0, tolerance};
  for (std::size_t c = 0; c < cases; ++c) {
    const auto d = detail::draw(rng, c);
    const auto g = model::grad_w(d.weights, d.hyper, d.data);
    const auto fd = fd_gradient(
        [&](std::span<const double> flat) {
          return model::regularized_loss(model::Weights(d.topology, std::vector<double>(flat.begin(), flat.end())),
                                         d.hyper, d.data);
        },
        d.weights.flat());
    r.max_error = std::max(r.max_error, rel_error(g, fd));
  }
  return r;
}

inline CheckResult hvp_check(std::size_t cases, std::uint64_t seed, double tolerance) {
  std::mt19937_64 rng(seed ^ 0x4856ull);
  std::normal_distribution<double> n(0.0, 1.0);
  CheckResult r{"Hessian-vector product vs differenced gradients", cases, 0.0, tolerance};
  for (std::size_t c = 0; c < cases; ++c) {
    const auto d = detail::draw(rng, c);
    std::vector<double> v(d.weights.size());
    for (double& x : v) x = n(rng);
    const model::LossProblem prob(d.topology, d.data);
    const auto hv = prob.hvp(d.weights.flat(), d.hyper, v);
    const double eps = 1e-6;
    std::vector<double> wp(d.weights.flat().begin(), d.weights.flat().end()), wm = wp;
    for (std::size_t k = 0; k < v.size(); ++k) {
      wp[k] += eps * v[k];
      wm[k] -= eps * v[k];
    }
    const auto gp = prob.value_and_grad(wp, d.hyper).grad, gm = prob.value_and_grad(wm, d.hyper).grad;
    std::vector<double> fd(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) fd[k] = (gp[k] - gm[k]) / (2 * eps);
    r.max_error = std::max(r.max_error, rel_error(hv, fd));
  }
  return r;
}

// m = 5, J = 3, 50 training rows, 20 validation rows, 100 steps, full batch.
// gamma = 0.875 is dyadic, so the fixed-point decay is exactly the nominal one
// and the float reference trains the same problem.
inline CheckResult hypergradient_check(std::size_t cases, std::uint64_t seed, double tolerance) {
  CheckResult r{"hypergradient vs differenced training pipeline", cases, 0.0, tolerance};
  std::mt19937_64 rng(seed ^ 0x4847ull);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t c = 0; c < cases; ++c) {
    model::Topology topology;
    topology.inputs = 5;
    topology.hidden = 3;
    const Dataset train = random_dataset(50, 5, rng);
    const Dataset valid = random_dataset(20, 5, rng);
    const auto sched = trainer::Schedule::constant(100, 0.1, 0.875);
    hypergrad::TrainerOptions opts;
    opts.seed = rng();
    const double l1 = 0.005 + 0.02 * u(rng), l2 = 0.01 + 0.09 * u(rng), a = 0.3 + 0.4 * u(rng);
    const auto h = model::HyperParams::from_natural(l1, l2, a);
    const auto g = hypergrad::run_pipeline(topology, h, sched, train, valid, opts).grads;

    auto at = [&](double x1, double x2, double xa) {
      return float_pipeline(topology, model::HyperParams::from_natural(x1, x2, xa, h.eps_smooth), sched, train, valid,
                            opts.seed);
    };
    // Relative steps in lambda: small strengths have sharp curvature.
    const double e1 = 1e-4 * l1, e2 = 1e-4 * l2, ea = 1e-5;
    const double fd1 = (at(l1 + e1, l2, a) - at(l1 - e1, l2, a)) / (2 * e1);
    const double fd2 = (at(l1, l2 + e2, a) - at(l1, l2 - e2, a)) / (2 * e2);
    const double fda = (at(l1, l2, a + ea) - at(l1, l2, a - ea)) / (2 * ea);
    r.max_error = std::max({r.max_error, rel_error(g.d_lambda1, fd1), rel_error(g.d_lambda2, fd2),
                            rel_error(g.d_alpha, fda)});
  }
  return r;
}

struct Report {
  WorkedExample example;
  double example_error = 0.0;  // max |computed - rounded reference values|
  double example_tolerance = 0.0;
  std::vector<CheckResult> checks;

  bool example_pass() const { return example_error <= example_tolerance; }
  bool pass() const {
    return example_pass() && std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.pass(); });
  }
};

inline Report run(const Settings& s) {
  Report r;
  r.example = worked_example();
  r.example_error = std::max({std::abs(r.example.y - 17.04), std::abs(r.example.dy_dx1 - 2.72),
                               std::abs(r.example.dy_dx2 - 6.0)});
  r.example_tolerance = s.example_tolerance;
  r.checks.push_back(gradient_check(s.cases, s.seed, s.tolerance));
  r.checks.push_back(hvp_check(s.cases, s.seed, s.tolerance));
  r.checks.push_back(hypergradient_check(s.hyper_cases, s.seed, s.hyper_tolerance));
  return r;
}

inline std::string format_report(const Report& r) {
  std::ostringstream os;
  os << "worked example: y = x1*x2 - cos(x1) at (6, 3)\n" << format_trace(r.example);
  os << std::fixed << std::setprecision(4);
  os << "y = " << r.example.y << "  dy/dx1 = " << r.example.dy_dx1 << "  dy/dx2 = " << r.example.dy_dx2 << '\n';
  os << std::scientific << std::setprecision(3);
  os << (r.example_pass() ? "PASS" : "FAIL") << "  worked example vs (17.04, 2.72, 6): max abs error "
     << r.example_error << " (tolerance " << r.example_tolerance << ")\n";
  for (const auto& c : r.checks) {
    os << (c.pass() ? "PASS" : "FAIL") << "  " << c.name << ": " << c.cases << " cases, max relative error "
       << c.max_error << " (tolerance " << c.tolerance << ")\n";
  }
  return os.str();
}

}  // namespace aashnet::gradcheck
