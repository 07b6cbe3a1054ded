#pragma once

// Gradients of validation loss with respect to hyperparameters, obtained by
// running the training trajectory backwards.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "aashnet/dataset.hpp"
#include "aashnet/errors.hpp"
#include "aashnet/model.hpp"
#include "aashnet/trainer.hpp"

namespace aashnet::hypergrad {

using model::HyperParams;
using model::Topology;
using model::Weights;
using trainer::BatchPlan;
using trainer::ReversalBuffer;
using trainer::Schedule;
using trainer::TrainState;

struct HypergradResult {
  double d_lambda1 = 0.0;
  double d_lambda2 = 0.0;
  double d_alpha = 0.0;
  std::vector<double> d_eta;
  std::vector<double> d_gamma;
  double valid_loss = 0.0;
  TrainState initial;  // state recovered at the end of the reverse pass
};

// Unregularized validation loss and its derivatives at the final weights.
struct ValidationTerms {
  double loss = 0.0;
  std::vector<double> grad_w;
  double d_alpha = 0.0;  // explicit dependence through the predictions
};

inline double validation_loss(const Weights& w, const HyperParams& h, const Dataset& valid) {
  if (valid.rows == 0) throw ValidationError("validation set is empty");
  return model::mse(w, h, valid);
}

inline ValidationTerms validation_terms(const Topology& topology, std::span<const double> w, const HyperParams& h,
                                        const Dataset& valid) {
  if (valid.rows == 0) throw ValidationError("validation set is empty");
  ValidationTerms out;
  auto vg = model::LossProblem(topology, valid).value_and_grad(w, h, false, out.d_alpha);
  out.loss = vg.value;
  out.grad_w = std::move(vg.grad);
  return out;
}

// Training loss of the network on a dataset, seen through a batch plan.
class ModelObjective {
 public:
  ModelObjective(const Topology& topology, const HyperParams& h, const Dataset& train,
                 BatchPlan plan = BatchPlan::full())
      : topology_(topology), h_(h), train_(train), plan_(std::move(plan)) {
    if (plan_.full_batch()) full_.emplace(topology_, train_);
  }

  std::vector<double> gradient(std::span<const double> w, std::size_t t) const {
    return problem(t).value_and_grad(w, h_).grad;
  }
  model::ValueGrad value_and_gradient(std::span<const double> w, std::size_t t) const {
    return problem(t).value_and_grad(w, h_);
  }
  std::vector<double> hvp(std::span<const double> w, std::size_t t, std::span<const double> v) const {
    return problem(t).hvp(w, h_, v);
  }
  model::MixedPartials mixed(std::span<const double> w, std::size_t t, std::span<const double> v) const {
    return problem(t).mixed_partial_vec(w, h_, v);
  }

 private:
  const model::LossProblem& problem(std::size_t t) const {
    if (full_) return *full_;
    if (!cached_ || cached_->first != t) {
      const auto idx = plan_.indices(t);
      cached_.emplace(t, model::LossProblem(topology_, train_.subset(idx)));
    }
    return cached_->second;
  }

  Topology topology_;
  HyperParams h_;
  Dataset train_;
  BatchPlan plan_;
  std::optional<model::LossProblem> full_;
  mutable std::optional<std::pair<std::size_t, model::LossProblem>> cached_;
};

template <class F>
concept HyperObjective = trainer::GradientOracle<F> &&
    requires(const F& f, std::span<const double> w, std::size_t t, std::span<const double> v) {
      { f.hvp(w, t, v) } -> std::convertible_to<std::vector<double>>;
      { f.mixed(w, t, v) } -> std::convertible_to<model::MixedPartials>;
    };

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

inline void require_finite(double x, const char* what) {
  if (!std::isfinite(x)) throw NonFiniteValue(std::string("non-finite hypergradient accumulator: ") + what);
}

}  // namespace detail

// Walks the trajectory from `final` back to the start, popping the buffer,
// and accumulates d(valid)/d(lambda1, lambda2, alpha, eta_t, gamma_t).
template <HyperObjective F>
HypergradResult reverse_hypergrad(const TrainState& final, ReversalBuffer& buf, const Schedule& sched,
                                  const F& objective, const ValidationTerms& valid) {
  const std::size_t steps = sched.size();
  const std::size_t p = final.w.size();
  if (final.t != steps) throw ContractViolation("final state does not sit at the end of the schedule");
  if (valid.grad_w.size() != p) throw ContractViolation("validation gradient does not match the weights");
  if (buf.mode() == trainer::ReversalMode::exact && buf.depth() != steps * p) {
    throw ContractViolation("reversal buffer depth does not match the trajectory");
  }
  const auto& fmt = buf.format();

  HypergradResult res;
  res.valid_loss = valid.loss;
  res.d_eta.assign(steps, 0.0);
  res.d_gamma.assign(steps, 0.0);
  res.d_alpha = valid.d_alpha;
  std::vector<double> dw = valid.grad_w;
  std::vector<double> dv(p, 0.0);
  std::vector<double> g;
  TrainState state = final;

  for (std::size_t t = steps; t-- > 0;) {
    const std::vector<double> v_next = state.velocity(fmt);
    res.d_eta[t] = detail::dot(dw, v_next);
    TrainState prev = trainer::step_reverse(state, sched, objective, buf, &g);
    for (std::size_t k = 0; k < p; ++k) dv[k] += sched.eta[t] * dw[k];

    const std::vector<double> v_prev = prev.velocity(fmt);
    double dg = 0.0;
    for (std::size_t k = 0; k < p; ++k) dg += dv[k] * (v_prev[k] + g[k]);
    res.d_gamma[t] = dg;

    const std::vector<double> w_prev = prev.weights(fmt);
    const double gamma = fmt.effective_gamma(sched.gamma[t]);
    const double pull = 1.0 - gamma;
    const auto hv = objective.hvp(w_prev, t, dv);
    const model::MixedPartials mp = objective.mixed(w_prev, t, dv);
    for (std::size_t k = 0; k < p; ++k) dw[k] -= pull * hv[k];
    res.d_lambda1 -= pull * mp.lambda1;
    res.d_lambda2 -= pull * mp.lambda2;
    res.d_alpha -= pull * mp.alpha;
    for (double& x : dv) x *= gamma;

    detail::require_finite(res.d_eta[t], "eta");
    detail::require_finite(res.d_gamma[t], "gamma");
    state = std::move(prev);
  }
  detail::require_finite(res.d_lambda1, "lambda1");
  detail::require_finite(res.d_lambda2, "lambda2");
  detail::require_finite(res.d_alpha, "alpha");
  if (!buf.empty()) throw ContractViolation("reversal buffer not empty after the reverse pass");
  res.initial = std::move(state);
  return res;
}

// Model-level entry point: validation terms are computed at the final weights.
inline HypergradResult reverse_hypergrad(const TrainState& final, ReversalBuffer& buf, const Schedule& sched,
                                         const Topology& topology, const HyperParams& h, const Dataset& train,
                                         const Dataset& valid, const BatchPlan& plan = BatchPlan::full()) {
  const auto w_final = final.weights(buf.format());
  const ValidationTerms terms = validation_terms(topology, w_final, h, valid);
  if (sched.size() == 0) {
    HypergradResult res;
    res.valid_loss = terms.loss;
    res.d_alpha = terms.d_alpha;
    res.initial = final;
    return res;
  }
  const ModelObjective objective(topology, h, train, plan);
  return reverse_hypergrad(final, buf, sched, objective, terms);
}

// ---------------------------------------------------------------------------
// Outer loop.

struct TrainerOptions {
  trainer::ReversalMode mode = trainer::ReversalMode::exact;
  trainer::FixedPointFormat format;
  std::size_t checkpoint_every = 10;
  std::size_t batch_size = 0;  // 0 = full batch
  std::uint64_t seed = 0;      // weight initialization and batch plan

  ReversalBuffer make_buffer() const { return ReversalBuffer(mode, format, checkpoint_every); }
  BatchPlan make_plan(std::size_t rows) const {
    return batch_size == 0 ? BatchPlan::full() : BatchPlan::minibatch(rows, batch_size, seed ^ 0xB5ADull);
  }
};

struct MetaConfig {
  std::size_t iterations = 10;
  double rate = 0.1;
  bool tune_lambda1 = true;
  bool tune_lambda2 = true;
  bool tune_alpha = true;
  bool learn_schedules = false;
  // Caps the length of one step in (log lambda1, log lambda2, logit alpha);
  // 0 = uncapped. Hypergradients in log coordinates span orders of magnitude,
  // so a rate large enough to move at all can overshoot badly without it.
  double max_step = 0.0;

  void validate() const {
    if (!(rate >= 0.0) || !std::isfinite(rate)) throw ValidationError("meta rate must be finite and >= 0");
    if (!(max_step >= 0.0) || !std::isfinite(max_step)) throw ValidationError("meta max_step must be finite and >= 0");
    if (!tune_lambda1 && !tune_lambda2 && !tune_alpha) throw ValidationError("meta targets must be nonempty");
  }
};

struct MetaIteration {
  std::size_t iteration = 0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double alpha = 0.0;
  double valid_loss = 0.0;
  double d_lambda1 = 0.0;
  double d_lambda2 = 0.0;
  double d_alpha = 0.0;
  double theta_grad_norm = 0.0;  // over the tuned transformed hyperparameters
  double eta_grad_norm = 0.0;
  double gamma_grad_norm = 0.0;
  bool accepted = false;  // improved on every earlier iterate
};

inline nlohmann::json to_json(const MetaIteration& m) {
  return {{"iteration", m.iteration},
          {"lambda1", m.lambda1},
          {"lambda2", m.lambda2},
          {"alpha", m.alpha},
          {"valid_loss", m.valid_loss},
          {"d_lambda1", m.d_lambda1},
          {"d_lambda2", m.d_lambda2},
          {"d_alpha", m.d_alpha},
          {"theta_grad_norm", m.theta_grad_norm},
          {"eta_grad_norm", m.eta_grad_norm},
          {"gamma_grad_norm", m.gamma_grad_norm},
          {"accepted", m.accepted}};
}

struct MetaResult {
  HyperParams best;
  Weights best_weights;
  Schedule best_schedule;
  std::vector<double> history;  // validation loss per iteration
  std::vector<MetaIteration> iterations;
  bool diverged = false;
  std::string divergence;
};

// One complete inner run: fresh deterministic initialization, training, and
// the reverse pass.
struct PipelineRun {
  Weights weights;
  HypergradResult grads;
};

inline PipelineRun run_pipeline(const Topology& topology, const HyperParams& h, const Schedule& sched,
                                const Dataset& train, const Dataset& valid, const TrainerOptions& opts) {
  const Weights init = model::initialize(topology, opts.seed);
  const BatchPlan plan = opts.make_plan(train.rows);
  const ModelObjective objective(topology, h, train, plan);
  ReversalBuffer buf = opts.make_buffer();
  const TrainState final = trainer::train(init.flat(), sched, objective, buf);
  PipelineRun run{Weights(topology, final.weights(opts.format)), {}};
  const ValidationTerms terms = validation_terms(topology, run.weights.flat(), h, valid);
  run.grads = reverse_hypergrad(final, buf, sched, objective, terms);
  return run;
}

using MetaObserver = std::function<void(const MetaIteration&)>;

// Plain gradient descent on (log lambda1, log lambda2, logit alpha), keeping
// the best validation iterate. Stops early, returning the best so far, if the
// validation loss or a hypergradient stops being finite.
inline MetaResult meta_optimize(const MetaConfig& cfg, const HyperParams& initial, const Dataset& train,
                                const Dataset& valid, Schedule sched, const Topology& topology,
                                const TrainerOptions& opts, const MetaObserver& observer = {}) {
  cfg.validate();
  sched.validate();
  MetaResult out;
  out.best = initial;
  out.best_schedule = sched;
  double best_loss = std::numeric_limits<double>::infinity();
  HyperParams h = initial;

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    PipelineRun run;
    try {
      run = run_pipeline(topology, h, sched, train, valid, opts);
    } catch (const NumericalError& e) {
      out.diverged = true;
      out.divergence = e.what();
      break;
    }
    const HypergradResult& g = run.grads;
    MetaIteration rec;
    rec.iteration = it;
    rec.lambda1 = h.lambda1();
    rec.lambda2 = h.lambda2();
    rec.alpha = h.alpha();
    rec.valid_loss = g.valid_loss;
    rec.d_lambda1 = g.d_lambda1;
    rec.d_lambda2 = g.d_lambda2;
    rec.d_alpha = g.d_alpha;

    // Chain rule into the unconstrained coordinates.
    const double a = h.alpha();
    const double d_t1 = cfg.tune_lambda1 && h.lambda1() > 0.0 ? h.lambda1() * g.d_lambda1 : 0.0;
    const double d_t2 = cfg.tune_lambda2 && h.lambda2() > 0.0 ? h.lambda2() * g.d_lambda2 : 0.0;
    const double d_ta = cfg.tune_alpha ? a * (1.0 - a) * g.d_alpha : 0.0;
    rec.theta_grad_norm = std::sqrt(d_t1 * d_t1 + d_t2 * d_t2 + d_ta * d_ta);
    for (double x : g.d_eta) rec.eta_grad_norm += x * x;
    for (double x : g.d_gamma) rec.gamma_grad_norm += x * x;
    rec.eta_grad_norm = std::sqrt(rec.eta_grad_norm);
    rec.gamma_grad_norm = std::sqrt(rec.gamma_grad_norm);

    if (!std::isfinite(g.valid_loss)) {
      out.diverged = true;
      out.divergence = "validation loss is not finite";
      break;
    }
    rec.accepted = g.valid_loss < best_loss;
    if (rec.accepted) {
      best_loss = g.valid_loss;
      out.best = h;
      out.best_weights = run.weights;
      out.best_schedule = sched;
    }
    out.history.push_back(g.valid_loss);
    out.iterations.push_back(rec);
    if (observer) observer(rec);

    double shrink = 1.0;
    if (cfg.max_step > 0.0 && cfg.rate * rec.theta_grad_norm > cfg.max_step) {
      shrink = cfg.max_step / (cfg.rate * rec.theta_grad_norm);
    }
    h.theta_lambda1 -= shrink * cfg.rate * d_t1;
    h.theta_lambda2 -= shrink * cfg.rate * d_t2;
    h.theta_alpha -= shrink * cfg.rate * d_ta;
    if (cfg.learn_schedules) {
      for (std::size_t t = 0; t < sched.size(); ++t) {
        sched.eta[t] *= std::exp(-cfg.rate * sched.eta[t] * g.d_eta[t]);
        const double gm = sched.gamma[t];
        const double logit = std::log(gm) - std::log1p(-gm) - cfg.rate * gm * (1.0 - gm) * g.d_gamma[t];
        sched.gamma[t] = 1.0 / (1.0 + std::exp(-logit));
      }
    }
  }
  if (out.best_weights.size() == 0) out.best_weights = model::initialize(topology, opts.seed);
  return out;
}

}  // namespace aashnet::hypergrad
