#pragma once

// Rolling-window one-step forecasting, the long/short portfolio built from the
// forecasts, and the evaluation/report writers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "aashnet/baselines.hpp"
#include "aashnet/dataset.hpp"
#include "aashnet/errors.hpp"
#include "aashnet/hypergrad.hpp"
#include "aashnet/model.hpp"
#include "aashnet/panel.hpp"
#include "aashnet/trainer.hpp"

namespace aashnet::backtest {

struct RollingConfig {
  std::size_t train_size = 500;
  std::size_t horizon = 60;
  std::size_t refit_every = 5;
  std::size_t lags = 1;
  std::vector<std::string> targets;     // empty = every ticker
  std::vector<std::string> predictors;  // empty = every ticker
  std::size_t portfolio_size = 0;       // 0 = every target
  std::uint64_t portfolio_seed = 7;
  double risk_free = 0.0;  // annual
  double periods_per_year = 252.0;

  std::vector<std::size_t> target_indices(const PanelData& p) const { return resolve(p, targets); }
  std::vector<std::size_t> predictor_indices(const PanelData& p) const { return resolve(p, predictors); }

  // Holdout is the last `horizon` periods.
  std::size_t holdout_start(const PanelData& p) const { return p.periods() - horizon; }

  void validate(const PanelData& p) const {
    if (train_size < 2) throw ValidationError("train_size must be at least 2");
    if (horizon < 1) throw ValidationError("horizon must be at least 1");
    if (refit_every < 1) throw ValidationError("refit_every must be at least 1");
    if (lags < 1) throw ValidationError("lag order must be at least 1");
    if (!std::isfinite(risk_free) || !(periods_per_year > 0.0)) {
      throw ValidationError("risk_free must be finite and periods_per_year positive");
    }
    const std::size_t need = train_size + horizon + lags + 1;
    if (p.periods() < need) {
      throw ValidationError("panel has " + std::to_string(p.periods()) + " periods; train_size + horizon + lags + 1 = " +
                            std::to_string(need) + " are needed");
    }
    const auto t = target_indices(p);
    if (portfolio_size > t.size()) throw ValidationError("portfolio_size exceeds the number of targets");
    (void)predictor_indices(p);
  }

 private:
  static std::vector<std::size_t> resolve(const PanelData& p, const std::vector<std::string>& names) {
    std::vector<std::size_t> out;
    if (names.empty()) {
      out.resize(p.width());
      std::iota(out.begin(), out.end(), std::size_t{0});
      return out;
    }
    for (const auto& n : names) {
      const std::size_t j = p.ticker_index(n);
      if (std::find(out.begin(), out.end(), j) != out.end()) throw ValidationError("ticker '" + n + "' listed twice");
      out.push_back(j);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Design matrices. The features observed at time s are lags 1..p of every
// predictor, i.e. returns dated s, s-1, ..., s-p+1; the target is the next
// period's return of the target ticker.

inline std::vector<double> features(const PanelData& p, std::span<const std::size_t> predictors, std::size_t lags,
                                    std::size_t s) {
  if (s + 1 < lags || s >= p.periods()) throw ValidationError("feature row out of range");
  std::vector<double> out;
  out.reserve(predictors.size() * lags);
  for (std::size_t l = 0; l < lags; ++l) {
    for (std::size_t j : predictors) out.push_back(p.at(s - l, j));
  }
  return out;
}

struct Window {
  Dataset data;  // standardized predictors, raw targets
  Standardizer stats;
  std::vector<double> origin;  // standardized features at the forecast origin
  std::size_t target = 0;
  std::size_t origin_index = 0;
};

// Samples s = t-train_size .. t-1, each paired with the return at s+1 <= t.
inline Window build_design(const PanelData& p, const RollingConfig& cfg, std::size_t t, std::size_t target) {
  if (t < cfg.train_size + cfg.lags || t >= p.periods()) {
    throw ValidationError("forecast origin " + std::to_string(t) + " leaves no complete training window");
  }
  if (target >= p.width()) throw ValidationError("target index out of range");
  const auto preds = cfg.predictor_indices(p);
  Window w;
  w.target = target;
  w.origin_index = t;
  w.data = Dataset(cfg.train_size, preds.size() * cfg.lags);
  for (std::size_t i = 0; i < cfg.train_size; ++i) {
    const std::size_t s = t - cfg.train_size + i;
    const auto f = features(p, preds, cfg.lags, s);
    std::copy(f.begin(), f.end(), w.data.x.begin() + static_cast<std::ptrdiff_t>(i * w.data.cols));
    w.data.y[i] = p.at(s + 1, target);
  }
  w.stats = Standardizer::fit(w.data);
  w.stats.apply(w.data);
  w.origin = w.stats.apply(features(p, preds, cfg.lags, t));
  return w;
}

// ---------------------------------------------------------------------------
// Forecasters.

class FittedModel {
 public:
  virtual ~FittedModel() = default;
  // `z` is standardized with the statistics of the window the model was fit on.
  virtual double predict(std::span<const double> z) const = 0;
  virtual nlohmann::json to_json() const = 0;
};

class Forecaster {
 public:
  virtual ~Forecaster() = default;
  virtual std::string name() const = 0;
  // `previous` is this target's last successful fit, if any (warm start).
  virtual std::shared_ptr<const FittedModel> fit(const Window& w, const FittedModel* previous) = 0;
};

class ConstantFit : public FittedModel {
 public:
  explicit ConstantFit(double value) : value_(value) {}
  double predict(std::span<const double>) const override { return value_; }
  nlohmann::json to_json() const override { return {{"forecast", value_}}; }
  double value() const { return value_; }

 private:
  double value_;
};

// Random walk with drift on returns: forecast the window mean.
class RandomWalkForecaster : public Forecaster {
 public:
  std::string name() const override { return "rw"; }
  std::shared_ptr<const FittedModel> fit(const Window& w, const FittedModel*) override {
    return std::make_shared<ConstantFit>(baselines::rw_drift_forecast(w.data.y));
  }
};

class LinearModelFit : public FittedModel {
 public:
  explicit LinearModelFit(baselines::LinearFit f) : fit_(std::move(f)) {}
  double predict(std::span<const double> z) const override { return fit_.predict(z); }
  nlohmann::json to_json() const override { return baselines::to_json(fit_); }
  const baselines::LinearFit& fit() const { return fit_; }

 private:
  baselines::LinearFit fit_;
};

class LinearForecaster : public Forecaster {
 public:
  explicit LinearForecaster(baselines::Method m, baselines::LassoOptions opts = {}) : method_(m), opts_(opts) {}
  std::string name() const override { return baselines::to_string(method_); }
  std::shared_ptr<const FittedModel> fit(const Window& w, const FittedModel*) override {
    const auto x = baselines::design_matrix(w.data);
    const auto y = baselines::target_vector(w.data);
    return std::make_shared<LinearModelFit>(baselines::gcv_select(x, y, method_, opts_).fit);
  }

 private:
  baselines::Method method_;
  baselines::LassoOptions opts_;
};

// Shrinkage strengths only; alpha stays at its neutral 0.5. Hypergradients in
// log-lambda coordinates are small (lambda * dL/dlambda), hence the large rate
// with a capped step.
inline hypergrad::MetaConfig default_meta() {
  hypergrad::MetaConfig m;
  m.iterations = 10;
  m.rate = 1000.0;
  m.max_step = 1.0;
  m.tune_alpha = false;
  return m;
}

struct AashnetOptions {
  std::size_t hidden = 5;
  model::Activation activation = model::Activation::tanh;
  model::HyperParams initial = model::HyperParams::from_natural(1e-3, 1e-3, 0.5);
  std::size_t steps = 500;
  double eta = 0.2;
  double gamma = 0.9;
  std::size_t refit_steps = 0;  // warm-started refits; 0 = steps
  hypergrad::TrainerOptions trainer;
  hypergrad::MetaConfig meta = default_meta();
  double valid_fraction = 0.2;  // tail of each window used as validation
  bool meta_refresh = false;    // re-tune at every refit instead of once per target

  model::Topology topology(std::size_t inputs) const {
    model::Topology t;
    t.inputs = inputs;
    t.hidden = hidden;
    t.activation = activation;
    t.bias = true;
    return t;
  }

  void validate() const {
    if (steps == 0) throw ValidationError("aashnet steps must be positive");
    if (!(eta > 0.0) || !std::isfinite(eta)) throw ValidationError("aashnet eta must be positive");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ValidationError("aashnet gamma must lie in [0, 1)");
    if (!(valid_fraction > 0.0 && valid_fraction < 1.0)) throw ValidationError("valid_fraction must lie in (0, 1)");
    meta.validate();
  }
};

class NetworkFit : public FittedModel {
 public:
  NetworkFit(model::Weights w, model::HyperParams h, TargetScaler ys, std::vector<hypergrad::MetaIteration> meta = {})
      : weights_(std::move(w)), hyper_(h), ys_(ys), meta_(std::move(meta)) {}

  double predict(std::span<const double> z) const override { return ys_.inverse(model::predict(weights_, hyper_, z)); }
  nlohmann::json to_json() const override {
    nlohmann::json doc = model::to_json(weights_, &hyper_);
    doc["target_scale"] = {{"mean", ys_.mean}, {"scale", ys_.scale}};
    return doc;
  }

  const model::Weights& weights() const { return weights_; }
  const model::HyperParams& hyper() const { return hyper_; }
  const TargetScaler& target_scale() const { return ys_; }
  const std::vector<hypergrad::MetaIteration>& meta() const { return meta_; }

 private:
  model::Weights weights_;
  model::HyperParams hyper_;
  TargetScaler ys_;
  std::vector<hypergrad::MetaIteration> meta_;
};

// Trains from `init` without keeping a reversal record.
inline model::Weights fit_network(const model::Topology& topology, const model::HyperParams& h,
                                  const trainer::Schedule& sched, const Dataset& data,
                                  const hypergrad::TrainerOptions& opts, std::span<const double> init) {
  const hypergrad::ModelObjective objective(topology, h, data, opts.make_plan(data.rows));
  trainer::ReversalBuffer buf(trainer::ReversalMode::checkpoint, opts.format, std::max<std::size_t>(sched.size(), 1));
  const trainer::TrainState s = trainer::train(init, sched, objective, buf);
  return model::Weights(topology, s.weights(opts.format));
}

// The skip-layer network. Targets are z-scored per window. The first fit of a
// target tunes (lambda1, lambda2, alpha) by hypergradient descent on a
// time-ordered train/validation split of the window and then retrains on the
// full window from the same initialization; later refits keep those
// hyperparameters and continue from the previous weights.
class AashnetForecaster : public Forecaster {
 public:
  explicit AashnetForecaster(AashnetOptions opts) : opts_(std::move(opts)) { opts_.validate(); }
  std::string name() const override { return "aashnet"; }

  std::shared_ptr<const FittedModel> fit(const Window& w, const FittedModel* previous) override {
    const TargetScaler ys = TargetScaler::fit(w.data.y);
    Dataset data = w.data;
    for (double& v : data.y) v = ys.forward(v);
    const model::Topology topology = opts_.topology(data.cols);

    const auto* prev = dynamic_cast<const NetworkFit*>(previous);
    const bool retune = prev == nullptr || opts_.meta_refresh || !(prev->weights().topology() == topology);
    if (retune) {
      const auto [train, valid] = split_tail(data, opts_.valid_fraction);
      const auto sched = trainer::Schedule::constant(opts_.steps, opts_.eta, opts_.gamma);
      const model::HyperParams start = prev != nullptr ? prev->hyper() : opts_.initial;
      const hypergrad::MetaResult meta =
          hypergrad::meta_optimize(opts_.meta, start, train, valid, sched, topology, opts_.trainer);
      if (meta.history.empty()) throw NumericalError("meta-optimization diverged: " + meta.divergence);
      const model::Weights init = model::initialize(topology, opts_.trainer.seed);
      model::Weights fitted = fit_network(topology, meta.best, meta.best_schedule, data, opts_.trainer, init.flat());
      return std::make_shared<NetworkFit>(std::move(fitted), meta.best, ys, meta.iterations);
    }
    const std::size_t steps = opts_.refit_steps ? opts_.refit_steps : opts_.steps;
    const auto sched = trainer::Schedule::constant(steps, opts_.eta, opts_.gamma);
    model::Weights fitted = fit_network(topology, prev->hyper(), sched, data, opts_.trainer, prev->weights().flat());
    return std::make_shared<NetworkFit>(std::move(fitted), prev->hyper(), ys);
  }

  const AashnetOptions& options() const { return opts_; }

 private:
  AashnetOptions opts_;
};

// ---------------------------------------------------------------------------
// Rolling protocol.

struct ForecastRecord {
  Date date;
  std::size_t period = 0;  // row of the panel being forecast
  std::string ticker;
  std::string model;
  double forecast = 0.0;
  double realized = 0.0;
};

struct FitFailure {
  Date origin;
  std::string ticker;
  std::string message;
};

struct RollingResult {
  std::string model;
  std::vector<ForecastRecord> records;  // ordered by (date, target order)
  std::vector<std::size_t> refit_origins;
  std::vector<FitFailure> failures;
  std::map<std::string, std::shared_ptr<const FittedModel>> last_fits;

  std::size_t refits() const { return refit_origins.size(); }
};

using RollingObserver = std::function<void(std::size_t step, std::size_t steps)>;

// Holdout step k forecasts period tau = T - horizon + k from origin t = tau - 1.
// Every `refit_every` steps each target is refit on its window ending at t;
// in between the last fit is applied to the current origin features
// (standardized with that fit's own statistics). A failed fit is recorded and
// the previous fit is carried; a target with no fit yet gets no record.
inline RollingResult rolling_forecast(const PanelData& p, const RollingConfig& cfg, Forecaster& forecaster,
                                      const RollingObserver& observer = {}) {
  p.validate();
  cfg.validate(p);
  const auto targets = cfg.target_indices(p);
  const auto preds = cfg.predictor_indices(p);
  RollingResult out;
  out.model = forecaster.name();

  struct Slot {
    std::shared_ptr<const FittedModel> fit;
    Standardizer stats;
  };
  std::vector<Slot> slots(targets.size());
  const std::size_t start = cfg.holdout_start(p);
  for (std::size_t k = 0; k < cfg.horizon; ++k) {
    const std::size_t tau = start + k;
    const std::size_t t = tau - 1;
    if (k % cfg.refit_every == 0) {
      out.refit_origins.push_back(t);
      for (std::size_t i = 0; i < targets.size(); ++i) {
        try {
          const Window w = build_design(p, cfg, t, targets[i]);
          auto fitted = forecaster.fit(w, slots[i].fit.get());
          if (!fitted) throw NumericalError("forecaster returned no model");
          slots[i] = {std::move(fitted), w.stats};
        } catch (const std::exception& e) {
          out.failures.push_back({p.dates[t], p.tickers[targets[i]], e.what()});
        }
      }
    }
    const auto raw = features(p, preds, cfg.lags, t);
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (!slots[i].fit) continue;
      const double f = slots[i].fit->predict(slots[i].stats.apply(raw));
      if (!std::isfinite(f)) {
        out.failures.push_back({p.dates[t], p.tickers[targets[i]], "non-finite forecast"});
        continue;
      }
      out.records.push_back({p.dates[tau], tau, p.tickers[targets[i]], out.model, f, p.at(tau, targets[i])});
    }
    if (observer) observer(k + 1, cfg.horizon);
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (slots[i].fit) out.last_fits[p.tickers[targets[i]]] = slots[i].fit;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scores.

struct RmseScore {
  std::vector<std::pair<std::string, double>> per_ticker;  // first-appearance order
  double average = 0.0;
};

inline RmseScore score_rmse(std::span<const ForecastRecord> records) {
  if (records.empty()) throw ValidationError("no forecast records to score");
  std::vector<std::string> order;
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& r : records) {
    auto [it, fresh] = acc.try_emplace(r.ticker, 0.0, 0);
    if (fresh) order.push_back(r.ticker);
    const double e = r.forecast - r.realized;
    it->second.first += e * e;
    ++it->second.second;
  }
  RmseScore s;
  for (const auto& name : order) {
    const auto& [sse, n] = acc.at(name);
    const double rmse = std::sqrt(sse / static_cast<double>(n));
    s.per_ticker.emplace_back(name, rmse);
    s.average += rmse;
  }
  s.average /= static_cast<double>(order.size());
  return s;
}

struct SharpeRatio {
  std::optional<double> value;  // empty when undefined
  std::string flag;             // why it is undefined
};

// mean / sd (n - 1) of excess returns, annualized by sqrt(periods_per_year).
inline SharpeRatio sharpe_ratio(std::span<const double> daily, double risk_free = 0.0, double periods_per_year = 252.0) {
  if (daily.size() < 2) return {std::nullopt, "fewer than two returns"};
  const double rf = risk_free / periods_per_year;
  const auto n = static_cast<double>(daily.size());
  double mean = 0.0;
  for (double r : daily) mean += r - rf;
  mean /= n;
  double ss = 0.0;
  for (double r : daily) ss += (r - rf - mean) * (r - rf - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  // Rounding leaves a residue of order eps*|mean| on a constant series.
  if (!(sd > 1e-12 * std::abs(mean)) || sd == 0.0) return {std::nullopt, "zero variance"};
  return {mean / sd * std::sqrt(periods_per_year), ""};
}

struct PortfolioResult {
  std::vector<Date> dates;
  std::vector<double> daily;   // portfolio return per holdout day
  std::vector<double> wealth;  // compounded, starting from 1
  double cumulative = 0.0;     // wealth.back() - 1
  SharpeRatio sharpe;
  std::vector<std::string> tickers;  // portfolio members
  std::optional<RmseScore> rmse;     // over the portfolio members
  std::size_t flat_days = 0;
  std::vector<std::string> log;
};

inline void compound(PortfolioResult& r, double risk_free, double periods_per_year) {
  r.wealth.clear();
  double w = 1.0;
  for (double d : r.daily) {
    w *= 1.0 + d;
    r.wealth.push_back(w);
  }
  r.cumulative = w - 1.0;
  r.sharpe = sharpe_ratio(r.daily, risk_free, periods_per_year);
}

// Random subset of `m` names, in their original order (Fisher-Yates driven by
// splitmix64, so the choice depends on the seed alone).
inline std::vector<std::string> choose_portfolio(std::vector<std::string> names, std::size_t m, std::uint64_t seed) {
  if (m == 0 || m >= names.size()) return names;
  std::vector<std::size_t> idx(names.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::uint64_t state = seed;
  auto next = [&state] {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  };
  for (std::size_t i = 0; i < m; ++i) std::swap(idx[i], idx[i + next() % (idx.size() - i)]);
  idx.resize(m);
  std::sort(idx.begin(), idx.end());
  std::vector<std::string> out;
  for (std::size_t i : idx) out.push_back(names[i]);
  return out;
}

struct PortfolioOptions {
  std::vector<std::string> tickers;  // empty = every ticker in the records
  double risk_free = 0.0;
  double periods_per_year = 252.0;
};

// Each day: +1/M on names forecast up, -1/M on names forecast down, 0 on a
// zero forecast. A day on which every forecast is zero is held in cash.
inline PortfolioResult portfolio_sim(std::span<const ForecastRecord> records, const PortfolioOptions& opts = {}) {
  if (records.empty()) throw ValidationError("no forecast records for the portfolio");
  PortfolioResult r;
  r.tickers = opts.tickers;
  if (r.tickers.empty()) {
    for (const auto& rec : records) {
      if (std::find(r.tickers.begin(), r.tickers.end(), rec.ticker) == r.tickers.end()) r.tickers.push_back(rec.ticker);
    }
  }
  const auto m = static_cast<double>(r.tickers.size());
  std::map<Date, std::vector<const ForecastRecord*>> by_day;
  std::vector<ForecastRecord> members;
  for (const auto& rec : records) {
    if (std::find(r.tickers.begin(), r.tickers.end(), rec.ticker) == r.tickers.end()) continue;
    by_day[rec.date].push_back(&rec);
    members.push_back(rec);
  }
  if (by_day.empty()) throw ValidationError("no records for the portfolio tickers");
  for (const auto& [date, recs] : by_day) {
    if (recs.size() != r.tickers.size()) {
      throw ContractViolation("day " + format_date(date) + " has " + std::to_string(recs.size()) + " of " +
                              std::to_string(r.tickers.size()) + " portfolio forecasts");
    }
    double ret = 0.0;
    bool any = false;
    for (const auto* rec : recs) {
      if (rec->forecast > 0.0) {
        ret += rec->realized / m;
        any = true;
      } else if (rec->forecast < 0.0) {
        ret -= rec->realized / m;
        any = true;
      }
    }
    if (!any) {
      ++r.flat_days;
      r.log.push_back(format_date(date) + ": all forecasts zero, flat day");
    }
    r.dates.push_back(date);
    r.daily.push_back(ret);
  }
  compound(r, opts.risk_free, opts.periods_per_year);
  r.rmse = score_rmse(members);
  return r;
}

// Buy-and-hold of the benchmark column over the holdout.
inline PortfolioResult buy_and_hold(const PanelData& p, const RollingConfig& cfg) {
  if (!p.benchmark) throw ValidationError("buy-and-hold needs a '" + p.benchmark_name + "' column in the panel");
  cfg.validate(p);
  PortfolioResult r;
  for (std::size_t t = cfg.holdout_start(p); t < p.periods(); ++t) {
    r.dates.push_back(p.dates[t]);
    r.daily.push_back((*p.benchmark)[t]);
  }
  r.tickers = {p.benchmark_name};
  compound(r, cfg.risk_free, cfg.periods_per_year);
  return r;
}

// ---------------------------------------------------------------------------
// Multi-model runs and reports.

struct ModelOutcome {
  std::string name;
  std::optional<RollingResult> rolling;  // absent for buy-and-hold
  std::optional<PortfolioResult> portfolio;
  std::optional<RmseScore> rmse;  // over every target
  std::string failure;            // nonempty when the model could not be evaluated

  bool failed() const { return !failure.empty(); }
};

using ForecasterFactory = std::function<std::unique_ptr<Forecaster>(const std::string& name)>;

inline std::unique_ptr<Forecaster> make_forecaster(const std::string& name, const AashnetOptions& net = {}) {
  if (name == "rw") return std::make_unique<RandomWalkForecaster>();
  if (name == "ridge") return std::make_unique<LinearForecaster>(baselines::Method::ridge);
  if (name == "lasso") return std::make_unique<LinearForecaster>(baselines::Method::lasso);
  if (name == "aashnet") return std::make_unique<AashnetForecaster>(net);
  throw ValidationError("unknown model '" + name + "' (expected aashnet, ridge, lasso, rw or bh)");
}

inline void check_model_names(const std::vector<std::string>& names) {
  if (names.empty()) throw ValidationError("model list is empty");
  for (const auto& n : names) {
    if (n != "aashnet" && n != "ridge" && n != "lasso" && n != "rw" && n != "bh") {
      throw ValidationError("unknown model '" + n + "' (expected aashnet, ridge, lasso, rw or bh)");
    }
    if (std::count(names.begin(), names.end(), n) > 1) throw ValidationError("model '" + n + "' listed twice");
  }
}

// Every model sees the identical schedule and portfolio; a failure in one
// model is recorded and the others still run.
inline std::vector<ModelOutcome> run_models(const PanelData& p, const RollingConfig& cfg,
                                            const std::vector<std::string>& names, const ForecasterFactory& factory,
                                            const std::function<void(const std::string&)>& log = {}) {
  check_model_names(names);
  p.validate();
  cfg.validate(p);
  std::vector<std::string> targets;
  for (std::size_t j : cfg.target_indices(p)) targets.push_back(p.tickers[j]);
  PortfolioOptions popts;
  popts.tickers = choose_portfolio(targets, cfg.portfolio_size, cfg.portfolio_seed);
  popts.risk_free = cfg.risk_free;
  popts.periods_per_year = cfg.periods_per_year;

  std::vector<ModelOutcome> out;
  for (const auto& name : names) {
    ModelOutcome o;
    o.name = name;
    try {
      if (name == "bh") {
        o.portfolio = buy_and_hold(p, cfg);
      } else {
        auto f = factory(name);
        o.rolling = rolling_forecast(p, cfg, *f);
        for (const auto& fail : o.rolling->failures) {
          if (log) log(name + ": fit failed for " + fail.ticker + " at " + format_date(fail.origin) + ": " + fail.message);
        }
        o.rmse = score_rmse(o.rolling->records);
        o.portfolio = portfolio_sim(o.rolling->records, popts);
      }
    } catch (const std::exception& e) {
      o.failure = e.what();
      if (log) log(name + ": " + o.failure);
    }
    out.push_back(std::move(o));
  }
  return out;
}

inline std::string display_name(const std::string& name) {
  if (name == "aashnet") return "AAShNet";
  if (name == "ridge") return "Ridge";
  if (name == "lasso") return "Lasso";
  if (name == "rw") return "RW";
  if (name == "bh") return "B&H";
  return name;
}

inline void write_forecasts_csv(std::ostream& os, const std::vector<ModelOutcome>& outcomes) {
  os << "date,ticker,model,forecast,realized\n";
  for (const auto& o : outcomes) {
    if (!o.rolling) continue;
    for (const auto& r : o.rolling->records) {
      os << format_date(r.date) << ',' << r.ticker << ',' << r.model << ',' << format_double(r.forecast) << ','
         << format_double(r.realized) << '\n';
    }
  }
}

inline nlohmann::json to_json(const RmseScore& s) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [t, v] : s.per_ticker) per[t] = v;
  return {{"average", s.average}, {"per_ticker", per}};
}

inline nlohmann::json metrics_json(const std::vector<ModelOutcome>& outcomes, const RollingConfig& cfg) {
  nlohmann::json models = nlohmann::json::object();
  for (const auto& o : outcomes) {
    nlohmann::json m;
    if (o.failed()) {
      m["failed"] = o.failure;
      models[o.name] = m;
      continue;
    }
    const auto& pr = *o.portfolio;
    m["cumulative_return"] = pr.cumulative;
    m["sharpe"] = pr.sharpe.value ? nlohmann::json(*pr.sharpe.value) : nlohmann::json(nullptr);
    if (!pr.sharpe.flag.empty()) m["sharpe_flag"] = pr.sharpe.flag;
    m["days"] = pr.daily.size();
    m["flat_days"] = pr.flat_days;
    m["portfolio"] = pr.tickers;
    if (o.rmse) {
      m["ave_rmse"] = o.rmse->average;
      m["rmse"] = to_json(*o.rmse).at("per_ticker");
    } else {
      m["ave_rmse"] = nullptr;
    }
    if (pr.rmse) m["portfolio_ave_rmse"] = pr.rmse->average;
    if (o.rolling) {
      m["refits"] = o.rolling->refits();
      nlohmann::json fails = nlohmann::json::array();
      for (const auto& f : o.rolling->failures) {
        fails.push_back({{"origin", format_date(f.origin)}, {"ticker", f.ticker}, {"message", f.message}});
      }
      m["fit_failures"] = fails;
    }
    models[o.name] = m;
  }
  return {{"models", models},
          {"protocol",
           {{"train_size", cfg.train_size},
            {"horizon", cfg.horizon},
            {"refit_every", cfg.refit_every},
            {"lags", cfg.lags},
            {"risk_free", cfg.risk_free},
            {"periods_per_year", cfg.periods_per_year}}}};
}

// Wide layout: one wealth column per model that produced a portfolio.
inline void write_equity_csv(std::ostream& os, const std::vector<ModelOutcome>& outcomes) {
  std::vector<const ModelOutcome*> cols;
  for (const auto& o : outcomes) {
    if (o.portfolio) cols.push_back(&o);
  }
  os << "date";
  for (const auto* o : cols) os << ',' << o->name;
  os << '\n';
  if (cols.empty()) return;
  const auto& dates = cols.front()->portfolio->dates;
  for (std::size_t k = 0; k < dates.size(); ++k) {
    os << format_date(dates[k]);
    for (const auto* o : cols) {
      const auto& w = o->portfolio->wealth;
      os << ',';
      if (k < w.size()) os << format_double(w[k]);
    }
    os << '\n';
  }
}

// Return / Sharpe / Ave(RMSE), one row per model.
inline std::string comparison_table(const std::vector<ModelOutcome>& outcomes) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "Model" << std::right << std::setw(12) << "Return" << std::setw(12) << "Sharpe"
     << std::setw(12) << "Ave(RMSE)" << '\n';
  for (const auto& o : outcomes) {
    os << std::left << std::setw(10) << display_name(o.name) << std::right;
    if (o.failed()) {
      os << "  FAILED: " << o.failure << '\n';
      continue;
    }
    const auto& pr = *o.portfolio;
    os << std::fixed << std::setprecision(4) << std::setw(12) << pr.cumulative;
    if (pr.sharpe.value) {
      os << std::setprecision(3) << std::setw(12) << *pr.sharpe.value;
    } else {
      os << std::setw(12) << "n/a";
    }
    if (o.rmse) {
      os << std::setprecision(5) << std::setw(12) << o.rmse->average;
    } else {
      os << std::setw(12) << "-";
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace aashnet::backtest
