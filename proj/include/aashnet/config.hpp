#pragma once

// Run configuration: one JSON document, every field defaulted, unknown keys
// rejected. Sub-seeds are derived from the top-level seed unless a section
// sets its own; the resolved document records the values actually used.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aashnet/backtest.hpp"
#include "aashnet/errors.hpp"
#include "aashnet/hypergrad.hpp"
#include "aashnet/model.hpp"
#include "aashnet/synth.hpp"
#include "aashnet/trainer.hpp"

namespace aashnet::config {

using nlohmann::json;

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

enum SeedStream : std::uint64_t { kSynth = 1, kTrainer = 2, kPortfolio = 3, kGradcheck = 4 };

struct DataSection {
  std::string panel;  // CSV path; empty = generate from the synth section
  std::string layout = "wide";
  std::string benchmark_column = "index";
  std::string target;  // train/hyperopt ticker; empty = first
  std::size_t window = 500;
  std::size_t lags = 1;
  std::int64_t origin = -1;  // forecast origin row; -1 = last row
  bool operator==(const DataSection&) const = default;
};

struct TopologySection {
  std::size_t hidden = 5;
  std::string activation = "tanh";
  bool operator==(const TopologySection&) const = default;
};

struct HyperSection {
  double lambda1 = 1e-3;
  double lambda2 = 1e-3;
  double alpha = 0.5;
  double eps_smooth = 1e-6;
  bool operator==(const HyperSection&) const = default;
};

struct ScheduleSection {
  std::size_t steps = 500;
  double eta = 0.2;
  double gamma = 0.9;
  std::vector<double> eta_per_step;    // overrides eta when nonempty
  std::vector<double> gamma_per_step;  // overrides gamma when nonempty
  bool operator==(const ScheduleSection&) const = default;
};

struct TrainerSection {
  std::string mode = "exact";
  int frac_bits = 32;
  int decay_bits = 16;
  std::size_t checkpoint_every = 10;
  std::size_t batch_size = 0;
  std::uint64_t seed = 0;
  bool operator==(const TrainerSection&) const = default;
};

struct MetaSection {
  std::size_t iterations = 10;
  double rate = 1000.0;
  double max_step = 1.0;
  std::vector<std::string> targets = {"lambda1", "lambda2"};
  bool learn_schedules = false;
  double valid_fraction = 0.2;
  bool operator==(const MetaSection&) const = default;
};

struct BacktestSection {
  std::size_t train_size = 500;
  std::size_t horizon = 60;
  std::size_t refit_every = 5;
  std::size_t lags = 1;
  std::vector<std::string> targets;
  std::vector<std::string> predictors;
  std::size_t portfolio_size = 0;
  std::uint64_t portfolio_seed = 0;
  std::string rule = "equal_weight_long_short";
  double risk_free = 0.0;
  double periods_per_year = 252.0;
  std::vector<std::string> models = {"aashnet", "ridge", "lasso", "rw", "bh"};
  bool meta_refresh = false;
  std::size_t refit_steps = 0;
  bool operator==(const BacktestSection&) const = default;
};

struct SynthSection {
  std::string kind = "linear_var";
  std::size_t tickers = 10;
  std::size_t periods = 1500;
  std::uint64_t seed = 0;
  double sigma = 0.01;
  double drift = 0.0;
  double density = 0.2;
  double radius = 0.7;
  std::size_t burn_in = 250;
  std::size_t factors = 3;
  double factor_gain = 1.0;
  double factor_sharpness = 2.0;
  double nonlinear_radius = 0.3;
  bool index_column = true;
  std::string first_date = "2000-01-03";
  bool operator==(const SynthSection&) const = default;
};

struct GradcheckSection {
  std::size_t cases = 50;        // gradient and Hessian-vector draws
  std::size_t hyper_cases = 3;   // hypergradient draws
  double tolerance = 1e-5;        // gradient and Hessian-vector checks
  double hyper_tolerance = 1e-3;  // hypergradient check
  double example_tolerance = 0.005;
  std::uint64_t seed = 0;
  bool operator==(const GradcheckSection&) const = default;
};

struct OutputSection {
  std::string directory = "out";
  bool operator==(const OutputSection&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 1;
  DataSection data;
  TopologySection topology;
  HyperSection hyper;
  ScheduleSection schedule;
  TrainerSection trainer;
  MetaSection meta;
  BacktestSection backtest;
  SynthSection synth;
  GradcheckSection gradcheck;
  OutputSection output;
  bool operator==(const RunConfig&) const = default;

  // Conversions into module options. Validation happens here, so a bad value
  // is reported before any work starts.
  model::Topology topology_for(std::size_t inputs) const {
    model::Topology t;
    t.inputs = inputs;
    t.hidden = topology.hidden;
    t.activation = model::activation_from_string(topology.activation);
    t.bias = true;
    t.validate();
    return t;
  }

  model::HyperParams hyper_params() const {
    return model::HyperParams::from_natural(hyper.lambda1, hyper.lambda2, hyper.alpha, hyper.eps_smooth);
  }

  trainer::Schedule schedule_value() const {
    trainer::Schedule s = trainer::Schedule::constant(schedule.steps, schedule.eta, schedule.gamma);
    if (!schedule.eta_per_step.empty()) {
      if (schedule.eta_per_step.size() != schedule.steps) throw ValidationError("schedule.eta_per_step needs one value per step");
      s.eta = schedule.eta_per_step;
    }
    if (!schedule.gamma_per_step.empty()) {
      if (schedule.gamma_per_step.size() != schedule.steps) {
        throw ValidationError("schedule.gamma_per_step needs one value per step");
      }
      s.gamma = schedule.gamma_per_step;
    }
    if (s.size() == 0) throw ValidationError("schedule.steps must be positive");
    s.validate();
    return s;
  }

  hypergrad::TrainerOptions trainer_options() const {
    hypergrad::TrainerOptions o;
    if (trainer.mode == "exact") {
      o.mode = trainer::ReversalMode::exact;
    } else if (trainer.mode == "checkpoint") {
      o.mode = trainer::ReversalMode::checkpoint;
    } else {
      throw ValidationError("trainer.mode must be 'exact' or 'checkpoint'");
    }
    if (trainer.checkpoint_every == 0) throw ValidationError("trainer.checkpoint_every must be positive");
    o.format.frac_bits = trainer.frac_bits;
    o.format.decay_bits = trainer.decay_bits;
    o.format.validate();
    o.checkpoint_every = trainer.checkpoint_every;
    o.batch_size = trainer.batch_size;
    o.seed = trainer.seed;
    return o;
  }

  hypergrad::MetaConfig meta_config() const {
    hypergrad::MetaConfig m;
    m.iterations = meta.iterations;
    m.rate = meta.rate;
    m.max_step = meta.max_step;
    m.learn_schedules = meta.learn_schedules;
    m.tune_lambda1 = m.tune_lambda2 = m.tune_alpha = false;
    for (const auto& t : meta.targets) {
      if (t == "lambda1") {
        m.tune_lambda1 = true;
      } else if (t == "lambda2") {
        m.tune_lambda2 = true;
      } else if (t == "alpha") {
        m.tune_alpha = true;
      } else {
        throw ValidationError("meta.targets entries must be lambda1, lambda2 or alpha (got '" + t + "')");
      }
    }
    if (!(meta.valid_fraction > 0.0 && meta.valid_fraction < 1.0)) {
      throw ValidationError("meta.valid_fraction must lie in (0, 1)");
    }
    m.validate();
    return m;
  }

  backtest::RollingConfig rolling() const {
    if (backtest.rule != "equal_weight_long_short") {
      throw ValidationError("backtest.rule must be 'equal_weight_long_short'");
    }
    backtest::RollingConfig r;
    r.train_size = backtest.train_size;
    r.horizon = backtest.horizon;
    r.refit_every = backtest.refit_every;
    r.lags = backtest.lags;
    r.targets = backtest.targets;
    r.predictors = backtest.predictors;
    r.portfolio_size = backtest.portfolio_size;
    r.portfolio_seed = backtest.portfolio_seed;
    r.risk_free = backtest.risk_free;
    r.periods_per_year = backtest.periods_per_year;
    return r;
  }

  backtest::AashnetOptions aashnet_options() const {
    backtest::AashnetOptions o;
    o.hidden = topology.hidden;
    o.activation = model::activation_from_string(topology.activation);
    o.initial = hyper_params();
    const auto s = schedule_value();
    if (!schedule.eta_per_step.empty() || !schedule.gamma_per_step.empty()) {
      throw ValidationError("backtests use a constant schedule; drop eta_per_step/gamma_per_step");
    }
    o.steps = s.size();
    o.eta = schedule.eta;
    o.gamma = schedule.gamma;
    o.refit_steps = backtest.refit_steps;
    o.trainer = trainer_options();
    o.meta = meta_config();
    o.valid_fraction = meta.valid_fraction;
    o.meta_refresh = backtest.meta_refresh;
    o.validate();
    return o;
  }

  synth::Config synth_config() const {
    synth::Config c;
    c.kind = synth::kind_from_string(synth.kind);
    c.tickers = synth.tickers;
    c.periods = synth.periods;
    c.seed = synth.seed;
    c.sigma = synth.sigma;
    c.drift = synth.drift;
    c.density = synth.density;
    c.radius = synth.radius;
    c.burn_in = synth.burn_in;
    c.factors = synth.factors;
    c.factor_gain = synth.factor_gain;
    c.factor_sharpness = synth.factor_sharpness;
    c.nonlinear_radius = synth.nonlinear_radius;
    c.index_column = synth.index_column;
    c.first_date = synth.first_date;
    c.validate();
    return c;
  }

  // Everything that can be checked without data.
  void validate() const {
    if (data.layout != "wide") throw ValidationError("data.layout must be 'wide'");
    if (data.window < 2) throw ValidationError("data.window must be at least 2");
    if (data.lags < 1) throw ValidationError("data.lags must be at least 1");
    (void)topology_for(1);
    (void)hyper_params();
    (void)schedule_value();
    (void)trainer_options();
    (void)meta_config();
    (void)rolling();
    backtest::check_model_names(backtest.models);
    (void)synth_config();
    if (gradcheck.cases == 0 || gradcheck.hyper_cases == 0) throw ValidationError("gradcheck case counts must be positive");
    if (!(gradcheck.tolerance >= 0.0) || !(gradcheck.hyper_tolerance >= 0.0) || !(gradcheck.example_tolerance >= 0.0)) {
      throw ValidationError("gradcheck tolerances must be >= 0");
    }
    if (output.directory.empty()) throw ValidationError("output.directory must not be empty");
  }
};

// ---------------------------------------------------------------------------
// Strict reading.

namespace detail {

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError("'" + path_ + "' must be a JSON object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  template <class T>
  void read(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const json& v = j_.at(key);
    const std::string where = path_.empty() ? key : path_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ValidationError("'" + where + "' must be true or false");
      out = v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ValidationError("'" + where + "' must be a string");
      out = v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ValidationError("'" + where + "' must be a number");
      out = v.get<T>();
      if (!std::isfinite(out)) throw ValidationError("'" + where + "' must be finite");
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) throw ValidationError("'" + where + "' must be a non-negative integer");
      out = v.get<T>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ValidationError("'" + where + "' must be an integer");
      out = v.get<T>();
    } else {
      // vectors
      if (!v.is_array()) throw ValidationError("'" + where + "' must be an array");
      out.clear();
      for (const auto& e : v) {
        using E = typename T::value_type;
        if constexpr (std::is_same_v<E, std::string>) {
          if (!e.is_string()) throw ValidationError("'" + where + "' entries must be strings");
        } else {
          if (!e.is_number()) throw ValidationError("'" + where + "' entries must be numbers");
        }
        out.push_back(e.get<E>());
      }
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ValidationError("unknown key '" + (path_.empty() ? k : path_ + "." + k) + "'");
    }
  }

  const json& sub(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

// Parses a document; seeds left at 0 are filled from the top-level seed.
inline RunConfig from_json(const json& doc, std::optional<std::uint64_t> seed_override = std::nullopt) {
  RunConfig c;
  detail::Section top(doc, "");
  top.read("seed", c.seed);
  bool explicit_seed[4] = {false, false, false, false};
  auto section = [&](const char* name, auto&& body) {
    if (!top.has(name)) return;
    detail::Section s(top.sub(name), name);
    body(s);
    s.finish();
  };
  section("data", [&](detail::Section& s) {
    s.read("panel", c.data.panel);
    s.read("layout", c.data.layout);
    s.read("benchmark_column", c.data.benchmark_column);
    s.read("target", c.data.target);
    s.read("window", c.data.window);
    s.read("lags", c.data.lags);
    s.read("origin", c.data.origin);
  });
  section("topology", [&](detail::Section& s) {
    s.read("hidden", c.topology.hidden);
    s.read("activation", c.topology.activation);
  });
  section("hyper", [&](detail::Section& s) {
    s.read("lambda1", c.hyper.lambda1);
    s.read("lambda2", c.hyper.lambda2);
    s.read("alpha", c.hyper.alpha);
    s.read("eps_smooth", c.hyper.eps_smooth);
  });
  section("schedule", [&](detail::Section& s) {
    s.read("steps", c.schedule.steps);
    s.read("eta", c.schedule.eta);
    s.read("gamma", c.schedule.gamma);
    s.read("eta_per_step", c.schedule.eta_per_step);
    s.read("gamma_per_step", c.schedule.gamma_per_step);
  });
  section("trainer", [&](detail::Section& s) {
    s.read("mode", c.trainer.mode);
    s.read("frac_bits", c.trainer.frac_bits);
    s.read("decay_bits", c.trainer.decay_bits);
    s.read("checkpoint_every", c.trainer.checkpoint_every);
    s.read("batch_size", c.trainer.batch_size);
    explicit_seed[1] = s.has("seed");
    s.read("seed", c.trainer.seed);
  });
  section("meta", [&](detail::Section& s) {
    s.read("iterations", c.meta.iterations);
    s.read("rate", c.meta.rate);
    s.read("max_step", c.meta.max_step);
    s.read("targets", c.meta.targets);
    s.read("learn_schedules", c.meta.learn_schedules);
    s.read("valid_fraction", c.meta.valid_fraction);
  });
  section("backtest", [&](detail::Section& s) {
    s.read("train_size", c.backtest.train_size);
    s.read("horizon", c.backtest.horizon);
    s.read("refit_every", c.backtest.refit_every);
    s.read("lags", c.backtest.lags);
    s.read("targets", c.backtest.targets);
    s.read("predictors", c.backtest.predictors);
    s.read("portfolio_size", c.backtest.portfolio_size);
    explicit_seed[2] = s.has("portfolio_seed");
    s.read("portfolio_seed", c.backtest.portfolio_seed);
    s.read("rule", c.backtest.rule);
    s.read("risk_free", c.backtest.risk_free);
    s.read("periods_per_year", c.backtest.periods_per_year);
    s.read("models", c.backtest.models);
    s.read("meta_refresh", c.backtest.meta_refresh);
    s.read("refit_steps", c.backtest.refit_steps);
  });
  section("synth", [&](detail::Section& s) {
    s.read("kind", c.synth.kind);
    s.read("tickers", c.synth.tickers);
    s.read("periods", c.synth.periods);
    explicit_seed[0] = s.has("seed");
    s.read("seed", c.synth.seed);
    s.read("sigma", c.synth.sigma);
    s.read("drift", c.synth.drift);
    s.read("density", c.synth.density);
    s.read("radius", c.synth.radius);
    s.read("burn_in", c.synth.burn_in);
    s.read("factors", c.synth.factors);
    s.read("factor_gain", c.synth.factor_gain);
    s.read("factor_sharpness", c.synth.factor_sharpness);
    s.read("nonlinear_radius", c.synth.nonlinear_radius);
    s.read("index_column", c.synth.index_column);
    s.read("first_date", c.synth.first_date);
  });
  section("gradcheck", [&](detail::Section& s) {
    s.read("cases", c.gradcheck.cases);
    s.read("hyper_cases", c.gradcheck.hyper_cases);
    s.read("tolerance", c.gradcheck.tolerance);
    s.read("hyper_tolerance", c.gradcheck.hyper_tolerance);
    s.read("example_tolerance", c.gradcheck.example_tolerance);
    explicit_seed[3] = s.has("seed");
    s.read("seed", c.gradcheck.seed);
  });
  section("output", [&](detail::Section& s) { s.read("directory", c.output.directory); });
  top.finish();

  // A command-line seed replaces the top-level seed and every sub-seed.
  if (seed_override) {
    c.seed = *seed_override;
    for (bool& e : explicit_seed) e = false;
  }
  if (!explicit_seed[0]) c.synth.seed = derive_seed(c.seed, kSynth);
  if (!explicit_seed[1]) c.trainer.seed = derive_seed(c.seed, kTrainer);
  if (!explicit_seed[2]) c.backtest.portfolio_seed = derive_seed(c.seed, kPortfolio);
  if (!explicit_seed[3]) c.gradcheck.seed = derive_seed(c.seed, kGradcheck);
  c.validate();
  return c;
}

// Fully resolved document (every field, derived seeds written out).
inline json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"data",
           {{"panel", c.data.panel},
            {"layout", c.data.layout},
            {"benchmark_column", c.data.benchmark_column},
            {"target", c.data.target},
            {"window", c.data.window},
            {"lags", c.data.lags},
            {"origin", c.data.origin}}},
          {"topology", {{"hidden", c.topology.hidden}, {"activation", c.topology.activation}}},
          {"hyper",
           {{"lambda1", c.hyper.lambda1},
            {"lambda2", c.hyper.lambda2},
            {"alpha", c.hyper.alpha},
            {"eps_smooth", c.hyper.eps_smooth}}},
          {"schedule",
           {{"steps", c.schedule.steps},
            {"eta", c.schedule.eta},
            {"gamma", c.schedule.gamma},
            {"eta_per_step", c.schedule.eta_per_step},
            {"gamma_per_step", c.schedule.gamma_per_step}}},
          {"trainer",
           {{"mode", c.trainer.mode},
            {"frac_bits", c.trainer.frac_bits},
            {"decay_bits", c.trainer.decay_bits},
            {"checkpoint_every", c.trainer.checkpoint_every},
            {"batch_size", c.trainer.batch_size},
            {"seed", c.trainer.seed}}},
          {"meta",
           {{"iterations", c.meta.iterations},
            {"rate", c.meta.rate},
            {"max_step", c.meta.max_step},
            {"targets", c.meta.targets},
            {"learn_schedules", c.meta.learn_schedules},
            {"valid_fraction", c.meta.valid_fraction}}},
          {"backtest",
           {{"train_size", c.backtest.train_size},
            {"horizon", c.backtest.horizon},
            {"refit_every", c.backtest.refit_every},
            {"lags", c.backtest.lags},
            {"targets", c.backtest.targets},
            {"predictors", c.backtest.predictors},
            {"portfolio_size", c.backtest.portfolio_size},
            {"portfolio_seed", c.backtest.portfolio_seed},
            {"rule", c.backtest.rule},
            {"risk_free", c.backtest.risk_free},
            {"periods_per_year", c.backtest.periods_per_year},
            {"models", c.backtest.models},
            {"meta_refresh", c.backtest.meta_refresh},
            {"refit_steps", c.backtest.refit_steps}}},
          {"synth",
           {{"kind", c.synth.kind},
            {"tickers", c.synth.tickers},
            {"periods", c.synth.periods},
            {"seed", c.synth.seed},
            {"sigma", c.synth.sigma},
            {"drift", c.synth.drift},
            {"density", c.synth.density},
            {"radius", c.synth.radius},
            {"burn_in", c.synth.burn_in},
            {"factors", c.synth.factors},
            {"factor_gain", c.synth.factor_gain},
            {"factor_sharpness", c.synth.factor_sharpness},
            {"nonlinear_radius", c.synth.nonlinear_radius},
            {"index_column", c.synth.index_column},
            {"first_date", c.synth.first_date}}},
          {"gradcheck",
           {{"cases", c.gradcheck.cases},
            {"hyper_cases", c.gradcheck.hyper_cases},
            {"tolerance", c.gradcheck.tolerance},
            {"hyper_tolerance", c.gradcheck.hyper_tolerance},
            {"example_tolerance", c.gradcheck.example_tolerance},
            {"seed", c.gradcheck.seed}}},
          {"output", {{"directory", c.output.directory}}}};
}

inline json parse_document(std::istream& in, const std::string& name) {
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("cannot parse " + name + ": " + e.what());
  }
}

inline RunConfig load(const std::string& path, std::optional<std::uint64_t> seed_override = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config '" + path + "'");
  return from_json(parse_document(in, path), seed_override);
}

}  // namespace aashnet::config
