#pragma once

// The commands behind the `aashnet` binary. Each one is a pure function of
// the resolved configuration and its input files; everything it writes goes
// under the output directory, next to resolved_config.json.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aashnet/backtest.hpp"
#include "aashnet/config.hpp"
#include "aashnet/errors.hpp"
#include "aashnet/gradcheck.hpp"
#include "aashnet/hypergrad.hpp"
#include "aashnet/panel.hpp"
#include "aashnet/synth.hpp"

namespace aashnet::cli {

using config::RunConfig;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kValidation = 1, kNumerical = 2 };

struct Overrides {
  std::optional<std::string> output;
  std::optional<std::uint64_t> seed;
  std::optional<std::vector<std::string>> models;
};

inline RunConfig resolve(const std::string& config_path, const Overrides& o) {
  RunConfig c = config::load(config_path, o.seed);
  if (o.output) c.output.directory = *o.output;
  if (o.models) {
    backtest::check_model_names(*o.models);
    c.backtest.models = *o.models;
  }
  c.validate();
  return c;
}

namespace detail {

inline std::filesystem::path prepare_output(const RunConfig& c) {
  const std::filesystem::path dir(c.output.directory);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ValidationError("cannot create output directory '" + dir.string() + "': " + ec.message());
  std::ofstream os(dir / "resolved_config.json");
  if (!os) throw ValidationError("cannot write to '" + dir.string() + "'");
  os << config::to_json(c).dump(2) << '\n';
  return dir;
}

inline std::ofstream open(const std::filesystem::path& p) {
  std::ofstream os(p);
  if (!os) throw ValidationError("cannot write '" + p.string() + "'");
  return os;
}

inline PanelData load_panel(const RunConfig& c, std::ostream& err) {
  if (c.data.panel.empty()) return synth::generate(c.synth_config()).panel;
  IngestOptions opts;
  opts.benchmark_column = c.data.benchmark_column;
  IngestReport rep = ingest_csv(c.data.panel, opts);
  for (const auto& w : rep.warnings) err << "warning: " << w << '\n';
  rep.panel.validate();
  return std::move(rep.panel);
}

// Training window for train/hyperopt: `window` samples ending at the origin,
// every ticker's lags as predictors, standardized with the window's own stats.
struct TrainingProblem {
  backtest::Window window;
  Dataset data;  // standardized x, z-scored y
  TargetScaler ys;
  std::string target;
  Date origin_date;
};

inline TrainingProblem training_problem(const RunConfig& c, const PanelData& p) {
  backtest::RollingConfig r;
  r.train_size = c.data.window;
  r.lags = c.data.lags;
  r.horizon = 1;
  const std::size_t target = c.data.target.empty() ? 0 : p.ticker_index(c.data.target);
  if (c.data.origin < -1) throw ValidationError("data.origin must be -1 (last row) or a row index");
  const std::size_t t = c.data.origin < 0 ? p.periods() - 1 : static_cast<std::size_t>(c.data.origin);
  if (t < c.data.window + c.data.lags || t >= p.periods()) {
    throw ValidationError("data.origin " + std::to_string(t) + " leaves no room for a window of " +
                          std::to_string(c.data.window) + " samples with " + std::to_string(c.data.lags) +
                          " lag(s) in a panel of " + std::to_string(p.periods()) + " rows");
  }
  TrainingProblem tp{backtest::build_design(p, r, t, target), {}, {}, p.tickers[target], p.dates[t]};
  tp.ys = TargetScaler::fit(tp.window.data.y);
  tp.data = tp.window.data;
  for (double& v : tp.data.y) v = tp.ys.forward(v);
  return tp;
}

inline json problem_json(const TrainingProblem& tp) {
  return {{"target", tp.target},
          {"origin", format_date(tp.origin_date)},
          {"samples", tp.data.rows},
          {"target_scale", {{"mean", tp.ys.mean}, {"scale", tp.ys.scale}}},
          {"standardizer", {{"mean", tp.window.stats.mean}, {"scale", tp.window.stats.scale}}}};
}

}  // namespace detail

// ---------------------------------------------------------------------------

inline int cmd_gradcheck(const RunConfig& c, std::ostream& out) {
  const auto dir = detail::prepare_output(c);
  gradcheck::Settings s;
  s.cases = c.gradcheck.cases;
  s.hyper_cases = c.gradcheck.hyper_cases;
  s.tolerance = c.gradcheck.tolerance;
  s.hyper_tolerance = c.gradcheck.hyper_tolerance;
  s.example_tolerance = c.gradcheck.example_tolerance;
  s.seed = c.gradcheck.seed;
  const gradcheck::Report r = gradcheck::run(s);
  const std::string text = gradcheck::format_report(r);
  detail::open(dir / "gradcheck.txt") << text;
  out << text;
  return r.pass() ? kOk : kNumerical;
}

inline int cmd_train(const RunConfig& c, std::ostream& out, std::ostream& err) {
  const auto dir = detail::prepare_output(c);
  const PanelData p = detail::load_panel(c, err);
  const auto tp = detail::training_problem(c, p);
  const model::Topology topology = c.topology_for(tp.data.cols);
  const model::HyperParams h = c.hyper_params();
  const trainer::Schedule sched = c.schedule_value();
  const auto opts = c.trainer_options();

  const model::Weights init = model::initialize(topology, opts.seed);
  const hypergrad::ModelObjective objective(topology, h, tp.data, opts.make_plan(tp.data.rows));
  trainer::ReversalBuffer buf(trainer::ReversalMode::checkpoint, opts.format, sched.size());
  std::ostringstream log;
  log << "step,loss\n";
  const trainer::TrainState s = trainer::train(init.flat(), sched, objective, buf,
                                               [&](std::size_t step, double loss, const trainer::TrainState&) {
                                                 log << step << ',' << format_double(loss) << '\n';
                                               });
  const model::Weights w(topology, s.weights(opts.format));
  const double final_loss = model::regularized_loss(w, h, tp.data);
  log << "final," << format_double(final_loss) << '\n';

  json doc = model::to_json(w, &h);
  doc.update(detail::problem_json(tp));
  doc["final_loss"] = final_loss;
  doc["in_sample_mse"] = model::mse(w, h, tp.data);
  detail::open(dir / "weights.json") << doc.dump(2) << '\n';
  detail::open(dir / "train_log.csv") << log.str();

  out << "trained " << tp.target << " on " << tp.data.rows << " samples ending " << format_date(tp.origin_date)
      << ": " << sched.size() << " steps, final loss " << format_double(final_loss) << '\n';
  return kOk;
}

inline int cmd_hyperopt(const RunConfig& c, std::ostream& out, std::ostream& err) {
  const auto dir = detail::prepare_output(c);
  const PanelData p = detail::load_panel(c, err);
  const auto tp = detail::training_problem(c, p);
  const model::Topology topology = c.topology_for(tp.data.cols);
  const auto [train, valid] = split_tail(tp.data, c.meta.valid_fraction);

  std::ostringstream log;
  const hypergrad::MetaResult m =
      hypergrad::meta_optimize(c.meta_config(), c.hyper_params(), train, valid, c.schedule_value(), topology,
                               c.trainer_options(), [&](const hypergrad::MetaIteration& it) {
                                 log << hypergrad::to_json(it).dump() << '\n';
                                 out << "iteration " << it.iteration << ": valid loss "
                                     << format_double(it.valid_loss) << (it.accepted ? " (best)" : "") << '\n';
                               });
  detail::open(dir / "meta_log.ndjson") << log.str();
  if (m.diverged) err << "warning: meta-optimization stopped early: " << m.divergence << '\n';
  if (m.history.empty()) throw NumericalError("meta-optimization produced no finite iterate: " + m.divergence);

  json best = model::to_json(m.best);
  best["valid_loss"] = *std::min_element(m.history.begin(), m.history.end());
  best["iterations"] = m.history.size();
  best["diverged"] = m.diverged;
  if (c.meta.learn_schedules) best["schedule"] = {{"eta", m.best_schedule.eta}, {"gamma", m.best_schedule.gamma}};
  detail::open(dir / "best_hyper.json") << best.dump(2) << '\n';

  json w = model::to_json(m.best_weights, &m.best);
  w.update(detail::problem_json(tp));
  w["samples"] = train.rows;
  detail::open(dir / "best_weights.json") << w.dump(2) << '\n';

  out << "best: lambda1 " << format_double(m.best.lambda1()) << ", lambda2 " << format_double(m.best.lambda2())
      << ", alpha " << format_double(m.best.alpha()) << '\n';
  return kOk;
}

inline int cmd_backtest(const RunConfig& c, std::ostream& out, std::ostream& err) {
  const auto dir = detail::prepare_output(c);
  const PanelData p = detail::load_panel(c, err);
  const backtest::RollingConfig rc = c.rolling();
  const auto& names = c.backtest.models;
  std::optional<backtest::AashnetOptions> net;
  if (std::find(names.begin(), names.end(), "aashnet") != names.end()) net = c.aashnet_options();
  rc.validate(p);

  const auto outcomes = backtest::run_models(
      p, rc, names,
      [&](const std::string& name) { return backtest::make_forecaster(name, net.value_or(backtest::AashnetOptions{})); },
      [&](const std::string& msg) { err << msg << '\n'; });

  {
    auto os = detail::open(dir / "forecasts.csv");
    backtest::write_forecasts_csv(os, outcomes);
  }
  detail::open(dir / "metrics.json") << backtest::metrics_json(outcomes, rc).dump(2) << '\n';
  {
    auto os = detail::open(dir / "equity_curve.csv");
    backtest::write_equity_csv(os, outcomes);
  }
  const std::string table = backtest::comparison_table(outcomes);
  detail::open(dir / "comparison.txt") << table;
  out << table;
  const bool any = std::any_of(outcomes.begin(), outcomes.end(), [](const auto& o) { return !o.failed(); });
  return any ? kOk : kNumerical;
}

inline int cmd_synth(const RunConfig& c, std::ostream& out) {
  const auto dir = detail::prepare_output(c);
  const synth::Config sc = c.synth_config();
  const synth::Generated g = synth::generate(sc);
  {
    auto os = detail::open(dir / "panel.csv");
    write_panel_csv(os, g.panel);
  }

  auto rows = [](const Eigen::MatrixXd& m) {
    json a = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      json r = json::array();
      for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
      a.push_back(std::move(r));
    }
    return a;
  };
  json doc = {{"kind", synth::to_string(sc.kind)},
              {"seed", sc.seed},
              {"tickers", g.panel.tickers},
              {"linear", rows(g.linear)},
              {"spectral_radius", synth::spectral_radius(g.linear)}};
  if (sc.kind == synth::Kind::nonlinear) {
    doc["loadings"] = rows(g.loadings);
    doc["directions"] = rows(g.directions);
  }
  detail::open(dir / "generator.json") << doc.dump(2) << '\n';
  out << "wrote " << g.panel.periods() << " x " << g.panel.width() << " " << synth::to_string(sc.kind)
      << " panel to " << (dir / "panel.csv").string() << '\n';
  return kOk;
}

// Maps the library's error hierarchy onto exit codes.
template <class F>
int guarded(F&& f, std::ostream& err) {
  try {
    return f();
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kValidation;
  }
}

}  // namespace aashnet::cli
