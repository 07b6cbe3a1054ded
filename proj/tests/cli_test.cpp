#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "aashnet/baselines.hpp"
#include "aashnet/cli.hpp"
#include "aashnet/config.hpp"

using namespace aashnet;
using config::RunConfig;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("aashnet_cli_test_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

RunConfig parse(const std::string& text) { return config::from_json(json::parse(text)); }

// Small, fast problem shared by the command tests.
RunConfig small(const fs::path& out) {
  RunConfig c = parse(R"({
    "seed": 11,
    "synth": {"kind": "linear_var", "tickers": 4, "periods": 260},
    "data": {"window": 150},
    "topology": {"hidden": 2},
    "schedule": {"steps": 60},
    "meta": {"iterations": 2},
    "backtest": {"train_size": 150, "horizon": 20, "refit_every": 10, "models": ["ridge", "lasso", "rw", "bh"]}
  })");
  c.output.directory = out.string();
  return c;
}

int run_binary(const std::string& args) {
  const char* bin = std::getenv("AASHNET_CLI");
  if (bin == nullptr) return -1;
  const int status = std::system((std::string(bin) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration.

TEST(Config, DefaultsAndDerivedSeeds) {
  const RunConfig a = parse("{}");
  EXPECT_EQ(a.seed, 1u);
  EXPECT_EQ(a.backtest.models.size(), 5u);
  EXPECT_EQ(a.synth.seed, config::derive_seed(1, config::kSynth));
  EXPECT_NE(a.synth.seed, a.trainer.seed);
  const RunConfig b = parse(R"({"seed": 2})");
  EXPECT_NE(a.synth.seed, b.synth.seed);
  EXPECT_NE(a.backtest.portfolio_seed, b.backtest.portfolio_seed);
}

TEST(Config, ExplicitSubSeedWinsUnlessSeedFlagGiven) {
  const json doc = json::parse(R"({"seed": 2, "synth": {"seed": 99}})");
  EXPECT_EQ(config::from_json(doc).synth.seed, 99u);
  EXPECT_EQ(config::from_json(doc).trainer.seed, config::derive_seed(2, config::kTrainer));
  const RunConfig o = config::from_json(doc, 7);
  EXPECT_EQ(o.seed, 7u);
  EXPECT_EQ(o.synth.seed, config::derive_seed(7, config::kSynth));
}

TEST(Config, ResolvedDocumentRoundTrips) {
  const RunConfig c = parse(R"({"seed": 5, "hyper": {"lambda1": 0.02}, "schedule": {"steps": 3,
                                "eta_per_step": [0.1, 0.2, 0.3]}, "backtest": {"targets": ["s01"]}})");
  const RunConfig back = config::from_json(config::to_json(c));
  EXPECT_TRUE(back == c);
  EXPECT_EQ(config::to_json(back).dump(), config::to_json(c).dump());
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_THROW(parse(R"({"sed": 1})"), ValidationError);
  EXPECT_THROW(parse(R"({"hyper": {"lamda1": 0.1}})"), ValidationError);
  try {
    parse(R"({"meta": {"iterations": 2, "rte": 1}})");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("meta.rte"), std::string::npos) << e.what();
  }
}

TEST(Config, TypesAndRangesChecked) {
  EXPECT_THROW(parse(R"({"seed": -1})"), ValidationError);
  EXPECT_THROW(parse(R"({"seed": 1.5})"), ValidationError);
  EXPECT_THROW(parse(R"({"schedule": {"steps": "100"}})"), ValidationError);
  EXPECT_THROW(parse(R"({"data": "x"})"), ValidationError);
  EXPECT_THROW(parse(R"({"hyper": {"alpha": 1.5}})"), ValidationError);
  EXPECT_THROW(parse(R"({"hyper": {"lambda2": -1}})"), ValidationError);
  EXPECT_THROW(parse(R"({"schedule": {"gamma": 1.0}})"), ValidationError);
  EXPECT_THROW(parse(R"({"schedule": {"steps": 3, "eta_per_step": [0.1]}})"), ValidationError);
  EXPECT_THROW(parse(R"({"trainer": {"mode": "lossy"}})"), ValidationError);
  EXPECT_THROW(parse(R"({"trainer": {"decay_bits": 40}})"), ValidationError);
  EXPECT_THROW(parse(R"({"meta": {"targets": ["eta"]}})"), ValidationError);
  EXPECT_THROW(parse(R"({"meta": {"targets": []}})"), ValidationError);
  EXPECT_THROW(parse(R"({"backtest": {"models": ["ridge", "ols"]}})"), ValidationError);
  EXPECT_THROW(parse(R"({"backtest": {"rule": "top_decile"}})"), ValidationError);
  EXPECT_THROW(parse(R"({"synth": {"kind": "garch"}})"), ValidationError);
  EXPECT_THROW(parse(R"({"topology": {"activation": "relu"}})"), ValidationError);
  EXPECT_NO_THROW(parse(R"({"topology": {"hidden": 0}, "hyper": {"lambda1": 0, "alpha": 1}})"));
}

TEST(Config, ConversionsCarryValues) {
  const RunConfig c = parse(R"({"topology": {"hidden": 3, "activation": "logistic"},
    "meta": {"targets": ["alpha"], "rate": 5, "max_step": 0.5},
    "trainer": {"mode": "checkpoint", "checkpoint_every": 7, "frac_bits": 30},
    "backtest": {"train_size": 300, "horizon": 40, "refit_steps": 50}})");
  const auto t = c.topology_for(6);
  EXPECT_EQ(t.hidden, 3u);
  EXPECT_EQ(t.activation, model::Activation::logistic);
  const auto m = c.meta_config();
  EXPECT_FALSE(m.tune_lambda1);
  EXPECT_TRUE(m.tune_alpha);
  EXPECT_EQ(m.rate, 5.0);
  EXPECT_EQ(m.max_step, 0.5);
  const auto o = c.trainer_options();
  EXPECT_EQ(o.mode, trainer::ReversalMode::checkpoint);
  EXPECT_EQ(o.checkpoint_every, 7u);
  EXPECT_EQ(o.format.frac_bits, 30);
  const auto r = c.rolling();
  EXPECT_EQ(r.train_size, 300u);
  EXPECT_EQ(r.horizon, 40u);
  EXPECT_EQ(c.aashnet_options().refit_steps, 50u);
}

// ---------------------------------------------------------------------------
// Commands, in process.

TEST(CliGradcheck, DefaultRunPassesAndReportsTheTriple) {
  RunConfig c = parse("{}");
  c.output.directory = scratch("gc").string();
  std::ostringstream out;
  EXPECT_EQ(cli::cmd_gradcheck(c, out), cli::kOk);
  const std::string s = out.str();
  EXPECT_NE(s.find("y = 17.0398  dy/dx1 = 2.7206  dy/dx2 = 6.0000"), std::string::npos) << s;
  EXPECT_EQ(s.find("FAIL"), std::string::npos) << s;
  EXPECT_EQ(slurp(fs::path(c.output.directory) / "gradcheck.txt"), s);
}

TEST(CliGradcheck, ZeroToleranceFailsAndNamesTheCheck) {
  RunConfig c = parse(R"({"gradcheck": {"tolerance": 0, "cases": 3}})");
  c.output.directory = scratch("gc0").string();
  std::ostringstream out;
  EXPECT_EQ(cli::cmd_gradcheck(c, out), cli::kNumerical);
  EXPECT_NE(out.str().find("FAIL  weight gradient"), std::string::npos) << out.str();
}

TEST(CliGradcheck, ReportBytesDependOnlyOnTheSeed) {
  RunConfig c = parse(R"({"seed": 4, "gradcheck": {"cases": 5, "hyper_cases": 1}})");
  std::ostringstream a, b;
  c.output.directory = scratch("gca").string();
  cli::cmd_gradcheck(c, a);
  c.output.directory = scratch("gcb").string();
  cli::cmd_gradcheck(c, b);
  EXPECT_EQ(a.str(), b.str());
}

TEST(CliSynth, GoldenHeaderAndDeterminism) {
  const fs::path a = scratch("synth_a"), b = scratch("synth_b");
  RunConfig c = small(a);
  std::ostringstream out;
  ASSERT_EQ(cli::cmd_synth(c, out), cli::kOk);
  c.output.directory = b.string();
  ASSERT_EQ(cli::cmd_synth(c, out), cli::kOk);
  const std::string panel = slurp(a / "panel.csv");
  EXPECT_EQ(panel.substr(0, panel.find('\n')), "date,s01,s02,s03,s04,index");
  EXPECT_EQ(panel.substr(panel.find('\n') + 1, 11), "2000-01-03,");
  EXPECT_EQ(panel, slurp(b / "panel.csv"));
  EXPECT_EQ(slurp(a / "generator.json"), slurp(b / "generator.json"));

  // The written panel reads back to the generator output bit for bit.
  const auto g = synth::generate(c.synth_config());
  const auto back = ingest_csv((a / "panel.csv").string());
  EXPECT_EQ(back.panel.returns, g.panel.returns);
  EXPECT_EQ(back.panel.dates, g.panel.dates);
}

TEST(CliSynth, ResolvedConfigReloadsEquivalent) {
  const fs::path dir = scratch("resolved");
  RunConfig c = small(dir);
  std::ostringstream out;
  cli::cmd_synth(c, out);
  EXPECT_TRUE(config::load((dir / "resolved_config.json").string()) == c);
}

TEST(CliTrain, WritesWeightsAndLog) {
  const fs::path dir = scratch("train");
  const RunConfig c = small(dir);
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_train(c, out, err), cli::kOk);
  const json w = json::parse(slurp(dir / "weights.json"));
  const auto weights = model::weights_from_json(w);
  EXPECT_EQ(weights.topology().inputs, 4u);
  EXPECT_EQ(weights.topology().hidden, 2u);
  EXPECT_EQ(w.at("samples").get<std::size_t>(), 150u);
  EXPECT_EQ(w.at("standardizer").at("mean").size(), 4u);
  const std::string log = slurp(dir / "train_log.csv");
  EXPECT_EQ(log.substr(0, 10), "step,loss\n");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 62);  // header, 60 steps, final
  // Loss decreases from the initialization.
  std::istringstream ls(log);
  std::string line;
  std::getline(ls, line);
  std::getline(ls, line);
  const double first = std::stod(line.substr(line.find(',') + 1));
  EXPECT_LT(w.at("final_loss").get<double>(), first);
}

// J = 0, alpha = 1, L2 only: the trained skip block is ridge regression on the
// same standardized window with lambda_ridge = n * lambda2 / 2.
TEST(CliTrain, LinearNetworkMatchesRidge) {
  const fs::path dir = scratch("ridge");
  RunConfig c = parse(R"({"seed": 3, "synth": {"tickers": 5, "periods": 320},
    "data": {"window": 300}, "topology": {"hidden": 0},
    "hyper": {"lambda1": 0, "lambda2": 0.05, "alpha": 1},
    "schedule": {"steps": 3000, "eta": 0.2, "gamma": 0.875}})");
  c.output.directory = dir.string();
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_train(c, out, err), cli::kOk);
  const auto w = model::weights_from_json(json::parse(slurp(dir / "weights.json")));

  const PanelData p = synth::generate(c.synth_config()).panel;
  const auto tp = cli::detail::training_problem(c, p);
  Eigen::MatrixXd x(tp.data.rows, tp.data.cols);
  Eigen::VectorXd y(tp.data.rows);
  for (std::size_t i = 0; i < tp.data.rows; ++i) {
    for (std::size_t j = 0; j < tp.data.cols; ++j) x(i, j) = tp.data.at(i, j);
    y(i) = tp.data.y[i];
  }
  const auto fit = baselines::ridge_fit(x, y, 300 * 0.05 / 2);
  double num = 0.0, den = 0.0;
  for (std::size_t j = 0; j < 5; ++j) {
    num += std::pow(w.skip()[j] - fit.coef[j], 2);
    den += fit.coef[j] * fit.coef[j];
  }
  num += std::pow(w.skip()[5] - fit.intercept, 2);
  EXPECT_LT(std::sqrt(num / den), 1e-4);
}

TEST(CliHyperopt, ZeroRateIsANoOp) {
  const fs::path dir = scratch("hyper0");
  RunConfig c = small(dir);
  c.meta.rate = 0.0;
  c.meta.iterations = 3;
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_hyperopt(c, out, err), cli::kOk);
  const json best = json::parse(slurp(dir / "best_hyper.json"));
  EXPECT_DOUBLE_EQ(best.at("lambda1").get<double>(), c.hyper.lambda1);
  EXPECT_DOUBLE_EQ(best.at("lambda2").get<double>(), c.hyper.lambda2);
  EXPECT_DOUBLE_EQ(best.at("alpha").get<double>(), c.hyper.alpha);
  std::istringstream log(slurp(dir / "meta_log.ndjson"));
  std::string line;
  std::vector<double> losses;
  while (std::getline(log, line)) {
    const json it = json::parse(line);
    EXPECT_DOUBLE_EQ(it.at("lambda1").get<double>(), c.hyper.lambda1);
    losses.push_back(it.at("valid_loss").get<double>());
  }
  ASSERT_EQ(losses.size(), 3u);
  EXPECT_EQ(losses[0], losses[1]);
  EXPECT_EQ(losses[1], losses[2]);
}

TEST(CliHyperopt, MovesShrinkageAndLogsEveryIteration) {
  const fs::path dir = scratch("hyper");
  RunConfig c = small(dir);
  c.meta.iterations = 3;
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_hyperopt(c, out, err), cli::kOk);
  const std::string log = slurp(dir / "meta_log.ndjson");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 3);
  const json best = json::parse(slurp(dir / "best_hyper.json"));
  EXPECT_LE(best.at("valid_loss").get<double>(), json::parse(log.substr(0, log.find('\n'))).at("valid_loss").get<double>());
  EXPECT_NO_THROW(model::weights_from_json(json::parse(slurp(dir / "best_weights.json"))));
}

TEST(CliBacktest, OutputsAreDeterministicAndConsistent) {
  const fs::path a = scratch("bt_a"), b = scratch("bt_b");
  RunConfig c = small(a);
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_backtest(c, out, err), cli::kOk);
  c.output.directory = b.string();
  std::ostringstream out2;
  ASSERT_EQ(cli::cmd_backtest(c, out2, err), cli::kOk);
  for (const char* f : {"forecasts.csv", "metrics.json", "equity_curve.csv", "comparison.txt"}) {
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_EQ(out.str(), slurp(a / "comparison.txt"));
  const std::string fc = slurp(a / "forecasts.csv");
  EXPECT_EQ(fc.substr(0, fc.find('\n')), "date,ticker,model,forecast,realized");
  EXPECT_EQ(std::count(fc.begin(), fc.end(), '\n'), 1 + 3 * 4 * 20);
  const json m = json::parse(slurp(a / "metrics.json"));
  EXPECT_EQ(m.at("models").at("ridge").at("refits").get<std::size_t>(), 2u);
  EXPECT_TRUE(m.at("models").at("bh").at("ave_rmse").is_null());
  const std::string eq = slurp(a / "equity_curve.csv");
  EXPECT_EQ(eq.substr(0, eq.find('\n')), "date,ridge,lasso,rw,bh");
}

TEST(CliBacktest, ModelOverrideAndMissingBenchmark) {
  const fs::path dir = scratch("bt_rw");
  RunConfig c = small(dir);
  c.synth.index_column = false;
  c.backtest.models = {"rw", "bh"};
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_backtest(c, out, err), cli::kOk);
  EXPECT_NE(out.str().find("FAILED"), std::string::npos) << out.str();
  c.backtest.models = {"bh"};
  EXPECT_EQ(cli::cmd_backtest(c, out, err), cli::kNumerical);
}

TEST(CliData, CsvInputWithDroppedRows) {
  const fs::path dir = scratch("csv");
  std::ostringstream csv;
  csv << "date,a,b\n";
  const auto days = business_days(*parse_date("2010-01-04"), 80);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 0.01);
  for (std::size_t t = 0; t < days.size(); ++t) {
    csv << format_date(days[t]) << ',' << (t == 40 ? std::string("NA") : format_double(n(rng))) << ','
        << format_double(n(rng)) << '\n';
  }
  spit(dir / "p.csv", csv.str());
  RunConfig c = parse(R"({"data": {"window": 50, "target": "b"}, "topology": {"hidden": 1}, "schedule": {"steps": 20}})");
  c.data.panel = (dir / "p.csv").string();
  c.output.directory = (dir / "out").string();
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_train(c, out, err), cli::kOk);
  EXPECT_NE(err.str().find("line 42"), std::string::npos) << err.str();
  EXPECT_EQ(json::parse(slurp(dir / "out" / "weights.json")).at("target"), "b");

  c.data.target = "zz";
  EXPECT_THROW(cli::cmd_train(c, out, err), ValidationError);
  c.data.target = "";
  c.data.window = 500;
  EXPECT_THROW(cli::cmd_train(c, out, err), ValidationError);
}

// ---------------------------------------------------------------------------
// The binary.

TEST(CliBinary, ExitCodes) {
  if (std::getenv("AASHNET_CLI") == nullptr) GTEST_SKIP() << "AASHNET_CLI not set";
  const fs::path dir = scratch("bin");
  spit(dir / "ok.json", R"({"synth": {"tickers": 3, "periods": 50}})");
  spit(dir / "typo.json", R"({"synht": {}})");
  spit(dir / "broken.json", R"({"seed": )");
  spit(dir / "tol0.json", R"({"gradcheck": {"tolerance": 0, "cases": 2}})");
  spit(dir / "blowup.json",
       R"({"synth": {"tickers": 3, "periods": 120}, "data": {"window": 100}, "schedule": {"eta": 1e12, "steps": 50}})");
  const std::string out = " --output " + (dir / "out").string();

  EXPECT_EQ(run_binary("synth --config " + (dir / "ok.json").string() + out), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "panel.csv"));
  EXPECT_EQ(run_binary("synth --config " + (dir / "typo.json").string() + out), 1);
  EXPECT_EQ(run_binary("synth --config " + (dir / "broken.json").string() + out), 1);
  EXPECT_EQ(run_binary("synth --config " + (dir / "missing.json").string() + out), 1);
  EXPECT_EQ(run_binary("synth" + out), 1);
  EXPECT_EQ(run_binary("frobnicate --config " + (dir / "ok.json").string()), 1);
  EXPECT_EQ(run_binary("backtest --config " + (dir / "ok.json").string() + out + " --models rw,arima"), 1);
  EXPECT_EQ(run_binary("gradcheck --config " + (dir / "tol0.json").string() + out), 2);
  EXPECT_EQ(run_binary("train --config " + (dir / "blowup.json").string() + out), 2);
  EXPECT_EQ(run_binary("--help"), 0);
}

TEST(CliBinary, SeedFlagOverridesEverySubSeed) {
  if (std::getenv("AASHNET_CLI") == nullptr) GTEST_SKIP() << "AASHNET_CLI not set";
  const fs::path dir = scratch("binseed");
  spit(dir / "c.json", R"({"seed": 1, "synth": {"tickers": 2, "periods": 30, "seed": 5}})");
  ASSERT_EQ(run_binary("synth --config " + (dir / "c.json").string() + " --seed 9 --output " + (dir / "a").string()), 0);
  ASSERT_EQ(run_binary("synth --config " + (dir / "c.json").string() + " --output " + (dir / "b").string()), 0);
  const RunConfig a = config::load((dir / "a" / "resolved_config.json").string());
  const RunConfig b = config::load((dir / "b" / "resolved_config.json").string());
  EXPECT_EQ(a.seed, 9u);
  EXPECT_EQ(a.synth.seed, config::derive_seed(9, config::kSynth));
  EXPECT_EQ(b.synth.seed, 5u);
  EXPECT_NE(slurp(dir / "a" / "panel.csv"), slurp(dir / "b" / "panel.csv"));
}
