// aashnet <gradcheck|train|hyperopt|backtest|synth> --config PATH [--output DIR] [--seed N] [--models a,b]
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aashnet/cli.hpp"

int main(int argc, char** argv) {
  using namespace aashnet;
  CLI::App app{"Skip-layer shrinkage network with hypergradient-tuned regularization"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::string output;
  std::uint64_t seed = 0;
  std::vector<std::string> models;

  auto add = [&](const std::string& name, const std::string& help) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON run configuration")->required();
    sub->add_option("--output", output, "output directory (overrides output.directory)");
    sub->add_option("--seed", seed, "top-level seed (overrides the config and all derived seeds)");
    return sub;
  };
  CLI::App* gradcheck = add("gradcheck", "worked example and randomized derivative checks");
  CLI::App* train = add("train", "train once on the configured window");
  CLI::App* hyperopt = add("hyperopt", "tune shrinkage hyperparameters by hypergradient descent");
  CLI::App* backtest = add("backtest", "rolling one-step forecasts, portfolio and comparison table");
  CLI::App* synth = add("synth", "write a synthetic return panel");
  backtest->add_option("--models", models, "comma-separated subset of aashnet,ridge,lasso,rw,bh")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : cli::kValidation;
  }

  return cli::guarded(
      [&] {
        cli::Overrides o;
        if (!output.empty()) o.output = output;
        for (CLI::App* sub : app.get_subcommands()) {
          if (sub->count("--seed")) o.seed = seed;
        }
        if (backtest->parsed() && backtest->count("--models")) o.models = models;
        const cli::RunConfig c = cli::resolve(config_path, o);
        if (gradcheck->parsed()) return cli::cmd_gradcheck(c, std::cout);
        if (train->parsed()) return cli::cmd_train(c, std::cout, std::cerr);
        if (hyperopt->parsed()) return cli::cmd_hyperopt(c, std::cout, std::cerr);
        if (backtest->parsed()) return cli::cmd_backtest(c, std::cout, std::cerr);
        if (synth->parsed()) return cli::cmd_synth(c, std::cout);
        return static_cast<int>(cli::kValidation);
      },
      std::cerr);
}
