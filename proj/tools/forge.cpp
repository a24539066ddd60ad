// forge: synthesize data, train detector variants, measure latent margins,
// evaluate generalization gaps and rank the variants.

#include <cstdlib>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "forge/error.hpp"
#include "forge/experiment.hpp"

namespace {

struct Options {
  std::string config;
  std::string out;
  std::string data;
  int jobs = 0;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("-c,--config", o.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("-o,--out", o.out, "output root (default: $FORGE_OUT, else ./forge-out)");
  cmd->add_option("-j,--jobs", o.jobs, "worker threads (overrides the config)")->check(CLI::PositiveNumber);
  cmd->add_option("-s,--seed", o.seed, "global seed override");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"forge: margin-based selection of splicing detectors"};
  app.require_subcommand(1);
  Options o;

  struct Command {
    const char* name;
    const char* help;
  };
  const Command commands[] = {
      {"synth", "synthesize the source and target domains"},
      {"sweep", "train every variant of the sweep grid"},
      {"margins", "compute latent margins and metrics per variant"},
      {"evaluate", "measure generalization gaps, pairs, curves and correlations"},
      {"rank", "rank variants by margin metric and name the selected detector"},
      {"plot", "render quantile curves as SVG"},
      {"run-all", "run every stage, skipping up-to-date ones"},
  };
  for (const auto& c : commands) add_common(app.add_subcommand(c.name, c.help), o);
  auto* train_sweep = app.add_subcommand("train-sweep", "sweep with data from another output root");
  add_common(train_sweep, o);
  train_sweep->add_option("-d,--data", o.data, "data directory written by `forge synth` (<root>/data)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Help exits 0; any usage error is a config error.
    const int code = app.exit(e);
    return code == 0 ? 0 : forge::kExitConfig;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();

  try {
    auto config = forge::load_experiment(o.config, o.seed);
    if (o.jobs > 0) config.jobs = o.jobs;
    std::string out = o.out;
    if (out.empty()) {
      const char* env = std::getenv("FORGE_OUT");
      out = env && *env ? env : "forge-out";
    }
    forge::OutputLock lock(out);
    forge::Experiment e(std::move(config), out, o.data);
    if (cmd == "synth") e.synth();
    else if (cmd == "sweep" || cmd == "train-sweep") e.sweep();
    else if (cmd == "margins") e.margins();
    else if (cmd == "evaluate") e.evaluate();
    else if (cmd == "rank") e.rank();
    else if (cmd == "plot") e.plot();
    else e.run_all();
  } catch (const forge::Error& err) {
    std::cerr << "forge " << cmd << ": " << forge::to_string(err.kind()) << " error: " << err.what() << "\n";
    return forge::exit_code_for(err.kind());
  } catch (const std::exception& err) {
    std::cerr << "forge " << cmd << ": " << err.what() << "\n";
    return forge::kExitUnexpected;
  }
  return forge::kExitOk;
}
