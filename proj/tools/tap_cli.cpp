#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "tap/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Active tabular augmentation"};
  app.require_subcommand(1);

  tap::CommandOptions opts;
  std::string config;
  std::string out;
  std::string mechanism;
  std::size_t threads = 0;

  const std::map<std::string, std::string> about{
      {"train-backbone", "Train the diffusion backbone per seed and write checkpoints"},
      {"augment", "Run one injection mechanism and write the augmented table"},
      {"evaluate", "Score one mechanism against real-only training"},
      {"ladder", "Compare the mechanism ladder over seeds"},
      {"calibrate", "Check error-bar coverage against the retraining proxy"},
      {"ablate", "Gate, commit and learning ablations"},
      {"sensitivity", "WorstDrop over the window and threshold grids"},
  };
  for (const auto& name : tap::command_names()) {
    auto it = about.find(name);
    auto* sub = app.add_subcommand(name, it == about.end() ? std::string() : it->second);
    sub->add_option("--config", config, "Run configuration (JSON)")->required();
    sub->add_option("--seed", opts.seeds, "Seed override (repeatable)");
    sub->add_option("--out", out, "Output directory (falls back to TAP_OUT_DIR)");
    sub->add_option("--mechanism", mechanism, "none|global|random-inpaint|hard-inpaint|tap|smote");
    sub->add_option("--threads", threads, "Worker threads for seed fan-out");
    sub->add_flag("--deterministic", opts.deterministic, "Force a single thread");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(tap::ExitCode::config_error);
  }

  opts.command = app.get_subcommands().front()->get_name();
  opts.config = config;
  if (!out.empty()) opts.out = out;
  if (!mechanism.empty()) opts.mechanism = mechanism;
  if (threads) opts.threads = threads;
  return tap::run_command(opts);
}
