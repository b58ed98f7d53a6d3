#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "aicmet/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Synthetic pharmacokinetic study workbench and in-context mixed-effect transformer"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::string snapshot_path;
  std::string studies_glob;
  int64_t seed = -1;
  bool verbose = false;
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--seed", seed, "override the run seed");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--snapshot", snapshot_path, "parameter snapshot file");
  app.add_option("--studies", studies_glob, "study file or glob pattern");
  app.add_flag("--verbose", verbose, "chatty progress output");

  for (const char* name : {"simulate", "train", "predict", "synthesize", "vpc", "eval", "gradcheck"})
    app.add_subcommand(name);

  CLI11_PARSE(app, argc, argv);

  try {
    aicmet::RunConfig cfg =
        config_path.empty() ? aicmet::parse_config(nlohmann::json::object()) : aicmet::load_config_file(config_path);
    if (seed >= 0) {
      cfg.seed = static_cast<uint64_t>(seed);
      cfg.trainer.seed = cfg.seed;
    }
    if (!out_dir.empty()) cfg.io.out_dir = out_dir;
    if (!snapshot_path.empty()) cfg.io.snapshot = snapshot_path;
    if (!studies_glob.empty()) cfg.io.studies = studies_glob;
    return aicmet::cli::dispatch(app.get_subcommands().front()->get_name(), cfg, verbose);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
