#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "bclab/experiments.hpp"

namespace {

constexpr int kExitFault = 1;
constexpr int kExitCheckFailed = 2;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Blume-Capel metastability experiments"};
  app.set_version_flag("--version", "bclab 1.0");

  std::string scenario;
  std::string config_path;
  std::string preset_name;
  std::vector<double> betas;
  std::optional<int> replicas;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool check = false;
  bool list_presets = false;

  app.add_option("scenario", scenario,
                 "nucleation-gate | route | trace-limit | capacity-exact | eigen-bound | regime-scan");
  app.add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--preset", preset_name, "named desk-scale parameter set");
  app.add_option("--beta", betas, "inverse temperature; repeat for a sweep");
  app.add_option("--replicas", replicas, "replica count");
  app.add_option("--seed", seed, "base seed");
  app.add_option("--out", out, "output directory");
  app.add_flag("--check", check, "exit 2 when an acceptance threshold fails");
  app.add_flag("--list-presets", list_presets, "print preset names and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitFault;
  }

  if (list_presets) {
    for (const auto& name : bclab::preset_names()) {
      std::cout << name << '\n' << bclab::canonical_text(bclab::preset(name)) << '\n';
    }
    return 0;
  }

  try {
    bclab::ExperimentConfig cfg;
    if (!preset_name.empty() && !config_path.empty()) throw bclab::ConfigError("give --config or --preset, not both");
    if (!preset_name.empty()) {
      cfg = bclab::preset(preset_name);
    } else if (!config_path.empty()) {
      cfg = bclab::load_config(config_path);
    } else {
      throw bclab::ConfigError("--config or --preset is required");
    }
    if (!scenario.empty()) {
      const auto s = bclab::scenario_from_string(scenario);
      if (s != cfg.scenario) {
        throw bclab::ConfigError("scenario " + scenario + " does not match the config's " + bclab::to_string(cfg.scenario));
      }
    }
    if (!betas.empty()) {
      cfg.betas = betas;
      if (cfg.check_beta) {
        bool kept = false;
        for (double b : betas) kept = kept || b == *cfg.check_beta;
        if (!kept) cfg.check_beta.reset();
      }
    }
    if (replicas) cfg.replicas = *replicas;
    if (seed) cfg.seed = *seed;
    if (out) cfg.out = *out;
    bclab::validate(cfg);

    std::cerr << "bclab " << bclab::to_string(cfg.scenario) << " config " << bclab::config_hash(cfg) << " with "
              << bclab::worker_count() << " worker(s)\n";
    const auto result = bclab::run_experiment(cfg);
    bclab::write_outputs(result, cfg.out);
    for (const auto& c : result.checks) {
      std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << " (" << c.detail << ")\n";
    }
    std::cout << "wrote " << std::filesystem::path(cfg.out).string() << "/{runs.jsonl,summary.csv,regime.csv}\n";
    if (check && !result.all_pass()) return kExitCheckFailed;
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "bclab: " << e.what() << '\n';
    return kExitFault;
  }
}
