// Experiment driver: `lfm run <config.json> [--out DIR] [--verbose]` and
// `lfm sweep <config.json> --axis A --values v1,v2,... [--out DIR] [--verbose]`.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "lfm/experiment.hpp"

namespace {

std::filesystem::path output_dir(const lfm::ExperimentConfig& cfg, const std::string& flag) {
  if (!flag.empty()) return flag;
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  throw lfm::ConfigError("output_dir: required when --out is not given");
}

int report(const lfm::RunOutcome& r) {
  if (r.partial) {
    std::cerr << "run failed, partial artifacts flagged in " << r.manifest.string() << ": " << r.error << '\n';
  } else {
    std::cout << r.manifest.string() << '\n';
  }
  return r.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent flow matching experiments"};
  app.require_subcommand(1);

  std::string config_path, out, axis;
  std::vector<double> values;
  bool verbose = false;

  auto* run = app.add_subcommand("run", "Run one experiment config");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--out", out, "Output directory (overrides output_dir)");
  run->add_flag("--verbose", verbose, "Debug logging");

  auto* sweep = app.add_subcommand("sweep", "Repeat an experiment over values of one axis");
  sweep->add_option("config", config_path, "Experiment config (JSON)")->required();
  sweep->add_option("--axis", axis, "n, m, T or steps")->required();
  sweep->add_option("--values", values, "Comma-separated axis values")->required()->delimiter(',');
  sweep->add_option("--out", out, "Output directory (overrides output_dir)");
  sweep->add_flag("--verbose", verbose, "Debug logging");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    const lfm::ExperimentConfig cfg = lfm::load_config(config_path);
    if (run->parsed()) return report(lfm::run_experiment(cfg, output_dir(cfg, out)));
    return report(lfm::run_sweep(cfg, lfm::parse_axis(axis), values, output_dir(cfg, out)));
  } catch (const lfm::UnknownKindError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return lfm::kExitUnknownKind;
  } catch (const lfm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return lfm::kExitInvalidConfig;
  }
}
