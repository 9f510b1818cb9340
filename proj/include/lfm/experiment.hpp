#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "lfm/autoencoder.hpp"
#include "lfm/flow_matching.hpp"
#include "lfm/oracle.hpp"
#include "lfm/pipeline.hpp"

namespace lfm {

inline constexpr const char* kLibraryName = "lfm";
inline constexpr const char* kLibraryVersion = "0.1.0";

/// Invalid experiment configuration. The message starts with the field path.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// The "kind" field names no known experiment.
class UnknownKindError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

enum class ExperimentKind { Construct, OracleCheck, TrainLatent, EndToEnd, DiscretizationSweep, RateSweep };

std::string to_string(ExperimentKind kind);
/// Throws UnknownKindError.
ExperimentKind parse_kind(const std::string& name);

enum class SweepAxis { N, M, Horizon, Steps };

std::string to_string(SweepAxis axis);
/// Accepts "n", "m", "T" and "steps". Throws ConfigError.
SweepAxis parse_axis(const std::string& name);

struct ConstructSettings {
  /// Random multi-indices per seed.
  std::size_t indices = 50;
  unsigned max_degree = 8;
  /// Values of d_patch * l to draw layouts from.
  std::vector<std::size_t> input_dims{2, 3};
  std::size_t grid_points = 17;
  /// Degrees of the least-squares fits of sin(2 pi x).
  std::vector<unsigned> degrees{2, 4, 8};
  std::size_t lipschitz_pairs = 10000;
};

struct OracleCheckSettings {
  std::size_t points = 200;
  double fd_step = 1e-5;
};

struct SweepSettings {
  ExperimentKind base = ExperimentKind::TrainLatent;
  SweepAxis axis = SweepAxis::N;
  std::vector<double> values;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::Construct;
  /// Root seeds; every stochastic draw derives from one of them.
  std::vector<std::uint64_t> seeds;
  std::string output_dir;

  std::string data = "curve";
  std::size_t latent_dim = 1;
  std::size_t m = 512;
  std::size_t n = 256;
  std::optional<DiscreteTarget> target;

  double horizon = 0.9;
  /// 0 selects the kind's default (default_radius(n) for training, 2 for oracle checks).
  double radius = 0.0;
  double step_constant = 1.0;
  /// Fixed Euler step count; 0 derives it from step_constant.
  std::size_t steps = 0;
  std::size_t eval_samples = 512;
  std::size_t eval_mc = 20000;

  NetworkShape flow_network;
  NetworkShape coder_network;
  TrainConfig training;
  PretrainConfig pretraining;

  ConstructSettings construct;
  OracleCheckSettings oracle_check;
  std::vector<std::size_t> step_counts{8, 16, 32, 64, 128};
  double tolerance = 1e-8;
  std::optional<SweepSettings> sweep;

  /// Ambient data dimension D of the end-to-end kind.
  std::size_t data_dim() const { return data_dimension(data); }
  /// Kind-specific checks; throws ConfigError naming the field.
  void validate() const;
};

/// Parses and validates. Unknown keys are rejected so that every scientific
/// setting is visible in the resolved config.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Every field, defaults included.
nlohmann::json to_json(const ExperimentConfig& cfg);

/// Exit codes of run and sweep.
enum ExitCode : int { kExitOk = 0, kExitInvalidConfig = 1, kExitUnknownKind = 2, kExitRuntimeFailure = 3 };

struct RunOutcome {
  int exit_code = kExitOk;
  bool partial = false;
  std::string error;
  std::filesystem::path manifest;
};

/// Runs the experiment and writes manifest.json, metrics/*.csv and
/// checkpoints/*.json under `out`. Numerical failures (divergence,
/// non-convergence) leave a manifest flagged partial and exit code 3.
RunOutcome run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out);

/// Repeats the base experiment for every value of the axis and seed and
/// writes metrics/sweep.csv with columns axis, value, seed, quantity, metric,
/// stderr, slope. The slope is the log-log fit of the seed-mean metric against
/// the value (against 1 - T on the T axis). Fewer than two values is a ConfigError.
RunOutcome run_sweep(const ExperimentConfig& cfg, SweepAxis axis, const std::vector<double>& values,
                     const std::filesystem::path& out);

/// Hash git assigns to a blob with these contents: SHA-1 of "blob <size>\0" + content.
std::string git_blob_sha1(std::string_view content);

/// Problems found when checking a manifest against the files it lists; empty when consistent.
std::vector<std::string> verify_manifest(const std::filesystem::path& dir);

}  // namespace lfm
