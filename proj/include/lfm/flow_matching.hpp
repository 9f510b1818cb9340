#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "lfm/metrics.hpp"
#include "lfm/oracle.hpp"
#include "lfm/optim.hpp"
#include "lfm/transformer.hpp"
#include "lfm/velocity_field.hpp"

namespace lfm {

/// n triples (t_i, x0_i, x1_i) with t_i in [0, T), x0_i standard normal, x1_i in [0,1]^d.
struct TrainingSet {
  std::vector<double> times;
  Tensor x0;  // d x n
  Tensor x1;  // d x n

  std::size_t size() const { return times.size(); }
  std::size_t dim() const { return x1.rows(); }
  /// t x1 + sqrt(1 - t^2) x0, column by column.
  Tensor interpolants() const;
  /// x1 - t / sqrt(1 - t^2) x0, column by column.
  Tensor labels() const;
  void validate(double horizon) const;

  /// x1 drawn from the target.
  static TrainingSet draw(const DiscreteTarget& target, std::size_t n, double horizon, std::mt19937_64& rng);
  /// x1 taken as given; times and noise drawn.
  static TrainingSet from_points(const Tensor& x1, double horizon, std::mt19937_64& rng);
};

/// max(1, sqrt(2 log n)).
double default_radius(std::size_t n);

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  AdamConfig adam;
  /// Operator-norm cap applied to every weight matrix after each step; 0 disables.
  double clip_threshold = 0.0;
  std::uint64_t seed = 0;
  double horizon = 0.9;
  /// Box radius R; 0 selects default_radius(n).
  double radius = 0.0;
  /// Random pairs for the per-epoch Lipschitz estimate; 0 skips it.
  std::size_t lipschitz_pairs = 16;
  /// Monte-Carlo size of the per-epoch population gap when an oracle is given; 0 skips it.
  std::size_t eval_mc = 0;
  /// Log (and best-iterate check) every this many epochs; the last epoch is always logged.
  std::size_t log_every = 1;

  /// Throws ContractError naming the field. T must lie in (1/2, 1).
  void validate() const;
};

/// Network architecture with output bound (1+R)/(1-T^2) sqrt(d).
TransformerSpec default_velocity_spec(std::size_t dim, double radius, double horizon, std::size_t layers = 2,
                                      std::size_t heads = 2, std::size_t value_dim = 8, std::size_t ff_dim = 32);

/// (1/n) sum |label_i - v(x_t_i, t_i)|^2. Throws ContractError on an empty set.
double empirical_loss(const VelocityField& v, const TrainingSet& s);

/// Loss on the given columns and its gradient for every parameter, in
/// visit_parameters order.
struct LossAndGradient {
  double loss = 0.0;
  std::vector<Tensor> gradients;
};
LossAndGradient empirical_loss_gradient(const RescaledVelocityNet& v, const TrainingSet& s,
                                        const std::vector<std::size_t>& columns);

/// Monte-Carlo estimate of (1/T) int_0^T |v - v*|^2_{L2(pi_t)} dt; the same
/// estimator as l2_velocity_error.
Estimate population_loss_gap(const VelocityField& v, const OracleField& oracle, std::size_t mc, std::uint64_t seed);

/// Paired Monte-Carlo estimate of L(v) - L(v*) from the regression form of the loss.
Estimate loss_difference(const VelocityField& v, const OracleField& oracle, std::size_t mc, std::uint64_t seed);

struct EpochRecord {
  std::size_t epoch = 0;
  double empirical_loss = 0.0;
  double population_gap = std::numeric_limits<double>::quiet_NaN();
  double population_gap_stderr = std::numeric_limits<double>::quiet_NaN();
  double lipschitz_x = std::numeric_limits<double>::quiet_NaN();
  double lipschitz_t = std::numeric_limits<double>::quiet_NaN();
  double parameter_norm = 0.0;
};

struct TrainResult {
  /// Iterate with the smallest logged empirical loss (epoch 0 included).
  RescaledVelocityNet net;
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  /// Position of the best iterate in the log.
  std::size_t best_epoch_index = 0;
};

/// Called at every logged epoch with the record and the current iterate.
using CheckpointFn = std::function<void(const EpochRecord&, const RescaledVelocityNet&)>;

/// Adam on the empirical loss from a seeded random initialization. Throws
/// DivergenceError when the loss turns non-finite.
TrainResult train(const TransformerSpec& spec, const TrainingSet& s, const TrainConfig& cfg,
                  const OracleField* oracle = nullptr, const CheckpointFn& on_checkpoint = {});
TrainResult train_from(RescaledVelocityNet init, const TrainingSet& s, const TrainConfig& cfg,
                       const OracleField* oracle = nullptr, const CheckpointFn& on_checkpoint = {});

void write_training_log(const std::filesystem::path& path, const std::vector<EpochRecord>& log);

}  // namespace lfm
