#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lfm/autoencoder.hpp"
#include "lfm/flow_matching.hpp"
#include "lfm/sampler.hpp"

namespace lfm {

struct NetworkShape {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t value_dim = 8;
  std::size_t ff_dim = 32;
};

/// Synthetic data in the unit cube: "curve" (D = 4), "plane" (D = 8) or "line" (D = 4).
Tensor generate_data(const std::string& kind, std::size_t m, std::mt19937_64& rng);
/// Ambient dimension of a generator; throws ContractError for unknown kinds.
std::size_t data_dimension(const std::string& kind);

/// Uniform grid with `steps` steps, or make_grid(n, dim, c, T) when steps is 0.
TimeGrid sampling_grid(std::size_t n, std::size_t dim, double c, double horizon, std::size_t steps);

/// Flow matching on a known discrete latent target followed by Euler sampling.
struct LatentRunSettings {
  DiscreteTarget target;
  std::size_t n = 256;
  std::uint64_t seed = 0;
  double horizon = 0.9;
  /// 0 selects default_radius(n).
  double radius = 0.0;
  double step_constant = 1.0;
  /// Fixed Euler step count; 0 derives the grid from step_constant.
  std::size_t steps = 0;
  NetworkShape shape;
  TrainConfig train;
  std::size_t eval_samples = 512;
  std::size_t eval_mc = 20000;
};

struct LatentRunResult {
  TrainResult training;
  TimeGrid grid;
  Tensor samples;  // Euler terminals, d x eval_samples
  /// W2 between the samples and the stratified target sample of the same size.
  double w2 = 0.0;
  Estimate population_gap;
  /// Same quantity for the zero field, the scale of an untrained model.
  Estimate zero_field_gap;
};

LatentRunResult run_latent_flow(const LatentRunSettings& s);

/// Pre-training, encoding, latent flow matching, sampling and decoding.
struct EndToEndSettings {
  std::string data = "curve";
  std::size_t latent_dim = 1;
  std::size_t m = 512;
  std::size_t n = 512;
  std::uint64_t seed = 0;
  double horizon = 0.9;
  double radius = 0.0;
  double step_constant = 1.0;
  std::size_t steps = 0;
  NetworkShape flow_shape;
  NetworkShape coder_shape;
  TrainConfig train;
  PretrainConfig pretrain;
  std::size_t eval_samples = 512;
};

struct CheckpointW2 {
  std::size_t epoch = 0;
  double w2 = 0.0;
};

struct EndToEndResult {
  PretrainResult pretrain;
  TrainResult flow;
  std::vector<CheckpointW2> checkpoints;
  /// W2 between decoded samples of the returned velocity net and fresh data samples.
  double w2 = 0.0;
  /// Reconstruction loss of the pair on the evaluation samples.
  double heldout_reconstruction = 0.0;
};

EndToEndResult run_end_to_end(const EndToEndSettings& s);

}  // namespace lfm
