#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include <json.hpp>

#include "lfm/oracle.hpp"
#include "lfm/optim.hpp"
#include "lfm/transformer.hpp"

namespace lfm {

/// Encoder R^D -> [0,1]^d (hard clamp after the readout) and decoder [0,1]^d -> R^D.
struct AutoencoderPair {
  TransformerNet encoder;
  TransformerNet decoder;

  std::size_t data_dim() const { return encoder.spec.input_dim; }
  std::size_t latent_dim() const { return encoder.spec.output_dim; }
  /// Encoder output must equal decoder input; throws ContractError otherwise.
  void validate() const;
};

TransformerSpec default_encoder_spec(std::size_t data_dim, std::size_t latent_dim, std::size_t layers = 2,
                                     std::size_t heads = 2, std::size_t value_dim = 8, std::size_t ff_dim = 32);
TransformerSpec default_decoder_spec(std::size_t latent_dim, std::size_t data_dim, std::size_t layers = 2,
                                     std::size_t heads = 2, std::size_t value_dim = 8, std::size_t ff_dim = 32);

AutoencoderPair make_random_pair(const TransformerSpec& encoder, const TransformerSpec& decoder, std::mt19937_64& rng);
/// D = d pair whose encoder and decoder are the identity on the unit cube.
AutoencoderPair identity_pair(std::size_t dim);

/// Encoder outputs clamped into [0,1]^d; data is D x m.
Tensor encode(const AutoencoderPair& pair, const Tensor& data);
/// Latent points projected into [0,1]^d, then decoded.
Tensor decode(const AutoencoderPair& pair, const Tensor& latent);

/// |D(E(y_i)) - y_i|^2 per column.
std::vector<double> reconstruction_errors(const AutoencoderPair& pair, const Tensor& data);
/// Mean of reconstruction_errors. Throws ContractError on empty data.
double reconstruction_loss(const AutoencoderPair& pair, const Tensor& data);

struct PretrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  AdamConfig adam;
  double clip_threshold = 0.0;
  std::uint64_t seed = 0;
  std::size_t log_every = 1;

  void validate() const;
};

struct PretrainRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
};

struct PretrainResult {
  /// Iterate with the smallest logged reconstruction loss (epoch 0 included).
  AutoencoderPair pair;
  std::vector<PretrainRecord> log;
  std::size_t best_epoch = 0;
};

/// Adam on the reconstruction loss from a seeded random initialization.
/// Throws DivergenceError when the loss turns non-finite.
PretrainResult pretrain(const TransformerSpec& encoder, const TransformerSpec& decoder, const Tensor& data,
                        const PretrainConfig& cfg);
PretrainResult pretrain_from(AutoencoderPair init, const Tensor& data, const PretrainConfig& cfg);

void write_pretrain_log(const std::filesystem::path& path, const std::vector<PretrainRecord>& log);

/// Uniform discrete target on the encoded points. Inputs outside the unit
/// cube are clamped into it with a warning.
DiscreteTarget encode_batch(const AutoencoderPair& pair, const Tensor& batch);
/// Decoded points, D x n.
Tensor decode_batch(const AutoencoderPair& pair, const Tensor& latent);

nlohmann::json to_json(const AutoencoderPair& pair);
AutoencoderPair pair_from_json(const nlohmann::json& j);

/// Point on the smooth curve s -> (s, s^2, 1/2 + sin(2 pi s)/4, 1/2 + cos(pi s)/4) in [0,1]^4.
std::vector<double> curve_point(double s);
/// Point on the surface (u, v) -> (u, v, uv, u^2, v^2, 1/2 + sin(pi u)/4, 1/2 + cos(pi v)/4, (u+v)/2) in [0,1]^8.
std::vector<double> plane_point(double u, double v);

/// m points of the curve at uniform parameters, 4 x m.
Tensor curve_in_cube(std::size_t m, std::mt19937_64& rng);
/// m points of the surface at uniform parameters, 8 x m.
Tensor plane_in_cube(std::size_t m, std::mt19937_64& rng);
/// m uniform points on the segment from p to q, D x m.
Tensor line_segment(std::size_t m, const std::vector<double>& p, const std::vector<double>& q, std::mt19937_64& rng);

}  // namespace lfm
