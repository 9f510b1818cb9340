#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lfm/tensor.hpp"

namespace lfm {

/// Architecture of a network in the class T_{d,d'}(N, h, d_k, d_v, d_ff, B, J, gamma).
struct TransformerSpec {
  std::size_t input_dim = 1;
  std::size_t output_dim = 1;
  std::size_t tokens = 1;
  std::size_t patch_dim = 1;
  std::size_t layers = 1;
  std::size_t heads = 1;
  std::size_t key_dim = 2;
  std::size_t value_dim = 1;
  std::size_t ff_dim = 8;
  double output_bound = 1.0;
  /// Operator-norm threshold used for weight clipping during training.
  double lipschitz_budget = 0.0;
  /// Advisory only; reported next to the measured nonzero count.
  std::size_t sparsity_budget = 0;

  std::size_t model_dim() const { return heads * value_dim; }
  /// Columns of the embedding matrix: patch coordinates plus one-hot position.
  std::size_t embed_dim() const { return patch_dim + tokens; }

  /// Throws ContractError naming the offending field. The input may be
  /// shorter than patch_dim * tokens by less than one patch; the last token
  /// is zero padded.
  void validate() const;

  friend bool operator==(const TransformerSpec&, const TransformerSpec&) = default;
};

/// Patch layout used when the input dimension is not fixed by the caller:
/// one token while the input fits in 9 coordinates, two tokens otherwise.
void default_layout(std::size_t input_dim, std::size_t& patch_dim, std::size_t& tokens);

template <class T>
struct HeadParams {
  T query;   // d_k x d_model
  T key;     // d_k x d_model
  T value;   // d_v x d_model
  T output;  // d_model x d_v
};

template <class T>
struct LayerParams {
  std::vector<HeadParams<T>> heads;
  T w1;  // d_ff x d_model
  T b1;  // d_ff
  T w2;  // d_model x d_ff
  T b2;  // d_model
};

template <class T>
struct NetParams {
  T embed_weight;    // d_model x (d_patch + l)
  T embed_bias;      // d_model
  std::vector<LayerParams<T>> layers;
  T readout_weight;  // d' x d_model
  T readout_bias;    // d'
};

/// Calls f(name, field) for every parameter in a fixed order.
template <class P, class F>
void visit_parameters(P& p, F&& f) {
  f(std::string("embed.weight"), p.embed_weight);
  f(std::string("embed.bias"), p.embed_bias);
  for (std::size_t r = 0; r < p.layers.size(); ++r) {
    auto& layer = p.layers[r];
    const std::string prefix = "layer" + std::to_string(r);
    for (std::size_t s = 0; s < layer.heads.size(); ++s) {
      const std::string hp = prefix + ".head" + std::to_string(s);
      f(hp + ".query", layer.heads[s].query);
      f(hp + ".key", layer.heads[s].key);
      f(hp + ".value", layer.heads[s].value);
      f(hp + ".output", layer.heads[s].output);
    }
    f(prefix + ".ff.w1", layer.w1);
    f(prefix + ".ff.b1", layer.b1);
    f(prefix + ".ff.w2", layer.w2);
    f(prefix + ".ff.b2", layer.b2);
  }
  f(std::string("readout.weight"), p.readout_weight);
  f(std::string("readout.bias"), p.readout_bias);
}

using BoundNet = NetParams<Var>;

struct TransformerNet {
  TransformerSpec spec;
  NetParams<Tensor> weights;

  template <class F>
  void for_each_parameter(F&& f) {
    visit_parameters(weights, f);
  }
  template <class F>
  void for_each_parameter(F&& f) const {
    visit_parameters(weights, f);
  }
};

/// Network with every weight zero: all sublayers reduce to their skip path.
TransformerNet make_zero_net(const TransformerSpec& spec);
/// Uniform initialization in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per matrix,
/// biases drawn with the fan-in of their matrix.
TransformerNet make_random_net(const TransformerSpec& spec, std::mt19937_64& rng);

/// Records every parameter on the tape, as leaves when trainable.
BoundNet bind(const TransformerNet& net, Tape& tape, bool trainable);

/// Hidden states recorded during a forward pass: the embedding followed by
/// the output of every attention and feedforward sublayer.
using ForwardTrace = std::vector<Tensor>;

// Building blocks. Token matrices are d_model x (batch * l); column b*l + j
// is token j of sample b.
Var embed_input(const Var& patches, const Var& weight, const Var& bias, std::size_t tokens);
Var attention_layer(const Var& z, const std::vector<HeadParams<Var>>& heads, std::size_t tokens);
Var feedforward_layer(const Var& y, const Var& w1, const Var& b1, const Var& w2, const Var& b2);

/// Full network on a batch: x is input_dim x batch, result is output_dim x batch.
Var forward(const TransformerSpec& spec, const BoundNet& params, const Var& x, ForwardTrace* trace = nullptr);
Tensor forward(const TransformerNet& net, const Tensor& x, ForwardTrace* trace = nullptr);
/// Single input vector of length input_dim.
std::vector<double> forward_point(const TransformerNet& net, std::span<const double> x);

/// Number of nonzero parameters (the ||.||_0 count of the class definition).
std::size_t count_nonzero_parameters(const TransformerNet& net);
/// Largest operator norm over the weight matrices.
double max_weight_norm(const TransformerNet& net);
/// Scales every weight matrix down to operator norm at most `threshold`.
/// Returns the number of matrices that were rescaled.
std::size_t clip_operator_norms(TransformerNet& net, double threshold);
double parameter_norm(const TransformerNet& net);

nlohmann::json spec_to_json(const TransformerSpec& spec);
TransformerSpec spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TransformerNet& net);
TransformerNet net_from_json(const nlohmann::json& j);

/**
 * Velocity network of the rescaled class: the spatial argument is projected
 * onto [-R, R]^d and mapped affinely to [0, 1]^d, time is divided by T and
 * appended as the last input coordinate.
 */
struct RescaledVelocityNet {
  TransformerNet inner;
  double radius = 1.0;
  double horizon = 0.9;

  std::size_t dim() const { return inner.spec.output_dim; }
  /// gamma_x = gamma / (2R)
  double spatial_budget() const { return inner.spec.lipschitz_budget / (2.0 * radius); }
  /// gamma_t = gamma / T
  double time_budget() const { return inner.spec.lipschitz_budget / horizon; }
};

/// Spec of the inner network for a d-dimensional velocity field.
TransformerSpec velocity_spec(std::size_t dim, std::size_t layers, std::size_t heads, std::size_t value_dim,
                              std::size_t ff_dim, double output_bound, double lipschitz_budget);

/// Inner-network input for points (d x batch) at the given times.
Tensor velocity_input(const RescaledVelocityNet& v, const Tensor& points, std::span<const double> times);
Tensor velocity_forward(const RescaledVelocityNet& v, const Tensor& points, std::span<const double> times);
Var velocity_forward(const RescaledVelocityNet& v, const BoundNet& params, Tape& tape, const Tensor& points,
                     std::span<const double> times);
std::vector<double> velocity_forward(const RescaledVelocityNet& v, std::span<const double> x, double t);

nlohmann::json to_json(const RescaledVelocityNet& v);
RescaledVelocityNet velocity_net_from_json(const nlohmann::json& j);

}  // namespace lfm
