#include "lfm/autoencoder.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "lfm/csv.hpp"
#include "lfm/errors.hpp"
#include "lfm/rng.hpp"

namespace lfm {

namespace {

TransformerSpec coder_spec(std::size_t in, std::size_t out, std::size_t layers, std::size_t heads,
                           std::size_t value_dim, std::size_t ff_dim) {
  TransformerSpec s;
  s.input_dim = in;
  s.output_dim = out;
  default_layout(in, s.patch_dim, s.tokens);
  s.layers = layers;
  s.heads = heads;
  s.key_dim = 2;
  s.value_dim = value_dim;
  s.ff_dim = ff_dim;
  // Twice the diameter of the unit cube; the clamps keep the relevant range smaller.
  s.output_bound = 2.0 * std::sqrt(static_cast<double>(out));
  return s;
}

Tensor clamp_unit(const Tensor& x) { return clamp(x, 0.0, 1.0); }

Tensor columns_of(const Tensor& x, std::span<const std::size_t> cols) {
  const std::size_t d = x.rows(), n = x.cols(), m = cols.size();
  std::vector<double> out(d * m);
  auto src = x.data();
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = 0; k < m; ++k) out[i * m + k] = src[i * n + cols[k]];
  return make_unchecked({d, m}, std::move(out));
}

}  // namespace

void AutoencoderPair::validate() const {
  encoder.spec.validate();
  decoder.spec.validate();
  if (encoder.spec.output_dim != decoder.spec.input_dim)
    throw ContractError(fmt::format("autoencoder: encoder output {} differs from decoder input {}",
                                    encoder.spec.output_dim, decoder.spec.input_dim));
  if (decoder.spec.output_dim != encoder.spec.input_dim)
    throw ContractError(fmt::format("autoencoder: decoder output {} differs from data dimension {}",
                                    decoder.spec.output_dim, encoder.spec.input_dim));
}

TransformerSpec default_encoder_spec(std::size_t data_dim, std::size_t latent_dim, std::size_t layers,
                                     std::size_t heads, std::size_t value_dim, std::size_t ff_dim) {
  return coder_spec(data_dim, latent_dim, layers, heads, value_dim, ff_dim);
}

TransformerSpec default_decoder_spec(std::size_t latent_dim, std::size_t data_dim, std::size_t layers,
                                     std::size_t heads, std::size_t value_dim, std::size_t ff_dim) {
  return coder_spec(latent_dim, data_dim, layers, heads, value_dim, ff_dim);
}

AutoencoderPair make_random_pair(const TransformerSpec& encoder, const TransformerSpec& decoder, std::mt19937_64& rng) {
  AutoencoderPair p{make_random_net(encoder, rng), make_random_net(decoder, rng)};
  p.validate();
  return p;
}

AutoencoderPair identity_pair(std::size_t dim) {
  TransformerSpec s;
  s.input_dim = s.output_dim = dim;
  s.patch_dim = dim;
  s.tokens = 1;
  s.layers = 1;
  s.heads = 1;
  s.value_dim = dim;
  s.output_bound = 2.0 * std::sqrt(static_cast<double>(dim));
  TransformerNet net = make_zero_net(s);
  auto w = net.weights.embed_weight.mutable_data();
  for (std::size_t i = 0; i < dim; ++i) w[i * (dim + 1) + i] = 1.0;
  net.weights.readout_weight = Tensor::identity(dim);
  return {net, net};
}

Tensor encode(const AutoencoderPair& pair, const Tensor& data) { return clamp_unit(forward(pair.encoder, data)); }

Tensor decode(const AutoencoderPair& pair, const Tensor& latent) { return forward(pair.decoder, clamp_unit(latent)); }

std::vector<double> reconstruction_errors(const AutoencoderPair& pair, const Tensor& data) {
  const Tensor r = sub(decode(pair, encode(pair, data)), data);
  std::vector<double> out(data.cols(), 0.0);
  for (std::size_t i = 0; i < r.rows(); ++i)
    for (std::size_t b = 0; b < r.cols(); ++b) out[b] += r(i, b) * r(i, b);
  return out;
}

double reconstruction_loss(const AutoencoderPair& pair, const Tensor& data) {
  if (data.rank() != 2 || data.cols() == 0) throw ContractError("reconstruction_loss: empty data");
  const auto e = reconstruction_errors(pair, data);
  return std::accumulate(e.begin(), e.end(), 0.0) / static_cast<double>(e.size());
}

void PretrainConfig::validate() const {
  if (batch_size == 0) throw ContractError("pretrain config: batch_size must be positive");
  if (!(adam.learning_rate > 0.0)) throw ContractError("pretrain config: learning_rate must be positive");
  if (clip_threshold < 0.0) throw ContractError("pretrain config: clip_threshold must be nonnegative");
  if (log_every == 0) throw ContractError("pretrain config: log_every must be positive");
}

PretrainResult pretrain(const TransformerSpec& encoder, const TransformerSpec& decoder, const Tensor& data,
                        const PretrainConfig& cfg) {
  auto rng = substream(cfg.seed, "init");
  return pretrain_from(make_random_pair(encoder, decoder, rng), data, cfg);
}

PretrainResult pretrain_from(AutoencoderPair init, const Tensor& data, const PretrainConfig& cfg) {
  cfg.validate();
  init.validate();
  if (data.rank() != 2 || data.cols() == 0) throw ContractError("pretrain: empty data");
  if (data.rows() != init.data_dim())
    throw DimensionError(fmt::format("pretrain: data dimension {} but encoder expects {}", data.rows(), init.data_dim()));

  PretrainResult result;
  AutoencoderPair pair = std::move(init);
  double best = std::numeric_limits<double>::infinity();
  auto record = [&](std::size_t epoch) {
    const double loss = reconstruction_loss(pair, data);
    if (!std::isfinite(loss)) throw DivergenceError(fmt::format("pretrain: loss {} at epoch {}", loss, epoch));
    if (loss < best) {
      best = loss;
      result.best_epoch = epoch;
      result.pair = pair;
    }
    result.log.push_back({epoch, loss});
  };

  record(0);
  Adam adam(cfg.adam);
  auto rng = substream(cfg.seed, "pretrain");
  std::vector<std::size_t> order(data.cols());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Tensor*> params;
  pair.encoder.for_each_parameter([&](const std::string&, Tensor& t) { params.push_back(&t); });
  pair.decoder.for_each_parameter([&](const std::string&, Tensor& t) { params.push_back(&t); });
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const Tensor batch = columns_of(data, std::span<const std::size_t>(order.data() + start, stop - start));
      Tape tape;
      BoundNet enc = bind(pair.encoder, tape, true), dec = bind(pair.decoder, tape, true);
      Var y = tape.constant(batch);
      Var raw = forward(pair.encoder.spec, enc, y);
      Var z = clamp(raw, 0.0, 1.0);
      // The clamp passes no gradient outside the cube; the penalty pulls saturated codes back.
      Var objective = sum_squares(forward(pair.decoder.spec, dec, z) - y) + sum_squares(raw - z);
      Var loss = scale(objective, 1.0 / static_cast<double>(stop - start));
      if (!std::isfinite(loss.value().item()))
        throw DivergenceError(fmt::format("pretrain: batch loss {} at epoch {}, sample offset {}", loss.value().item(),
                                          epoch, start));
      Gradients g = tape.backward(loss);
      std::vector<const Tensor*> grads;
      visit_parameters(enc, [&](const std::string&, const Var& v) { grads.push_back(&g.of(v)); });
      visit_parameters(dec, [&](const std::string&, const Var& v) { grads.push_back(&g.of(v)); });
      adam.step(params, grads);
      if (cfg.clip_threshold > 0.0) {
        clip_operator_norms(pair.encoder, cfg.clip_threshold);
        clip_operator_norms(pair.decoder, cfg.clip_threshold);
      }
    }
    if (epoch % cfg.log_every == 0 || epoch == cfg.epochs) record(epoch);
  }
  return result;
}

void write_pretrain_log(const std::filesystem::path& path, const std::vector<PretrainRecord>& log) {
  CsvWriter csv(path, {"epoch", "reconstruction_loss"});
  for (const auto& r : log) csv.row({std::to_string(r.epoch), format_double(r.loss)});
}

DiscreteTarget encode_batch(const AutoencoderPair& pair, const Tensor& batch) {
  if (batch.rank() != 2 || batch.cols() == 0) throw ContractError("encode_batch: empty batch");
  std::size_t outside = 0;
  for (double v : batch.data())
    if (!(v >= 0.0 && v <= 1.0)) ++outside;
  Tensor input = batch;
  if (outside > 0) {
    spdlog::warn("encode_batch: {} coordinates outside the unit cube were clamped", outside);
    input = clamp_unit(batch);
  }
  const Tensor z = encode(pair, input);
  const std::size_t d = z.rows(), n = z.cols();
  std::vector<double> atoms(d * n);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < d; ++i) atoms[b * d + i] = z(i, b);
  return DiscreteTarget::uniform(d, std::move(atoms));
}

Tensor decode_batch(const AutoencoderPair& pair, const Tensor& latent) {
  if (latent.rows() != pair.latent_dim())
    throw DimensionError(fmt::format("decode_batch: latent dimension {} but decoder expects {}", latent.rows(),
                                     pair.latent_dim()));
  return decode(pair, latent);
}

nlohmann::json to_json(const AutoencoderPair& pair) {
  return {{"encoder", to_json(pair.encoder)}, {"decoder", to_json(pair.decoder)}};
}

AutoencoderPair pair_from_json(const nlohmann::json& j) {
  if (!j.contains("encoder") || !j.contains("decoder")) throw ContractError("autoencoder JSON needs encoder and decoder");
  AutoencoderPair p{net_from_json(j.at("encoder")), net_from_json(j.at("decoder"))};
  p.validate();
  return p;
}

std::vector<double> curve_point(double s) {
  using std::numbers::pi;
  return {s, s * s, 0.5 + 0.25 * std::sin(2.0 * pi * s), 0.5 + 0.25 * std::cos(pi * s)};
}

std::vector<double> plane_point(double u, double v) {
  using std::numbers::pi;
  return {u, v, u * v, u * u, v * v, 0.5 + 0.25 * std::sin(pi * u), 0.5 + 0.25 * std::cos(pi * v), 0.5 * (u + v)};
}

namespace {

Tensor stack_points(std::size_t dim, std::size_t m, const std::function<std::vector<double>()>& next) {
  std::vector<double> out(dim * m);
  for (std::size_t b = 0; b < m; ++b) {
    const auto p = next();
    for (std::size_t i = 0; i < dim; ++i) out[i * m + b] = p[i];
  }
  return Tensor({dim, m}, std::move(out));
}

}  // namespace

Tensor curve_in_cube(std::size_t m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return stack_points(4, m, [&] { return curve_point(u(rng)); });
}

Tensor plane_in_cube(std::size_t m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return stack_points(8, m, [&] {
    const double a = u(rng), b = u(rng);
    return plane_point(a, b);
  });
}

Tensor line_segment(std::size_t m, const std::vector<double>& p, const std::vector<double>& q, std::mt19937_64& rng) {
  if (p.size() != q.size()) throw DimensionError("line_segment: endpoints differ in dimension");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return stack_points(p.size(), m, [&] {
    const double s = u(rng);
    std::vector<double> y(p.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = p[i] + s * (q[i] - p[i]);
    return y;
  });
}

}  // namespace lfm
