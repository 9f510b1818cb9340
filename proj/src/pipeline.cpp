#include "lfm/pipeline.hpp"

#include <fmt/format.h>

#include "lfm/errors.hpp"
#include "lfm/metrics.hpp"
#include "lfm/rng.hpp"

namespace lfm {

std::size_t data_dimension(const std::string& kind) {
  if (kind == "curve" || kind == "line") return 4;
  if (kind == "plane") return 8;
  throw ContractError(fmt::format("unknown data generator \"{}\"", kind));
}

Tensor generate_data(const std::string& kind, std::size_t m, std::mt19937_64& rng) {
  if (kind == "curve") return curve_in_cube(m, rng);
  if (kind == "plane") return plane_in_cube(m, rng);
  if (kind == "line") return line_segment(m, {0.1, 0.2, 0.9, 0.5}, {0.8, 0.6, 0.1, 0.5}, rng);
  throw ContractError(fmt::format("unknown data generator \"{}\"", kind));
}

TimeGrid sampling_grid(std::size_t n, std::size_t dim, double c, double horizon, std::size_t steps) {
  return steps > 0 ? TimeGrid::uniform(horizon, steps) : make_grid(n, dim, c, horizon);
}

LatentRunResult run_latent_flow(const LatentRunSettings& s) {
  s.target.validate();
  const std::size_t d = s.target.dim;
  OracleField oracle(s.target, s.horizon);
  auto data_rng = substream(s.seed, "data");
  const TrainingSet set = TrainingSet::draw(s.target, s.n, s.horizon, data_rng);

  TrainConfig cfg = s.train;
  cfg.seed = s.seed;
  cfg.horizon = s.horizon;
  cfg.radius = s.radius > 0.0 ? s.radius : default_radius(s.n);
  const auto spec =
      default_velocity_spec(d, cfg.radius, s.horizon, s.shape.layers, s.shape.heads, s.shape.value_dim, s.shape.ff_dim);

  LatentRunResult r;
  r.training = train(spec, set, cfg, &oracle);
  r.grid = sampling_grid(s.n, d, s.step_constant, s.horizon, s.steps);
  NetworkField field(r.training.net);
  r.samples = euler_flow(field, r.grid, gaussian_starts(d, s.eval_samples, derive_seed(s.seed, "sampling")));
  r.w2 = w2_exact(r.samples, s.target.stratified(s.eval_samples));
  const std::uint64_t mc_seed = derive_seed(s.seed, "mc-eval");
  r.population_gap = population_loss_gap(field, oracle, s.eval_mc, mc_seed);
  r.zero_field_gap = population_loss_gap(constant_field(std::vector<double>(d, 0.0), s.horizon), oracle, s.eval_mc, mc_seed);
  return r;
}

EndToEndResult run_end_to_end(const EndToEndSettings& s) {
  const std::size_t D = data_dimension(s.data), d = s.latent_dim;
  EndToEndResult r;

  auto pretrain_rng = substream(s.seed, "pretrain-data");
  const Tensor pretrain_data = generate_data(s.data, s.m, pretrain_rng);
  PretrainConfig pcfg = s.pretrain;
  pcfg.seed = s.seed;
  const auto& cs = s.coder_shape;
  r.pretrain = pretrain(default_encoder_spec(D, d, cs.layers, cs.heads, cs.value_dim, cs.ff_dim),
                        default_decoder_spec(d, D, cs.layers, cs.heads, cs.value_dim, cs.ff_dim), pretrain_data, pcfg);
  const AutoencoderPair& pair = r.pretrain.pair;

  // Without domain shift the target data come from the pre-training distribution.
  auto target_rng = substream(s.seed, "target-data");
  const DiscreteTarget latent = encode_batch(pair, generate_data(s.data, s.n, target_rng));
  const Tensor x1({d, s.n}, [&] {
    std::vector<double> v(d * s.n);
    for (std::size_t b = 0; b < s.n; ++b)
      for (std::size_t i = 0; i < d; ++i) v[i * s.n + b] = latent.atoms[b * d + i];
    return v;
  }());
  auto flow_rng = substream(s.seed, "flow-data");
  const TrainingSet set = TrainingSet::from_points(x1, s.horizon, flow_rng);

  auto eval_rng = substream(s.seed, "eval-data");
  const Tensor eval_data = generate_data(s.data, s.eval_samples, eval_rng);
  const Tensor starts = gaussian_starts(d, s.eval_samples, derive_seed(s.seed, "sampling"));
  const TimeGrid grid = sampling_grid(s.n, d, s.step_constant, s.horizon, s.steps);
  auto sample_w2 = [&](const RescaledVelocityNet& net) {
    NetworkField field(net);
    return w2_exact(decode_batch(pair, euler_flow(field, grid, starts)), eval_data);
  };

  TrainConfig cfg = s.train;
  cfg.seed = s.seed;
  cfg.horizon = s.horizon;
  cfg.radius = s.radius > 0.0 ? s.radius : default_radius(s.n);
  const auto& fs = s.flow_shape;
  const auto spec = default_velocity_spec(d, cfg.radius, s.horizon, fs.layers, fs.heads, fs.value_dim, fs.ff_dim);
  r.flow = train(spec, set, cfg, nullptr, [&](const EpochRecord& rec, const RescaledVelocityNet& net) {
    r.checkpoints.push_back({rec.epoch, sample_w2(net)});
  });
  r.w2 = sample_w2(r.flow.net);
  r.heldout_reconstruction = reconstruction_loss(pair, eval_data);
  return r;
}

}  // namespace lfm
