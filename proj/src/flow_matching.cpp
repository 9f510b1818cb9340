#include "lfm/flow_matching.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "lfm/csv.hpp"
#include "lfm/errors.hpp"
#include "lfm/rng.hpp"

namespace lfm {

namespace {

Tensor combine(const TrainingSet& s, bool label) {
  const std::size_t d = s.dim(), n = s.size();
  std::vector<double> out(d * n);
  auto a = s.x0.data(), b = s.x1.data();
  for (std::size_t j = 0; j < n; ++j) {
    const double t = s.times[j], c = std::sqrt(1.0 - t * t);
    const double w0 = label ? -t / c : c, w1 = label ? 1.0 : t;
    for (std::size_t i = 0; i < d; ++i) out[i * n + j] = w1 * b[i * n + j] + w0 * a[i * n + j];
  }
  return Tensor({d, n}, std::move(out));
}

Tensor columns_of(const Tensor& x, const std::vector<std::size_t>& cols) {
  const std::size_t d = x.rows(), n = x.cols(), m = cols.size();
  std::vector<double> out(d * m);
  auto src = x.data();
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = 0; k < m; ++k) out[i * m + k] = src[i * n + cols[k]];
  return make_unchecked({d, m}, std::move(out));
}

struct Batch {
  Tensor xt, labels;
  std::vector<double> times;
};

Batch make_batch(const Tensor& xt, const Tensor& labels, const std::vector<double>& times,
                 const std::vector<std::size_t>& cols) {
  Batch b{columns_of(xt, cols), columns_of(labels, cols), {}};
  b.times.reserve(cols.size());
  for (std::size_t c : cols) b.times.push_back(times[c]);
  return b;
}

std::vector<Tensor*> parameter_list(TransformerNet& net) {
  std::vector<Tensor*> out;
  net.for_each_parameter([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

LossAndGradient batch_loss_gradient(const RescaledVelocityNet& v, const Batch& b) {
  Tape tape;
  BoundNet bound = bind(v.inner, tape, true);
  Var out = velocity_forward(v, bound, tape, b.xt, b.times);
  Var loss = scale(sum_squares(out - tape.constant(b.labels)), 1.0 / static_cast<double>(b.times.size()));
  LossAndGradient r;
  r.loss = loss.value().item();
  if (!std::isfinite(r.loss)) return r;
  Gradients g = tape.backward(loss);
  visit_parameters(bound, [&](const std::string&, const Var& p) { r.gradients.push_back(g.of(p)); });
  return r;
}

}  // namespace

Tensor TrainingSet::interpolants() const { return combine(*this, false); }
Tensor TrainingSet::labels() const { return combine(*this, true); }

void TrainingSet::validate(double horizon) const {
  if (times.empty()) throw ContractError("training set is empty");
  if (x0.rows() != x1.rows() || x0.cols() != size() || x1.cols() != size())
    throw DimensionError(fmt::format("training set shapes {} and {} for {} times", x0.shape_string(), x1.shape_string(),
                                     size()));
  for (double t : times)
    if (!(t >= 0.0 && t < horizon)) throw ContractError(fmt::format("training time {} outside [0, {})", t, horizon));
  for (double v : x1.data())
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError(fmt::format("training target coordinate {} outside [0, 1]", v));
}

TrainingSet TrainingSet::draw(const DiscreteTarget& target, std::size_t n, double horizon, std::mt19937_64& rng) {
  auto s = sample_interpolant(target, horizon, n, rng);
  return {std::move(s.times), std::move(s.x0), std::move(s.x1)};
}

TrainingSet TrainingSet::from_points(const Tensor& x1, double horizon, std::mt19937_64& rng) {
  const std::size_t d = x1.rows(), n = x1.cols();
  std::uniform_real_distribution<double> time(0.0, horizon);
  std::normal_distribution<double> noise;
  TrainingSet s;
  s.times.resize(n);
  std::vector<double> x0(d * n);
  for (std::size_t b = 0; b < n; ++b) {
    s.times[b] = time(rng);
    for (std::size_t i = 0; i < d; ++i) x0[i * n + b] = noise(rng);
  }
  s.x0 = Tensor({d, n}, std::move(x0));
  s.x1 = x1;
  return s;
}

double default_radius(std::size_t n) {
  return std::max(1.0, std::sqrt(2.0 * std::log(static_cast<double>(std::max<std::size_t>(n, 1)))));
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ContractError("train config: batch_size must be positive");
  if (!(adam.learning_rate > 0.0)) throw ContractError("train config: learning_rate must be positive");
  if (!(horizon > 0.5 && horizon < 1.0)) throw ContractError(fmt::format("train config: horizon {} outside (1/2, 1)", horizon));
  if (radius < 0.0) throw ContractError("train config: radius must be nonnegative");
  if (clip_threshold < 0.0) throw ContractError("train config: clip_threshold must be nonnegative");
  if (log_every == 0) throw ContractError("train config: log_every must be positive");
}

TransformerSpec default_velocity_spec(std::size_t dim, double radius, double horizon, std::size_t layers,
                                      std::size_t heads, std::size_t value_dim, std::size_t ff_dim) {
  const double bound = (1.0 + radius) / (1.0 - horizon * horizon) * std::sqrt(static_cast<double>(dim));
  return velocity_spec(dim, layers, heads, value_dim, ff_dim, bound, 0.0);
}

double empirical_loss(const VelocityField& v, const TrainingSet& s) {
  if (s.size() == 0) throw ContractError("empirical_loss: empty training set");
  const Tensor r = sub(s.labels(), v.evaluate(s.interpolants(), s.times));
  return sum_squares(r) / static_cast<double>(s.size());
}

LossAndGradient empirical_loss_gradient(const RescaledVelocityNet& v, const TrainingSet& s,
                                        const std::vector<std::size_t>& columns) {
  if (columns.empty()) throw ContractError("empirical_loss_gradient: no columns");
  return batch_loss_gradient(v, make_batch(s.interpolants(), s.labels(), s.times, columns));
}

Estimate population_loss_gap(const VelocityField& v, const OracleField& oracle, std::size_t mc, std::uint64_t seed) {
  return l2_velocity_error(v, oracle, mc, seed);
}

Estimate loss_difference(const VelocityField& v, const OracleField& oracle, std::size_t mc, std::uint64_t seed) {
  if (mc < 2) throw ContractError("loss_difference: need at least two samples");
  std::mt19937_64 rng(seed);
  auto s = sample_interpolant(oracle.target(), oracle.horizon(), mc, rng);
  TrainingSet set{s.times, s.x0, s.x1};
  const Tensor labels = set.labels();
  const Tensor rv = sub(labels, v.evaluate(s.xt, s.times));
  const Tensor ro = sub(labels, oracle.evaluate(s.xt, s.times));
  const std::size_t d = labels.rows();
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t b = 0; b < mc; ++b) {
    double e = 0.0;
    for (std::size_t i = 0; i < d; ++i) e += rv(i, b) * rv(i, b) - ro(i, b) * ro(i, b);
    sum += e;
    sum_sq += e * e;
  }
  const double n = static_cast<double>(mc), mean = sum / n;
  const double var = std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0));
  return {mean, std::sqrt(var / n)};
}

TrainResult train(const TransformerSpec& spec, const TrainingSet& s, const TrainConfig& cfg, const OracleField* oracle,
                  const CheckpointFn& on_checkpoint) {
  cfg.validate();
  spec.validate();
  if (spec.input_dim != s.dim() + 1 || spec.output_dim != s.dim())
    throw ContractError(fmt::format("train: spec maps {} -> {} but data has dimension {}", spec.input_dim,
                                    spec.output_dim, s.dim()));
  auto rng = substream(cfg.seed, "init");
  RescaledVelocityNet init{make_random_net(spec, rng), cfg.radius > 0.0 ? cfg.radius : default_radius(s.size()),
                           cfg.horizon};
  return train_from(std::move(init), s, cfg, oracle, on_checkpoint);
}

TrainResult train_from(RescaledVelocityNet init, const TrainingSet& s, const TrainConfig& cfg,
                       const OracleField* oracle, const CheckpointFn& on_checkpoint) {
  cfg.validate();
  s.validate(cfg.horizon);
  if (init.dim() != s.dim()) throw DimensionError("train: network and data dimensions differ");
  if (std::abs(init.horizon - cfg.horizon) > 1e-15) throw ContractError("train: network horizon differs from config");
  if (oracle && std::abs(oracle->horizon() - cfg.horizon) > 1e-15)
    throw ContractError("train: oracle horizon differs from config");

  TrainResult result;
  RescaledVelocityNet net = std::move(init);
  const Tensor xt = s.interpolants(), labels = s.labels();
  const std::uint64_t eval_seed = derive_seed(cfg.seed, "mc-eval");
  const std::uint64_t lip_seed = derive_seed(cfg.seed, "lipschitz");
  const Box box = Box::cube(s.dim(), -net.radius, net.radius);

  auto record = [&](std::size_t epoch) {
    NetworkField field(net);
    EpochRecord r;
    r.epoch = epoch;
    r.empirical_loss = empirical_loss(field, s);
    if (!std::isfinite(r.empirical_loss))
      throw DivergenceError(fmt::format("train: empirical loss {} at epoch {}", r.empirical_loss, epoch));
    if (oracle && cfg.eval_mc > 0) {
      auto gap = population_loss_gap(field, *oracle, cfg.eval_mc, eval_seed);
      r.population_gap = gap.value;
      r.population_gap_stderr = gap.std_error;
    }
    if (cfg.lipschitz_pairs > 0) {
      auto lip = measure_lipschitz(field, box, cfg.lipschitz_pairs, lip_seed);
      r.lipschitz_x = lip.spatial;
      r.lipschitz_t = lip.temporal;
    }
    r.parameter_norm = parameter_norm(net.inner);
    if (result.log.empty() || r.empirical_loss < result.log[result.best_epoch_index].empirical_loss) {
      result.best_epoch_index = result.log.size();
      result.best_epoch = epoch;
      result.net = net;
    }
    result.log.push_back(r);
    if (on_checkpoint) on_checkpoint(r, net);
  };

  record(0);
  Adam adam(cfg.adam);
  auto rng = substream(cfg.seed, "flow-train");
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), 0);
  const auto params = parameter_list(net.inner);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<std::size_t> cols(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(stop));
      auto lg = batch_loss_gradient(net, make_batch(xt, labels, s.times, cols));
      if (!std::isfinite(lg.loss))
        throw DivergenceError(fmt::format("train: batch loss {} at epoch {}, sample offset {}", lg.loss, epoch, start));
      std::vector<const Tensor*> grads;
      for (const auto& g : lg.gradients) grads.push_back(&g);
      adam.step(params, grads);
      if (cfg.clip_threshold > 0.0) clip_operator_norms(net.inner, cfg.clip_threshold);
    }
    if (epoch % cfg.log_every == 0 || epoch == cfg.epochs) record(epoch);
  }
  return result;
}

void write_training_log(const std::filesystem::path& path, const std::vector<EpochRecord>& log) {
  CsvWriter csv(path, {"epoch", "empirical_loss", "population_gap", "population_gap_stderr", "lipschitz_x",
                       "lipschitz_t", "parameter_norm"});
  for (const auto& r : log)
    csv.row({std::to_string(r.epoch), format_double(r.empirical_loss), format_double(r.population_gap),
             format_double(r.population_gap_stderr), format_double(r.lipschitz_x), format_double(r.lipschitz_t),
             format_double(r.parameter_norm)});
}

}  // namespace lfm
