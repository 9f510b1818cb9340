#include "lfm/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <fmt/format.h>

#include "lfm/errors.hpp"
#include "lfm/metrics.hpp"

namespace lfm {

TimeGrid TimeGrid::uniform(double horizon, std::size_t steps) {
  if (steps == 0) throw ContractError("time grid needs at least one step");
  if (!(horizon > 0.0)) throw ContractError(fmt::format("time grid horizon {} must be positive", horizon));
  TimeGrid g;
  g.knots.resize(steps + 1);
  for (std::size_t k = 0; k < steps; ++k) g.knots[k] = horizon * static_cast<double>(k) / static_cast<double>(steps);
  g.knots[steps] = horizon;
  return g;
}

void TimeGrid::validate() const {
  if (knots.size() < 2) throw ContractError("time grid needs at least two knots");
  if (knots.front() != 0.0) throw ContractError("time grid must start at 0");
  for (std::size_t k = 1; k < knots.size(); ++k)
    if (!(knots[k] > knots[k - 1])) throw ContractError(fmt::format("time grid not increasing at knot {}", k));
}

double TimeGrid::max_step() const {
  double m = 0.0;
  for (std::size_t k = 1; k < knots.size(); ++k) m = std::max(m, knots[k] - knots[k - 1]);
  return m;
}

double TimeGrid::cubic_step_sum() const {
  double s = 0.0;
  for (std::size_t k = 1; k < knots.size(); ++k) s += std::pow(knots[k] - knots[k - 1], 3);
  return s;
}

double early_stopping_time(std::size_t n) {
  if (n < 2) throw ContractError(fmt::format("early stopping schedule needs n >= 2, got {}", n));
  const double t = 1.0 - std::pow(std::log(static_cast<double>(n)), -1.0 / 6.0);
  return std::clamp(t, 0.5, 0.999);
}

TimeGrid make_grid(std::size_t n, std::size_t dim, double c, std::optional<double> horizon) {
  if (n < 2) throw ContractError(fmt::format("make_grid needs n >= 2, got {}", n));
  if (!(c > 0.0)) throw ContractError("make_grid: step constant must be positive");
  const double T = horizon ? *horizon : early_stopping_time(n);
  const double cap = c * std::pow(static_cast<double>(n), -1.0 / (static_cast<double>(dim) + 3.0));
  auto steps = static_cast<std::size_t>(std::ceil(T / cap));
  TimeGrid g = TimeGrid::uniform(T, std::max<std::size_t>(steps, 1));
  while (g.max_step() > cap) g = TimeGrid::uniform(T, g.steps() + 1);
  return g;
}

namespace {

void require_grid_inside(const VelocityField& v, const TimeGrid& grid) {
  grid.validate();
  if (grid.horizon() > v.horizon() * (1.0 + 1e-12))
    throw ContractError(fmt::format("grid reaches {} beyond the field horizon {}", grid.horizon(), v.horizon()));
}

// x + h k
Tensor axpy(const Tensor& x, double h, const Tensor& k) { return add(x, scale(k, h)); }

}  // namespace

Trajectories euler_trajectories(const VelocityField& v, const TimeGrid& grid, const Tensor& starts) {
  require_grid_inside(v, grid);
  if (starts.rows() != v.dim()) throw DimensionError("euler_flow: start dimension differs from field");
  Trajectories out;
  out.knots = grid.knots;
  out.states.reserve(grid.knots.size());
  out.states.push_back(starts);
  for (std::size_t k = 0; k + 1 < grid.knots.size(); ++k) {
    const double dt = grid.knots[k + 1] - grid.knots[k];
    Tensor next = axpy(out.states.back(), dt, v.evaluate(out.states.back(), grid.knots[k]));
    if (!next.all_finite()) throw DivergenceError(fmt::format("euler_flow: non-finite state after step {}", k));
    out.states.push_back(std::move(next));
  }
  return out;
}

Tensor euler_flow(const VelocityField& v, const TimeGrid& grid, const Tensor& starts) {
  require_grid_inside(v, grid);
  if (starts.rows() != v.dim()) throw DimensionError("euler_flow: start dimension differs from field");
  Tensor x = starts;
  for (std::size_t k = 0; k + 1 < grid.knots.size(); ++k) {
    const double dt = grid.knots[k + 1] - grid.knots[k];
    x = axpy(x, dt, v.evaluate(x, grid.knots[k]));
    if (!x.all_finite()) throw DivergenceError(fmt::format("euler_flow: non-finite state after step {}", k));
  }
  return x;
}

Tensor rk4_flow(const VelocityField& v, const Tensor& starts, double t0, double t1, std::size_t steps) {
  if (steps == 0) throw ContractError("rk4_flow needs at least one step");
  Tensor x = starts;
  const double h = (t1 - t0) / static_cast<double>(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = t0 + h * static_cast<double>(k);
    const double te = k + 1 == steps ? t1 : t + h;
    const double tm = 0.5 * (t + te);
    Tensor k1 = v.evaluate(x, t);
    Tensor k2 = v.evaluate(axpy(x, 0.5 * h, k1), tm);
    Tensor k3 = v.evaluate(axpy(x, 0.5 * h, k2), tm);
    Tensor k4 = v.evaluate(axpy(x, h, k3), te);
    x = axpy(x, h / 6.0, add(add(k1, scale(k2, 2.0)), add(scale(k3, 2.0), k4)));
    if (!x.all_finite()) throw DivergenceError(fmt::format("rk4_flow: non-finite state after step {}", k));
  }
  return x;
}

Tensor reference_segment(const VelocityField& v, const Tensor& starts, double t0, double t1, double tol) {
  if (!(tol > 0.0)) throw ContractError("reference flow tolerance must be positive");
  if (t1 > v.horizon() * (1.0 + 1e-12)) throw ContractError("reference flow beyond the field horizon");
  constexpr std::size_t max_steps = std::size_t{1} << 20;
  std::size_t steps = 16;
  Tensor prev = rk4_flow(v, starts, t0, t1, steps);
  while (steps < max_steps) {
    steps *= 2;
    Tensor cur = rk4_flow(v, starts, t0, t1, steps);
    double diff = 0.0;
    auto a = cur.data(), b = prev.data();
    for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
    if (diff < tol) return cur;
    prev = std::move(cur);
  }
  throw ConvergenceError(fmt::format("reference flow did not reach tolerance {} within {} steps", tol, max_steps));
}

Tensor reference_flow(const VelocityField& v, double horizon, const Tensor& starts, double tol) {
  return reference_segment(v, starts, 0.0, horizon, tol);
}

std::vector<DiscretizationPoint> discretization_error_curve(const VelocityField& v, double horizon, const Tensor& starts,
                                                            std::span<const std::size_t> steps, double tol) {
  const Tensor ref = reference_flow(v, horizon, starts, tol);
  std::vector<DiscretizationPoint> out;
  for (std::size_t n : steps) {
    const TimeGrid grid = TimeGrid::uniform(horizon, n);
    const Tensor euler = euler_flow(v, grid, starts);
    out.push_back({n, grid.max_step(), coupling_w2(ref, euler), w2_exact(ref, euler)});
  }
  return out;
}

DeviationLog euler_deviation_log(const VelocityField& v, const TimeGrid& grid, std::span<const double> start,
                                 double tol) {
  require_grid_inside(v, grid);
  const std::size_t d = start.size();
  if (d != v.dim()) throw DimensionError("euler_deviation_log: start dimension differs from field");
  DeviationLog log;
  log.knots = grid.knots;
  Tensor exact = Tensor({d, 1}, std::vector<double>(start.begin(), start.end()));
  Tensor approx = exact;
  log.deviation.push_back(0.0);
  for (std::size_t k = 0; k + 1 < grid.knots.size(); ++k) {
    const double t0 = grid.knots[k], t1 = grid.knots[k + 1], dt = t1 - t0;
    Tensor next_exact = reference_segment(v, exact, t0, t1, tol);
    Tensor one_step = axpy(exact, dt, v.evaluate(exact, t0));
    log.defect.push_back(frobenius_norm(sub(next_exact, one_step)) / dt);
    approx = axpy(approx, dt, v.evaluate(approx, t0));
    exact = std::move(next_exact);
    log.deviation.push_back(frobenius_norm(sub(approx, exact)));
  }
  return log;
}

GronwallCheck gronwall_check(std::span<const double> knots, std::span<const double> f, std::span<const double> g,
                             double alpha) {
  if (f.size() != knots.size() || g.size() + 1 != knots.size())
    throw DimensionError("gronwall_check: need one f per knot and one g per step");
  GronwallCheck out;
  out.bound.resize(knots.size());
  for (std::size_t k = 0; k < knots.size(); ++k) {
    double b = std::exp(alpha * (knots[k] - knots[0])) * f[0];
    for (std::size_t j = 0; j < k; ++j) b += std::exp(alpha * (knots[k] - knots[j + 1])) * g[j] * (knots[j + 1] - knots[j]);
    out.bound[k] = b;
    if (f[k] > b * (1.0 + 1e-9) + 1e-15) out.holds = false;
    if (b > 0.0) out.worst_ratio = std::max(out.worst_ratio, f[k] / b);
  }
  return out;
}

Tensor gaussian_starts(std::size_t dim, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<double> out(dim * n);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < dim; ++i) out[i * n + b] = g(rng);
  return Tensor({dim, n}, std::move(out));
}

double early_stopping_w2(const DiscreteTarget& target, double horizon, std::size_t n, std::uint64_t seed, double tol) {
  OracleField field(target, horizon);
  const Tensor terminals = reference_flow(field, horizon, gaussian_starts(target.dim, n, seed), tol);
  return w2_exact(terminals, target.stratified(n));
}

}  // namespace lfm
