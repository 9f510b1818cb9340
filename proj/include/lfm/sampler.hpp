#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "lfm/oracle.hpp"
#include "lfm/tensor.hpp"
#include "lfm/velocity_field.hpp"

namespace lfm {

/// Knots 0 = t_0 < t_1 < ... < t_N = T.
struct TimeGrid {
  std::vector<double> knots;

  static TimeGrid uniform(double horizon, std::size_t steps);
  /// Throws ContractError unless the knots start at 0 and strictly increase.
  void validate() const;
  std::size_t steps() const { return knots.size() - 1; }
  double horizon() const { return knots.back(); }
  double max_step() const;
  /// Sum of cubed step lengths.
  double cubic_step_sum() const;
};

/// clamp(1 - (log n)^(-1/6), 0.5, 0.999). Requires n >= 2.
double early_stopping_time(std::size_t n);

/// Uniform grid whose step is at most c n^(-1/(d+3)). Without an explicit
/// horizon the early-stopping schedule picks T.
TimeGrid make_grid(std::size_t n, std::size_t dim, double c = 1.0, std::optional<double> horizon = std::nullopt);

/// States at every knot, each d x batch.
struct Trajectories {
  std::vector<double> knots;
  std::vector<Tensor> states;

  const Tensor& terminal() const { return states.back(); }
};

/// Explicit Euler on the grid; throws DivergenceError naming the step when a state turns non-finite.
Trajectories euler_trajectories(const VelocityField& v, const TimeGrid& grid, const Tensor& starts);
Tensor euler_flow(const VelocityField& v, const TimeGrid& grid, const Tensor& starts);

/// Classical RK4 with `steps` uniform steps from t0 to t1.
Tensor rk4_flow(const VelocityField& v, const Tensor& starts, double t0, double t1, std::size_t steps);

/// RK4 from t0 to t1, doubling the step count from 16 until successive
/// terminal states differ by less than tol in max norm. Throws
/// ConvergenceError past 2^20 steps.
Tensor reference_segment(const VelocityField& v, const Tensor& starts, double t0, double t1, double tol = 1e-8);
/// Reference flow over [0, T], the stand-in for the continuous flow.
Tensor reference_flow(const VelocityField& v, double horizon, const Tensor& starts, double tol = 1e-8);

struct DiscretizationPoint {
  std::size_t steps = 0;
  double max_step = 0.0;
  double coupling_w2 = 0.0;  // shared-start coupling
  double exact_w2 = 0.0;     // optimal assignment
};

/// Euler terminals on uniform grids against one reference terminal set.
std::vector<DiscretizationPoint> discretization_error_curve(const VelocityField& v, double horizon, const Tensor& starts,
                                                            std::span<const std::size_t> steps, double tol = 1e-8);

/// Per-knot deviation of one Euler path from the reference path with the same start,
/// and the one-step defect rate of Euler started on the reference path.
struct DeviationLog {
  std::vector<double> knots;
  std::vector<double> deviation;  // |Xhat(t_k) - X(t_k)|, one per knot
  std::vector<double> defect;     // |X(t_{k+1}) - X(t_k) - dt v(X(t_k), t_k)| / dt, one per step
};
DeviationLog euler_deviation_log(const VelocityField& v, const TimeGrid& grid, std::span<const double> start,
                                 double tol = 1e-10);

struct GronwallCheck {
  std::vector<double> bound;  // e^{alpha (t_k - t_0)} f_0 + sum_j e^{alpha (t_k - t_{j+1})} g_j dt_j
  bool holds = true;
  double worst_ratio = 0.0;  // max f_k / bound_k
};
/// Integrating-factor bound for f' <= alpha f + g with g given per step.
GronwallCheck gronwall_check(std::span<const double> knots, std::span<const double> f, std::span<const double> g,
                             double alpha);

/// W2 between exact-flow terminals of the oracle at horizon T from n Gaussian
/// starts and the stratified n-point sample of its target.
double early_stopping_w2(const DiscreteTarget& target, double horizon, std::size_t n, std::uint64_t seed,
                         double tol = 1e-8);

/// n x d standard normal starts laid out d x n.
Tensor gaussian_starts(std::size_t dim, std::size_t n, std::uint64_t seed);

}  // namespace lfm
