#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "lfm/oracle.hpp"
#include "lfm/tensor.hpp"
#include "lfm/velocity_field.hpp"

namespace lfm {

/// Uniformly weighted point set, stored d x n.
struct EmpiricalMeasure {
  Tensor points;

  explicit EmpiricalMeasure(Tensor pts);
  std::size_t dim() const { return points.rows(); }
  std::size_t size() const { return points.cols(); }
};

/// Minimum-cost perfect matching for a square cost matrix (row-major n x n).
/// Returns the column assigned to each row. O(n^3).
std::vector<std::size_t> solve_assignment(std::span<const double> cost, std::size_t n);

/// Exact W2 between equal-size uniform measures. Throws DimensionError on
/// unequal sizes or dimensions.
double w2_exact(const EmpiricalMeasure& a, const EmpiricalMeasure& b);
double w2_exact(const Tensor& a, const Tensor& b);

/// sqrt(mean |a_i - b_i|^2) for paired columns: the cost of the index coupling.
double coupling_w2(const Tensor& a, const Tensor& b);

/// n columns drawn with replacement.
Tensor resample(const Tensor& points, std::size_t n, std::mt19937_64& rng);

struct Estimate {
  double value = 0.0;
  double std_error = 0.0;
};

/// Monte-Carlo estimate of (1/T) int_0^T E|v(X_t,t) - v*(X_t,t)|^2 dt with
/// t ~ U[0, T], X_0 ~ N(0, I), X_1 ~ target. Draws are a function of the seed only.
Estimate l2_velocity_error(const VelocityField& v, const OracleField& oracle, std::size_t mc, std::uint64_t seed);

/// One Monte-Carlo draw (t, x0, x1) per column.
struct InterpolantSample {
  std::vector<double> times;
  Tensor x0;  // d x n
  Tensor x1;  // d x n
  Tensor xt;  // d x n
};

/// Draws (t, x0, x1) sample by sample, so a smaller n yields a prefix of a larger one.
InterpolantSample sample_interpolant(const DiscreteTarget& target, double horizon, std::size_t n, std::mt19937_64& rng);

/// Axis-aligned spatial box.
struct Box {
  std::vector<double> lo, hi;

  static Box cube(std::size_t dim, double lo, double hi);
  std::size_t dim() const { return lo.size(); }
};

struct LipschitzEstimate {
  double spatial = 0.0;   // gamma_x
  double temporal = 0.0;  // gamma_t
};

/// Largest difference quotient over `pairs` random spatial pairs (shared time)
/// and `pairs` random time pairs (shared point), each running record refined by
/// a finite-difference Jacobian at its endpoints and midpoint. Times range over
/// [0, horizon]. A larger budget extends the same pair sequence, so the estimate
/// is nondecreasing in `pairs`.
LipschitzEstimate measure_lipschitz(const VelocityField& f, const Box& box, std::size_t pairs, std::uint64_t seed);

/// Spatial Lipschitz estimate of a time-independent map on a box.
double measure_lipschitz(const std::function<std::vector<double>(std::span<const double>)>& f, std::size_t out_dim,
                         const Box& box, std::size_t pairs, std::uint64_t seed);

/// Ordinary least-squares slope of log(y) against log(x).
double log_log_slope(std::span<const double> x, std::span<const double> y);

}  // namespace lfm
