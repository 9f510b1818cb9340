#pragma once

#include <cstddef>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include <json.hpp>

#include "lfm/tensor.hpp"
#include "lfm/velocity_field.hpp"

namespace lfm {

/// Atomic probability measure on [0, 1]^d.
struct DiscreteTarget {
  std::size_t dim = 0;
  /// Atom j occupies entries [j*dim, (j+1)*dim).
  std::vector<double> atoms;
  std::vector<double> weights;

  std::size_t size() const { return weights.size(); }
  std::span<const double> atom(std::size_t j) const { return {atoms.data() + j * dim, dim}; }

  /// Weights nonnegative and summing to 1 (within 1e-12), atoms in the unit cube.
  void validate() const;

  static DiscreteTarget uniform(std::size_t dim, std::vector<double> atoms);
  static DiscreteTarget single(std::vector<double> atom);
  static DiscreteTarget from_json(const nlohmann::json& j);
  static DiscreteTarget load_json(const std::filesystem::path& path);
  /// One point per line, comma separated; a non-numeric first line is a header.
  static DiscreteTarget load_csv(const std::filesystem::path& path);

  nlohmann::json to_json() const;
  /// n i.i.d. draws as a dim x n tensor.
  Tensor sample(std::size_t n, std::mt19937_64& rng) const;
  /// n points with atom counts rounded from n w_j by largest remainder, in atom order.
  Tensor stratified(std::size_t n) const;
  std::vector<double> mean() const;
};

/// t x1 + sqrt(1 - t^2) x0.
std::vector<double> interpolate(std::span<const double> x0, std::span<const double> x1, double t);
/// x1 - t / sqrt(1 - t^2) x0, the regression target of the flow-matching loss.
std::vector<double> regression_label(std::span<const double> x0, std::span<const double> x1, double t);

/// Law of X_1 given X_t = x, with log-sum-exp normalization. At t = 0 this is the prior.
std::vector<double> posterior_weights(const DiscreteTarget& target, std::span<const double> x, double t);

/// Conditional moments of X_1 given X_t = x.
struct PosteriorMoments {
  std::vector<double> mean;             // m
  std::vector<double> covariance;       // C, d x d row-major
  double second_moment = 0.0;           // E[|X1|^2]
  std::vector<double> weighted_cube;    // E[X1 |X1|^2]
};
PosteriorMoments posterior_moments(const DiscreteTarget& target, std::span<const double> x, double t);

/// Exact minimizer of the truncated flow-matching loss for a discrete target.
class OracleField final : public VelocityField {
 public:
  OracleField(DiscreteTarget target, double horizon);

  std::size_t dim() const override { return target_.dim; }
  double horizon() const override { return horizon_; }
  Tensor evaluate(const Tensor& points, std::span<const double> times) const override;

  const DiscreteTarget& target() const { return target_; }

 private:
  DiscreteTarget target_;
  double horizon_;
};

/// (m - t x) / (1 - t^2); equals the prior mean at t = 0. Requires 0 <= t <= T.
std::vector<double> true_velocity(const OracleField& field, std::span<const double> x, double t);
/// Time derivative of the true velocity. Requires 0 < t <= T.
std::vector<double> true_velocity_dt(const OracleField& field, std::span<const double> x, double t);
/// Spatial Jacobian t/(1-t^2)^2 C - t/(1-t^2) I, d x d row-major. Requires 0 < t <= T.
std::vector<double> true_velocity_grad(const OracleField& field, std::span<const double> x, double t);
/// (1/t) grad log pi_t(x) + x/t, assembled from per-atom scores. Requires 1e-3 <= t <= T.
std::vector<double> score_velocity(const OracleField& field, std::span<const double> x, double t);

struct BoundsReport {
  double max_velocity = 0.0;  // max |v*_i|
  double velocity_bound = 0.0;
  double max_time_derivative = 0.0;  // max |dv*/dt|
  double time_derivative_bound = 0.0;
  double max_jacobian = 0.0;  // max ||grad v*||_op
  double jacobian_bound = 0.0;

  bool velocity_ok() const { return max_velocity <= velocity_bound; }
  bool time_derivative_ok() const { return max_time_derivative <= time_derivative_bound; }
  bool jacobian_ok() const { return max_jacobian <= jacobian_bound; }
  bool all_ok() const { return velocity_ok() && time_derivative_ok() && jacobian_ok(); }
};

/// Largest observed |v*_i|, |dv*/dt| and ||grad v*||_op over the samples against
/// (1+R)/(1-T^2), the explicit time-derivative bound, and T d/(1-T^2)^2.
/// Points must lie in [-R, R]^d and times in [0, T]; time derivatives skip t = 0.
BoundsReport check_bounds(const OracleField& field, const Tensor& points, std::span<const double> times, double radius);

/// Central-difference agreement of true_velocity_dt and true_velocity_grad at
/// one point: largest |fd - analytic| / max(|analytic|, 1) over entries.
struct DerivativeCheck {
  double time_error = 0.0;
  double jacobian_error = 0.0;
};
/// Requires h < t <= T - h.
DerivativeCheck finite_difference_check(const OracleField& field, std::span<const double> x, double t, double h = 1e-5);

/// Largest eigenvalue magnitude of a symmetric d x d row-major matrix.
double symmetric_operator_norm(std::span<const double> m, std::size_t d);

}  // namespace lfm
