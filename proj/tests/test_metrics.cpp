#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "lfm/errors.hpp"
#include "lfm/metrics.hpp"

using namespace lfm;

namespace {

Tensor random_points(std::size_t d, std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::vector<double> v(d * n);
  for (auto& x : v) x = g(rng);
  return Tensor({d, n}, v);
}

double brute_force_w2(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.cols();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < a.rows(); ++k) s += std::pow(a(k, i) - b(k, perm[i]), 2);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return std::sqrt(best / n);
}

}  // namespace

TEST(W2Exact, Examples) {
  Tensor a = Tensor::from_rows({{0.3, -1.0, 2.0}, {1.0, 0.0, 5.0}});
  EXPECT_EQ(w2_exact(a, a), 0.0);
  EXPECT_DOUBLE_EQ(w2_exact(Tensor::from_rows({{0.0}}), Tensor::from_rows({{1.0}})), 1.0);
  EXPECT_DOUBLE_EQ(w2_exact(Tensor::from_rows({{0.0, 2.0}}), Tensor::from_rows({{3.0, 1.0}})), 1.0);
}

TEST(W2Exact, UnequalSizesThrow) {
  EXPECT_THROW(w2_exact(Tensor::from_rows({{0.0, 2.0}}), Tensor::from_rows({{1.0}})), DimensionError);
  EXPECT_THROW(w2_exact(Tensor::from_rows({{0.0}, {1.0}}), Tensor::from_rows({{1.0}})), DimensionError);
}

TEST(W2Exact, MatchesBruteForce) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + trial % 7;
    Tensor a = random_points(2, n, rng), b = random_points(2, n, rng);
    EXPECT_NEAR(w2_exact(a, b), brute_force_w2(a, b), 1e-12);
  }
}

TEST(W2Exact, MetricProperties) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = random_points(3, 40, rng), b = random_points(3, 40, rng), c = random_points(3, 40, rng);
    EXPECT_EQ(w2_exact(a, b), w2_exact(b, a));
    EXPECT_LE(w2_exact(a, c), w2_exact(a, b) + w2_exact(b, c) + 1e-9);
    EXPECT_LE(w2_exact(a, b), coupling_w2(a, b) + 1e-12);
  }
}

TEST(W2Exact, LipschitzPushForward) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor a = random_points(2, 30, rng), b = random_points(2, 30, rng);
    Tensor m = Tensor::matrix(3, 2, {g(rng), g(rng), g(rng), g(rng), g(rng), g(rng)});
    Tensor shift = Tensor::vector({g(rng), g(rng), g(rng)});
    auto push = [&](const Tensor& x) { return add_bias(matmul(m, x), shift); };
    const double lip = operator_norm(m, 200);
    EXPECT_LE(w2_exact(push(a), push(b)), lip * w2_exact(a, b) * (1 + 1e-9));
  }
}

TEST(W2Exact, PermutationInvariant) {
  std::mt19937_64 rng(4);
  Tensor a = random_points(2, 25, rng), b = random_points(2, 25, rng);
  std::vector<std::size_t> perm(25);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> pb(50);
  for (std::size_t j = 0; j < 25; ++j)
    for (std::size_t k = 0; k < 2; ++k) pb[k * 25 + j] = b(k, perm[j]);
  EXPECT_NEAR(w2_exact(a, b), w2_exact(a, Tensor({2, 25}, pb)), 1e-12);
}

TEST(Assignment, KnownOptimum) {
  std::vector<double> cost{4, 1, 3, 2, 0, 5, 3, 2, 2};
  auto m = solve_assignment(cost, 3);
  EXPECT_EQ(cost[0 * 3 + m[0]] + cost[1 * 3 + m[1]] + cost[2 * 3 + m[2]], 5.0);
}

TEST(L2VelocityError, OracleIsZeroAndOffsetIsExact) {
  OracleField f(DiscreteTarget::uniform(2, {0.1, 0.2, 0.9, 0.5}), 0.9);
  auto zero = l2_velocity_error(f, f, 1000, 7);
  EXPECT_EQ(zero.value, 0.0);
  EXPECT_EQ(zero.std_error, 0.0);
  OffsetField shifted(f, {0.3, -0.4});
  auto e = l2_velocity_error(shifted, f, 1000, 7);
  EXPECT_NEAR(e.value, 0.25, 1e-12);
  EXPECT_LT(e.std_error, 1e-12);
}

TEST(L2VelocityError, SeedDeterminesResult) {
  OracleField f(DiscreteTarget::uniform(1, {0.1, 0.9}), 0.9);
  auto zero = constant_field({0.0}, 0.9);
  auto a = l2_velocity_error(zero, f, 500, 11), b = l2_velocity_error(zero, f, 500, 11);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.std_error, b.std_error);
  EXPECT_NE(a.value, l2_velocity_error(zero, f, 500, 12).value);
}

TEST(SampleInterpolant, PrefixConsistent) {
  auto t = DiscreteTarget::uniform(2, {0.1, 0.2, 0.9, 0.5});
  std::mt19937_64 r1(5), r2(5);
  auto small = sample_interpolant(t, 0.9, 10, r1), big = sample_interpolant(t, 0.9, 30, r2);
  for (std::size_t b = 0; b < 10; ++b) {
    EXPECT_EQ(small.times[b], big.times[b]);
    EXPECT_EQ(small.xt(1, b), big.xt(1, b));
  }
}

TEST(MeasureLipschitz, ConstantField) {
  auto c = constant_field({1.0, -2.0}, 0.9);
  auto est = measure_lipschitz(c, Box::cube(2, -1, 1), 200, 1);
  EXPECT_EQ(est.spatial, 0.0);
  EXPECT_EQ(est.temporal, 0.0);
}

TEST(MeasureLipschitz, AffineFieldNearOperatorNorm) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 5; ++trial) {
    Tensor a = Tensor::matrix(3, 3, {g(rng), g(rng), g(rng), g(rng), g(rng), g(rng), g(rng), g(rng), g(rng)});
    auto f = affine_field(a, {0.5, 0.0, -1.0}, 0.9);
    const double norm = operator_norm(a, 500);
    auto est = measure_lipschitz(f, Box::cube(3, -2, 2), 10000, 3);
    EXPECT_LE(est.spatial, norm * 1.05);
    EXPECT_GE(est.spatial, norm * 0.95);
    EXPECT_EQ(est.temporal, 0.0);
  }
}

TEST(MeasureLipschitz, SingleAtomOracle) {
  const double T = 0.9;
  OracleField f(DiscreteTarget::single({0.5}), T);
  auto est = measure_lipschitz(f, Box::cube(1, -1, 1), 2000, 4);
  EXPECT_LE(est.spatial, T / (1 - T * T) * (1 + 1e-6));
  EXPECT_GE(est.spatial, 0.95 * T / (1 - T * T));
}

TEST(MeasureLipschitz, MonotoneInBudget) {
  OracleField f(DiscreteTarget::uniform(2, {0.1, 0.2, 0.9, 0.5, 0.4, 0.4}), 0.9);
  LipschitzEstimate prev;
  for (std::size_t pairs : {1, 4, 16, 64, 256}) {
    auto est = measure_lipschitz(f, Box::cube(2, -1.5, 1.5), pairs, 21);
    EXPECT_GE(est.spatial, prev.spatial);
    EXPECT_GE(est.temporal, prev.temporal);
    prev = est;
  }
  EXPECT_THROW(measure_lipschitz(f, Box::cube(2, -1, 1), 0, 1), ContractError);
}

TEST(LogLogSlope, PowerLaw) {
  std::vector<double> x{8, 16, 32, 64}, y;
  for (double v : x) y.push_back(3.0 / v);
  EXPECT_NEAR(log_log_slope(x, y), -1.0, 1e-12);
}
