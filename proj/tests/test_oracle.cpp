#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "lfm/errors.hpp"
#include "lfm/oracle.hpp"

using namespace lfm;

namespace {

DiscreteTarget random_target(std::size_t d, std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  DiscreteTarget t;
  t.dim = d;
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < d; ++i) t.atoms.push_back(u(rng));
    t.weights.push_back(0.2 + u(rng));
    total += t.weights.back();
  }
  for (double& w : t.weights) w /= total;
  double head = 0.0;
  for (std::size_t j = 0; j + 1 < n; ++j) head += t.weights[j];
  t.weights.back() = 1.0 - head;
  return t;
}

}  // namespace

TEST(Interpolate, Endpoints) {
  std::vector<double> x0{1.0, -2.0}, x1{0.3, 0.4};
  EXPECT_EQ(interpolate(x0, x1, 0.0), x0);
  EXPECT_EQ(interpolate(x0, x1, 1.0), x1);
}

TEST(Interpolate, Example) {
  auto x = interpolate(std::vector<double>{1, 0}, std::vector<double>{0, 1}, 0.6);
  EXPECT_NEAR(x[0], 0.8, 1e-15);
  EXPECT_NEAR(x[1], 0.6, 1e-15);
  EXPECT_THROW(interpolate(std::vector<double>{1}, std::vector<double>{0}, 1.1), ContractError);
}

TEST(RegressionLabel, Examples) {
  auto y = regression_label(std::vector<double>{1, 0}, std::vector<double>{0, 1}, 0.6);
  EXPECT_NEAR(y[0], -0.75, 1e-15);
  EXPECT_NEAR(y[1], 1.0, 1e-15);
  std::vector<double> x1{0.2, 0.9};
  EXPECT_EQ(regression_label(std::vector<double>{0.5, 1}, x1, 0.0), x1);
  EXPECT_EQ(regression_label(std::vector<double>{0, 0}, x1, 0.95), x1);
  EXPECT_THROW(regression_label(x1, x1, 1.0), ContractError);
}

TEST(DiscreteTargetTest, Validation) {
  DiscreteTarget t;
  t.dim = 1;
  t.atoms = {0.2, 0.4};
  t.weights = {0.5, 0.6};
  EXPECT_THROW(t.validate(), ContractError);
  t.weights = {0.5, 0.5};
  EXPECT_NO_THROW(t.validate());
  t.atoms = {0.2, 1.4};
  EXPECT_THROW(t.validate(), ContractError);
  t.weights = {1.5, -0.5};
  t.atoms = {0.2, 0.4};
  EXPECT_THROW(t.validate(), ContractError);
}

TEST(DiscreteTargetTest, JsonAndCsv) {
  auto t = DiscreteTarget::from_json(nlohmann::json::parse(R"({"atoms": [[0.1, 0.2], [0.3, 0.4]], "weights": [0.25, 0.75]})"));
  EXPECT_EQ(t.dim, 2u);
  EXPECT_EQ(t.size(), 2u);
  EXPECT_DOUBLE_EQ(t.atom(1)[0], 0.3);
  auto back = DiscreteTarget::from_json(t.to_json());
  EXPECT_EQ(back.atoms, t.atoms);
  EXPECT_EQ(back.weights, t.weights);

  const auto path = std::filesystem::temp_directory_path() / "lfm_oracle_cloud.csv";
  {
    std::ofstream out(path);
    out << "x,y\n0.1,0.2\n0.5,0.5\n\n0.9,0.0\n";
  }
  auto c = DiscreteTarget::load_csv(path);
  std::filesystem::remove(path);
  EXPECT_EQ(c.dim, 2u);
  ASSERT_EQ(c.size(), 3u);
  EXPECT_DOUBLE_EQ(c.atom(2)[0], 0.9);
  EXPECT_NEAR(c.weights[0], 1.0 / 3.0, 1e-15);
}

TEST(PosteriorWeights, SingleAtomAndSymmetry) {
  auto one = DiscreteTarget::single({0.4});
  EXPECT_EQ(posterior_weights(one, std::vector<double>{3.0}, 0.7), std::vector<double>{1.0});
  auto two = DiscreteTarget::uniform(1, {0.2, 0.8});
  auto p = posterior_weights(two, std::vector<double>{0.35}, 0.7);
  EXPECT_NEAR(p[0], 0.5, 1e-15);
  EXPECT_NEAR(p[1], 0.5, 1e-15);
}

TEST(PosteriorWeights, DirectKernel) {
  auto two = DiscreteTarget::uniform(1, {0.0, 1.0});
  auto p = posterior_weights(two, std::vector<double>{0.9}, 0.9);
  const double k0 = 0.5 * std::exp(-0.81 / 0.38), k1 = 0.5 * std::exp(0.0);
  EXPECT_NEAR(p[0], k0 / (k0 + k1), 1e-15);
  EXPECT_NEAR(p[1], k1 / (k0 + k1), 1e-15);
}

TEST(PosteriorWeights, PriorAtTimeZero) {
  DiscreteTarget t;
  t.dim = 1;
  t.atoms = {0.1, 0.9};
  t.weights = {0.3, 0.7};
  EXPECT_EQ(posterior_weights(t, std::vector<double>{5.0}, 0.0), t.weights);
}

TEST(PosteriorWeights, NormalizedAndLabelInvariant) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 20; ++trial) {
    auto t = random_target(3, 7, rng);
    std::vector<double> x{g(rng), g(rng), g(rng)};
    const double time = 0.05 + 0.9 * (trial / 20.0);
    auto p = posterior_weights(t, x, time);
    double s = 0.0;
    for (double v : p) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);

    DiscreteTarget shuffled = t;
    std::vector<std::size_t> perm{6, 2, 0, 5, 1, 4, 3};
    for (std::size_t j = 0; j < 7; ++j) {
      shuffled.weights[j] = t.weights[perm[j]];
      for (std::size_t i = 0; i < 3; ++i) shuffled.atoms[j * 3 + i] = t.atoms[perm[j] * 3 + i];
    }
    auto q = posterior_weights(shuffled, x, time);
    for (std::size_t j = 0; j < 7; ++j) EXPECT_NEAR(q[j], p[perm[j]], 1e-12);
  }
}

TEST(PosteriorWeights, NoUnderflowNearOne) {
  auto two = DiscreteTarget::uniform(1, {0.0, 1.0});
  auto p = posterior_weights(two, std::vector<double>{40.0}, 0.999);
  EXPECT_TRUE(std::isfinite(p[0]));
  EXPECT_NEAR(p[0] + p[1], 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(p[1], 1.0);
}

TEST(TrueVelocity, SingleAtomClosedForm) {
  OracleField f(DiscreteTarget::single({0.6, 0.3}), 0.9);
  auto v = true_velocity(f, std::vector<double>{0.6, 0.3}, 0.5);
  EXPECT_NEAR(v[0], 0.4, 1e-15);
  EXPECT_NEAR(v[1], 0.2, 1e-15);
  EXPECT_THROW(true_velocity(f, std::vector<double>{0.6, 0.3}, 0.95), ContractError);
}

TEST(TrueVelocity, MeanAtTimeZero) {
  OracleField f(DiscreteTarget::uniform(2, {0.0, 0.2, 1.0, 0.6}), 0.9);
  for (double x : {-3.0, 0.0, 7.0}) {
    auto v = true_velocity(f, std::vector<double>{x, -x}, 0.0);
    EXPECT_DOUBLE_EQ(v[0], 0.5);
    EXPECT_DOUBLE_EQ(v[1], 0.4);
  }
}

TEST(TrueVelocity, FieldBatchMatchesPointwise) {
  std::mt19937_64 rng(8);
  OracleField f(random_target(2, 5, rng), 0.9);
  Tensor pts = Tensor::from_rows({{0.1, -0.4, 1.2}, {0.5, 0.0, 2.0}});
  std::vector<double> times{0.0, 0.3, 0.9};
  Tensor v = f.evaluate(pts, times);
  for (std::size_t b = 0; b < 3; ++b) {
    auto ref = true_velocity(f, pts.column(b), times[b]);
    EXPECT_EQ(v(0, b), ref[0]);
    EXPECT_EQ(v(1, b), ref[1]);
  }
}

TEST(TrueVelocity, MatchesScoreForm) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> g;
  OracleField f(random_target(2, 6, rng), 0.9);
  for (double t : {1e-3, 0.1, 0.5, 0.9}) {
    std::vector<double> x{g(rng), g(rng)};
    auto a = true_velocity(f, x, t);
    auto b = score_velocity(f, x, t);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(a[i], b[i], 1e-9 * (1.0 + std::abs(a[i])));
  }
  EXPECT_THROW(score_velocity(f, std::vector<double>{0, 0}, 5e-4), ContractError);
}

TEST(TrueVelocity, MonteCarloConditionalMean) {
  OracleField f(DiscreteTarget::uniform(1, {0.2, 0.8}), 0.9);
  const double t = 0.7, x = 0.5, half_width = 0.005;
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> g;
  std::bernoulli_distribution coin(0.5);
  double sum = 0.0, sum_sq = 0.0;
  std::size_t hits = 0;
  for (int k = 0; k < 4'000'000; ++k) {
    const double x1 = coin(rng) ? 0.8 : 0.2, x0 = g(rng);
    const double xt = interpolate(std::vector<double>{x0}, std::vector<double>{x1}, t)[0];
    if (std::abs(xt - x) > half_width) continue;
    const double y = regression_label(std::vector<double>{x0}, std::vector<double>{x1}, t)[0];
    sum += y;
    sum_sq += y * y;
    ++hits;
  }
  ASSERT_GT(hits, 10000u);
  const double mean = sum / hits, var = sum_sq / hits - mean * mean, se = std::sqrt(var / hits);
  const double v = true_velocity(f, std::vector<double>{x}, t)[0];
  EXPECT_LE(std::abs(mean - v), 3.0 * se) << "mc " << mean << " exact " << v << " se " << se;
}

TEST(TrueVelocityDt, SingleAtomClosedForm) {
  OracleField f(DiscreteTarget::single({0.7}), 0.9);
  for (double t : {0.1, 0.5, 0.85}) {
    for (double x : {-1.0, 0.3, 2.0}) {
      const double s = 1.0 - t * t;
      const double expected = (-(1.0 + t * t) * x + 2.0 * t * 0.7) / (s * s);
      EXPECT_NEAR(true_velocity_dt(f, std::vector<double>{x}, t)[0], expected, 1e-12 * (1.0 + std::abs(expected)));
    }
  }
  EXPECT_THROW(true_velocity_dt(f, std::vector<double>{0.0}, 0.0), ContractError);
}

TEST(TrueVelocityDt, FiniteDifference) {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(0.05, 0.85);
  for (int trial = 0; trial < 25; ++trial) {
    OracleField f(random_target(2, 5, rng), 0.9);
    std::vector<double> x{g(rng), g(rng)};
    const double t = u(rng), h = 1e-6;
    auto dt = true_velocity_dt(f, x, t);
    auto hi = true_velocity(f, x, t + h), lo = true_velocity(f, x, t - h);
    for (std::size_t i = 0; i < 2; ++i) {
      const double fd = (hi[i] - lo[i]) / (2 * h);
      EXPECT_LE(std::abs(fd - dt[i]) / std::max(std::abs(dt[i]), 1.0), 1e-5) << "t " << t << " fd " << fd << " an " << dt[i];
    }
  }
}

TEST(TrueVelocityDt, SymmetricTargetAtMidpoint) {
  OracleField f(DiscreteTarget::uniform(2, {0.2, 0.2, 0.8, 0.8}), 0.9);
  std::vector<double> x{0.5, 0.5};
  for (double t : {0.3, 0.6, 0.9}) {
    auto v = true_velocity_dt(f, x, t);
    EXPECT_NEAR(v[0] * x[1] - v[1] * x[0], 0.0, 1e-12);
  }
}

TEST(TrueVelocityGrad, SingleAtomIsScaledIdentity) {
  OracleField f(DiscreteTarget::single({0.5, 0.5, 0.1}), 0.9);
  const double t = 0.6;
  auto j = true_velocity_grad(f, std::vector<double>{1, 2, 3}, t);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(j[r * 3 + c], r == c ? -t / (1 - t * t) : 0.0, 1e-15);
}

TEST(TrueVelocityGrad, FiniteDifferenceAndSymmetry) {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(0.05, 0.9);
  for (int trial = 0; trial < 25; ++trial) {
    OracleField f(random_target(3, 6, rng), 0.9);
    std::vector<double> x{g(rng), g(rng), g(rng)};
    const double t = u(rng), h = 1e-6;
    auto jac = true_velocity_grad(f, x, t);
    for (std::size_t c = 0; c < 3; ++c) {
      auto xp = x, xm = x;
      xp[c] += h;
      xm[c] -= h;
      auto hi = true_velocity(f, xp, t), lo = true_velocity(f, xm, t);
      for (std::size_t r = 0; r < 3; ++r) {
        const double fd = (hi[r] - lo[r]) / (2 * h);
        EXPECT_LE(std::abs(fd - jac[r * 3 + c]) / std::max(std::abs(jac[r * 3 + c]), 1.0), 1e-5);
        EXPECT_NEAR(jac[r * 3 + c], jac[c * 3 + r], 1e-12);
      }
    }
  }
}

TEST(CheckBounds, VelocityBoundExample) {
  std::mt19937_64 rng(5);
  OracleField f(random_target(2, 9, rng), 0.8);
  std::uniform_real_distribution<double> box(-2.0, 2.0), time(0.0, 0.8);
  const std::size_t n = 2000;
  std::vector<double> pts(2 * n), times(n);
  for (auto& v : pts) v = box(rng);
  for (auto& v : times) v = time(rng);
  auto r = check_bounds(f, Tensor({2, n}, pts), times, 2.0);
  EXPECT_NEAR(r.velocity_bound, 3.0 / 0.36, 1e-12);
  EXPECT_TRUE(r.all_ok());
  EXPECT_GT(r.max_velocity, 0.0);
}

TEST(CheckBounds, SingleAtomLargeMargin) {
  OracleField f(DiscreteTarget::single({0.5}), 0.9);
  std::vector<double> pts, times;
  for (int k = 0; k <= 20; ++k) {
    pts.push_back(-1.0 + 0.1 * k);
    times.push_back(0.9 * k / 20.0);
  }
  auto r = check_bounds(f, Tensor({1, pts.size()}, pts), times, 1.0);
  EXPECT_TRUE(r.all_ok());
  EXPECT_LT(r.max_velocity, 0.5 * r.velocity_bound);
  EXPECT_LT(r.max_time_derivative, 0.5 * r.time_derivative_bound);
  EXPECT_LT(r.max_jacobian, 0.5 * r.jacobian_bound);
}

TEST(CheckBounds, JacobianBoundNearHorizon) {
  OracleField f(DiscreteTarget::uniform(1, {0.0, 1.0}), 0.95);
  std::vector<double> pts, times;
  for (int k = 0; k <= 200; ++k) {
    pts.push_back(-1.0 + 0.01 * k);
    times.push_back(0.95);
  }
  auto r = check_bounds(f, Tensor({1, pts.size()}, pts), times, 1.0);
  EXPECT_NEAR(r.jacobian_bound, 0.95 / std::pow(1 - 0.95 * 0.95, 2), 1e-9);
  EXPECT_TRUE(r.jacobian_ok());
  EXPECT_GT(r.max_jacobian, 1.0);
}

TEST(CheckBounds, RejectsPointsOutsideBox) {
  OracleField f(DiscreteTarget::single({0.5}), 0.9);
  std::vector<double> t{0.5};
  EXPECT_THROW(check_bounds(f, Tensor({1, 1}, {3.0}), t, 2.0), ContractError);
}

TEST(FiniteDifferenceCheck, SmallOnFiveAtomTarget) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 1), ux(-2, 2);
  std::vector<double> atoms(10);
  for (double& a : atoms) a = u(rng);
  OracleField f(DiscreteTarget::uniform(2, atoms), 0.9);
  for (int k = 0; k < 20; ++k) {
    std::vector<double> x{ux(rng), ux(rng)};
    auto c = finite_difference_check(f, x, 0.05 + 0.8 * u(rng));
    EXPECT_LE(c.time_error, 1e-5);
    EXPECT_LE(c.jacobian_error, 1e-5);
  }
}

TEST(FiniteDifferenceCheck, RejectsTimeWithoutRoom) {
  OracleField f(DiscreteTarget::single(std::vector<double>{0.5}), 0.9);
  EXPECT_THROW(finite_difference_check(f, std::vector<double>{0.0}, 0.9), ContractError);
}
