#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "lfm/construct.hpp"

using namespace lfm;

namespace {

Tensor tokens_with(const TokenLayout& L, const std::vector<double>& x, const std::vector<double>& a,
                   const std::vector<double>& b, const std::vector<double>& c) {
  Tensor z = Tensor::zeros({L.block(), L.tokens});
  for (std::size_t j = 0; j < L.tokens; ++j) {
    for (std::size_t p = 0; p < L.patch_dim; ++p) z.at(p, j) = x[j * L.patch_dim + p];
    z.at(L.one_row(), j) = 1.0;
    z.at(L.position_row(j + 1), j) = 1.0;
    z.at(L.a_row(), j) = a[j];
    z.at(L.b_row(), j) = b[j];
    z.at(L.c_row(), j) = c[j];
  }
  return z;
}

Tensor apply(const HeadParams<Tensor>& h, const Tensor& z, std::size_t l) {
  Tape tape;
  std::vector<HeadParams<Var>> heads{
      {tape.constant(h.query), tape.constant(h.key), tape.constant(h.value), tape.constant(h.output)}};
  return attention_layer(tape.constant(z), heads, l).value();
}

Tensor apply(const FeedForwardWeights& f, const Tensor& y) {
  Tape tape;
  return feedforward_layer(tape.constant(y), tape.constant(f.w1), tape.constant(f.b1), tape.constant(f.w2),
                           tape.constant(f.b2))
      .value();
}

}  // namespace

TEST(LinearReader, ReadsSelectedCoordinate) {
  TokenLayout L{1, 2};
  Tensor z = tokens_with(L, {0.5, 0.25}, {0, 0}, {1, 1}, {0, 0});
  Tensor y = apply(build_linear_reader(L, 2, 1, 0.0, 8.0), z, 2);
  EXPECT_EQ(y(L.a_row(), 0), 0.25);
}

TEST(LinearReader, SubtractsOffset) {
  TokenLayout L{2, 2};
  Tensor z = tokens_with(L, {0.1, 0.7, 0.3, 0.9}, {0, 0}, {1, 1}, {0, 0});
  Tensor y = apply(build_linear_reader(L, 2, 2, 0.9, 8.0), z, 2);
  EXPECT_EQ(y(L.a_row(), 0), 0.0);
  y = apply(build_linear_reader(L, 1, 2, 0.2, 8.0), z, 2);
  EXPECT_NEAR(y(L.a_row(), 0), 0.5, 1e-14);
}

TEST(LinearReader, LeavesOtherTokensUnchanged) {
  TokenLayout L{2, 3};
  Tensor z = tokens_with(L, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6}, {0, 0, 0}, {1, 2, 3}, {0, 0, 0});
  Tensor y = apply(build_linear_reader(L, 3, 1, 0.0, 8.0), z, 3);
  for (std::size_t j = 1; j < 3; ++j)
    for (std::size_t i = 0; i < L.block(); ++i) EXPECT_EQ(y(i, j), z(i, j));
  EXPECT_EQ(y(L.a_row(), 0), 0.5);
}

TEST(Multiplier, KnownExample) {
  TokenLayout L{1, 2};
  Tensor z = tokens_with(L, {0.3, 0.6}, {2.0, 0.0}, {3.0, 0.0}, {0, 0});
  Tensor y = apply(build_multiplier(L, 1, 13.0), z, 2);
  EXPECT_EQ(y(L.c_row(), 0), 19.0);
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t i = 0; i < L.c_row(); ++i) EXPECT_EQ(y(i, j), z(i, j));
}

TEST(Multiplier, ZeroFactorGivesOffset) {
  TokenLayout L{1, 2};
  Tensor z = tokens_with(L, {0.3, 0.6}, {0.7, 0.0}, {0.0, 0.0}, {0, 0});
  EXPECT_EQ(apply(build_multiplier(L, 1, 5.0), z, 2)(L.c_row(), 0), 5.0);
}

TEST(Multiplier, RandomProducts) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  TokenLayout L{2, 3};
  for (int trial = 0; trial < 100; ++trial) {
    const double a1 = u(rng), b1 = 3 * u(rng), B = 4 * (1 + std::abs(b1));
    Tensor z = tokens_with(L, {0, 0, 0, 0, 0, 0}, {a1, 0, 0}, {b1, u(rng), u(rng)}, {0, 0, 0});
    EXPECT_NEAR(apply(build_multiplier(L, 1, B), z, 3)(L.c_row(), 0) - B, b1 * a1, 1e-14);
  }
}

TEST(Squarer, Squares) {
  TokenLayout L{1, 2};
  for (double a : {0.5, 0.0, 1.0}) {
    Tensor z = tokens_with(L, {0.2, 0.4}, {a, 0.0}, {1, 1}, {0, 0});
    Tensor y = apply(build_squarer(L), z, 2);
    EXPECT_EQ(y(L.c_row(), 0), a * a);
    EXPECT_EQ(y(L.a_row(), 0), a);
    for (std::size_t i = 0; i < L.block(); ++i) EXPECT_EQ(y(i, 1), z(i, 1));
  }
}

TEST(Accumulator, VariantsWithUnitScaleAndZeroOffset) {
  TokenLayout L{1, 2};
  Tensor y = tokens_with(L, {0.2, 0.4}, {0.3, -0.6}, {-1.25, 2.0}, {0.7, -0.9});
  auto run = [&](AccumulatorVariant v) { return apply(build_accumulator(L, 1.0, 0.0, v), y); };
  Tensor reset = run(AccumulatorVariant::Reset), move = run(AccumulatorVariant::Move),
         copy = run(AccumulatorVariant::CopyBack), clear = run(AccumulatorVariant::Clear);
  for (std::size_t j = 0; j < 2; ++j) {
    for (std::size_t i = 0; i < L.a_row(); ++i) {
      EXPECT_EQ(reset(i, j), y(i, j));
      EXPECT_EQ(copy(i, j), y(i, j));
    }
    EXPECT_EQ(reset(L.a_row(), j), 0.0);
    EXPECT_DOUBLE_EQ(reset(L.b_row(), j), y(L.c_row(), j));
    EXPECT_EQ(reset(L.c_row(), j), 0.0);
    EXPECT_EQ(move(L.a_row(), j), y(L.a_row(), j));
    EXPECT_DOUBLE_EQ(move(L.b_row(), j), y(L.c_row(), j));
    EXPECT_EQ(move(L.c_row(), j), 0.0);
    EXPECT_EQ(copy(L.a_row(), j), y(L.c_row(), j));
    EXPECT_EQ(copy(L.b_row(), j), y(L.b_row(), j));
    EXPECT_EQ(copy(L.c_row(), j), 0.0);
    EXPECT_EQ(clear(L.a_row(), j), 0.0);
    EXPECT_EQ(clear(L.b_row(), j), y(L.b_row(), j));
    EXPECT_EQ(clear(L.c_row(), j), 0.0);
  }
}

TEST(Accumulator, ScaledShiftAndZeroScale) {
  TokenLayout L{2, 1};
  Tensor y = tokens_with(L, {0.2, 0.4}, {0.0}, {5.0}, {7.5});
  EXPECT_DOUBLE_EQ(apply(build_accumulator(L, 2.0, 3.0, AccumulatorVariant::Reset), y)(L.b_row(), 0), 9.0);
  EXPECT_EQ(apply(build_accumulator(L, 0.0, 3.0, AccumulatorVariant::Reset), y)(L.b_row(), 0), 0.0);
}

TEST(Accumulator, RejectsNarrowHiddenLayer) {
  EXPECT_THROW(build_accumulator(TokenLayout{1, 1}, 1.0, 0.0, AccumulatorVariant::Reset, 7), ContractError);
}

TEST(Budgets, NonzeroCountsWithinBudgets) {
  for (std::size_t dp : {1u, 2u, 3u})
    for (std::size_t l : {1u, 2u, 3u}) {
      TokenLayout L{dp, l};
      const std::size_t dm = L.block();
      EXPECT_LE(count_nonzero(build_linear_reader(L, l, dp, 0.3, 8.0)), dm + 6);
      EXPECT_LE(count_nonzero(build_multiplier(L, 1, 8.0)), dm + 5);
      EXPECT_LE(count_nonzero(build_squarer(L)), dm + 3);
      for (auto v : {AccumulatorVariant::Reset, AccumulatorVariant::Move, AccumulatorVariant::CopyBack,
                     AccumulatorVariant::Clear})
        EXPECT_LE(count_nonzero(build_accumulator(L, 1.5, 8.0, v)), 18u);
    }
}

TEST(Monomial, ClosedFormExample) {
  MultiIndex n{{1, 2}, {2, 1}};
  auto c = build_monomial_net(n);
  EXPECT_EQ(forward_point(c.net, std::vector<double>{0.5, 0.25})[0], 0.0625);
  EXPECT_LE(double(c.report.layers), c.report.layer_bound);
}

TEST(Monomial, EmptyProductGivesScale) {
  MultiIndex n{{2, 1}, {0, 0}};
  auto c = build_monomial_net(n, -1.75);
  EXPECT_EQ(forward_point(c.net, std::vector<double>{0.3, 0.9})[0], -1.75);
}

TEST(Monomial, ZeroCoordinateGivesZero) {
  MultiIndex n{{1, 3}, {3, 0, 2}};
  auto c = build_monomial_net(n);
  EXPECT_EQ(forward_point(c.net, std::vector<double>{0.0, 0.5, 0.8})[0], 0.0);
  EXPECT_EQ(forward_point(c.net, std::vector<double>{0.6, 0.5, 0.0})[0], 0.0);
}

TEST(Monomial, ExactOnGridAndWithinLayerBound) {
  std::mt19937_64 rng(2);
  for (auto L : {TokenLayout{1, 2}, TokenLayout{2, 1}, TokenLayout{3, 1}, TokenLayout{1, 3}}) {
    for (int trial = 0; trial < 5; ++trial) {
      MultiIndex n{L, std::vector<unsigned>(L.input_dim(), 0)};
      std::uniform_int_distribution<std::size_t> pick(0, L.input_dim() - 1);
      std::uniform_int_distribution<unsigned> deg(1, 8);
      for (unsigned d = deg(rng); d > 0; --d) ++n.powers[pick(rng)];
      std::uniform_real_distribution<double> ub(-2, 2);
      const double b1 = ub(rng);
      auto c = build_monomial_net(n, b1);
      double err = verify_construction(
          c.net, [&](std::span<const double> x) { return std::vector<double>{b1 * n.evaluate(x)}; },
          unit_grid(L.input_dim(), 9));
      EXPECT_LE(err, 1e-12) << n.to_string();
      EXPECT_LE(double(c.report.layers), c.report.layer_bound) << n.to_string();
    }
  }
}

TEST(Monomial, LayerCountFollowsBinaryDigits) {
  // 5 = 101b: reader, multiply, square, square, multiply.
  MultiIndex n{{1, 1}, {5}};
  EXPECT_EQ(monomial_pairs(n, 1.0).size(), 5u);
  // 8 = 1000b: reader, three squares, one multiply.
  n.powers = {8};
  EXPECT_EQ(monomial_pairs(n, 1.0).size(), 5u);
}

TEST(ParallelMonomials, TwoHeads) {
  for (auto L : {TokenLayout{2, 1}, TokenLayout{1, 2}}) {
    auto c = build_parallel_monomials({MultiIndex{L, {2, 0}}, MultiIndex{L, {1, 1}}});
    auto out = forward_point(c.net, std::vector<double>{0.5, 0.25});
    EXPECT_EQ(out[0], 0.25);
    EXPECT_EQ(out[1], 0.125);
    EXPECT_EQ(c.report.heads, 2u);
  }
}

TEST(ParallelMonomials, SingleHeadMatchesMonomialNet) {
  MultiIndex n{{2, 1}, {3, 2}};
  auto a = build_parallel_monomials({n});
  auto b = build_monomial_net(n);
  Tensor grid = unit_grid(2, 9);
  EXPECT_EQ(forward(a.net, grid), forward(b.net, grid));
}

TEST(ParallelMonomials, HeadsAreIndependent) {
  TokenLayout L{2, 1};
  auto c = build_parallel_monomials({MultiIndex{L, {3, 0}}, MultiIndex{L, {1, 2}}});
  std::vector<double> x{0.7, 0.4};
  auto before = forward_point(c.net, x);
  c.net.weights.readout_weight.at(0, L.b_row()) = 0.0;
  auto after = forward_point(c.net, x);
  EXPECT_EQ(after[0], 0.0);
  EXPECT_EQ(after[1], before[1]);
}

TEST(ParallelMonomials, RejectsDuplicates) {
  TokenLayout L{2, 1};
  EXPECT_THROW(build_parallel_monomials({MultiIndex{L, {1, 0}}, MultiIndex{L, {1, 0}}}), ContractError);
}

TEST(Polynomial, ConstantTerm) {
  TokenLayout L{1, 1};
  auto c = assemble_polynomial_approximator({{MultiIndex{L, {0}}, 2.5}});
  for (double x : {0.0, 0.3, 1.0}) EXPECT_EQ(forward_point(c.net, std::vector<double>{x})[0], 2.5);
}

TEST(Polynomial, QuadraticOnThreePoints) {
  TokenLayout L{1, 1};
  auto c = assemble_polynomial_approximator({{MultiIndex{L, {2}}, 1.0}, {MultiIndex{L, {1}}, -1.0}});
  EXPECT_EQ(forward_point(c.net, std::vector<double>{0.0})[0], 0.0);
  EXPECT_EQ(forward_point(c.net, std::vector<double>{0.5})[0], -0.25);
  EXPECT_EQ(forward_point(c.net, std::vector<double>{1.0})[0], 0.0);
}

TEST(Polynomial, MatchesHornerEvaluation) {
  TokenLayout L{1, 1};
  std::vector<double> coef{0.3, -1.2, 2.5, 0.7, -0.9, 1.1};
  PolynomialTerms terms;
  for (unsigned p = 0; p < coef.size(); ++p) terms.emplace_back(MultiIndex{L, {p}}, coef[p]);
  auto c = assemble_polynomial_approximator(terms);
  double err = verify_construction(
      c.net,
      [&](std::span<const double> x) {
        double h = 0.0;
        for (std::size_t p = coef.size(); p-- > 0;) h = h * x[0] + coef[p];
        return std::vector<double>{h};
      },
      unit_grid(1, 257));
  EXPECT_LE(err, 1e-10);
}

TEST(Polynomial, TwoDimensionalFitIsExactInNetwork) {
  auto f = [](std::span<const double> x) { return std::exp(x[0]) * std::cos(x[1]); };
  auto terms = fit_polynomial_least_squares(f, 2, 4);
  auto c = assemble_polynomial_approximator(terms);
  double err = verify_construction(
      c.net, [&](std::span<const double> x) { return std::vector<double>{evaluate_polynomial(terms, x)}; },
      unit_grid(2, 17));
  EXPECT_LE(err, 1e-10);
}

TEST(Polynomial, SineErrorDecreasesWithDegree) {
  auto f = [](std::span<const double> x) { return std::sin(2 * std::numbers::pi * x[0]); };
  Tensor grid = unit_grid(1, 2049);
  double prev = INFINITY;
  for (unsigned m : {2u, 4u, 8u}) {
    auto c = assemble_polynomial_approximator(fit_polynomial_least_squares(f, 1, m));
    double err = verify_construction(c.net, [&](std::span<const double> x) { return std::vector<double>{f(x)}; }, grid);
    EXPECT_LT(err, prev) << m;
    prev = err;
  }
}

TEST(Verify, DetectsCorruptedWeight) {
  MultiIndex n{{1, 2}, {2, 1}};
  auto c = build_monomial_net(n);
  auto ref = [&](std::span<const double> x) { return std::vector<double>{n.evaluate(x)}; };
  Tensor grid = unit_grid(2, 9);
  EXPECT_LE(verify_construction(c.net, ref, grid), 1e-12);
  c.net.weights.layers[1].heads[0].query.at(0, n.layout.b_row()) = 1.01;
  EXPECT_GT(verify_construction(c.net, ref, grid), 0.0);
}

TEST(Report, SerializesAllFields) {
  auto c = build_monomial_net(MultiIndex{{1, 2}, {1, 1}});
  auto j = to_json(c.report);
  for (const char* key : {"construction", "layers", "heads", "nonzeros", "layer_bound", "max_abs_intermediate"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_GT(c.report.max_abs_intermediate, 0.0);
}
