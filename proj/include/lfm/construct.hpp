#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lfm/transformer.hpp"

namespace lfm {

/**
 * Token layout of the exact constructions. Each token (one head block) has
 * d_patch + l + 4 rows: the patch, a constant 1, the one-hot position, and
 * three bookkeeping rows a, b, c. Row accessors are 0-based.
 */
struct TokenLayout {
  std::size_t patch_dim = 1;
  std::size_t tokens = 1;

  std::size_t block() const { return patch_dim + tokens + 4; }
  std::size_t input_dim() const { return patch_dim * tokens; }
  std::size_t one_row() const { return patch_dim; }
  /// Row of the position indicator of token j (1-based).
  std::size_t position_row(std::size_t j) const { return patch_dim + j; }
  std::size_t a_row() const { return patch_dim + tokens + 1; }
  std::size_t b_row() const { return patch_dim + tokens + 2; }
  std::size_t c_row() const { return patch_dim + tokens + 3; }
};

/// Exponents n_{s,k} stored in input order: entry (k-1)*d_patch + (s-1).
struct MultiIndex {
  TokenLayout layout;
  std::vector<unsigned> powers;

  unsigned degree() const;
  unsigned power(std::size_t component, std::size_t token) const {
    return powers[(token - 1) * layout.patch_dim + (component - 1)];
  }
  /// eta_n(x) for x in input order.
  double evaluate(std::span<const double> x) const;
  std::string to_string() const;
};

struct FeedForwardWeights {
  Tensor w1, b1, w2, b2;
};

/// Which bookkeeping rows an accumulator feedforward layer keeps.
enum class AccumulatorVariant {
  Reset,     ///< b <- alpha (c - B); a and c cleared
  Move,      ///< b <- alpha (c - B); a kept, c cleared
  CopyBack,  ///< a <- c; b kept, c cleared
  Clear,     ///< a and c cleared; b kept
};

/// Attention head writing x_j^{(k)} - u into row a of token 1 (j, k 1-based).
/// Needs B > 2 max |x| over the inputs it will see.
HeadParams<Tensor> build_linear_reader(const TokenLayout& layout, std::size_t j, std::size_t k, double u, double B);
/// Attention head writing b_1 a_j + B into row c of token 1.
/// Needs B > 2 |b_1| max |a_r|.
HeadParams<Tensor> build_multiplier(const TokenLayout& layout, std::size_t j, double B);
/// Attention head writing a^2 into row c of token 1 when row a holds a in
/// token 1 and zero elsewhere. The one-row query and key are padded to d_k = 2.
HeadParams<Tensor> build_squarer(const TokenLayout& layout);
/// Token-wise layer for the bookkeeping rows; d_ff must be at least 8.
FeedForwardWeights build_accumulator(const TokenLayout& layout, double alpha, double B, AccumulatorVariant variant,
                                     std::size_t ff_dim = 8);

std::size_t count_nonzero(const HeadParams<Tensor>& head);
std::size_t count_nonzero(const FeedForwardWeights& ff);

struct ConstructionReport {
  std::string construction;
  std::size_t patch_dim = 0;
  std::size_t tokens = 0;
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t nonzeros = 0;
  /// Layer-count bound 2 l d_patch (log2 M + 1), M = max(degree, 2).
  double layer_bound = 0.0;
  double max_abs_intermediate = 0.0;
  double max_error = 0.0;
};

nlohmann::json to_json(const ConstructionReport& r);

struct Construction {
  TransformerNet net;
  ConstructionReport report;
};

/// One attention/feedforward pair of a single-head block.
struct LayerPair {
  HeadParams<Tensor> attention;
  FeedForwardWeights feedforward;
};

/// Layer pairs computing b_1 eta_n by binary exponentiation, one component at
/// a time; rows a and c end at zero and row b of token 1 holds the result.
std::vector<LayerPair> monomial_pairs(const MultiIndex& n, double b1);

/// Single-head network with eta_n(X) b_1 in row b of token 1, read out as its only output.
Construction build_monomial_net(const MultiIndex& n, double b1 = 1.0);

/// One head per multi-index; output s reads head s's row b of token 1.
Construction build_parallel_monomials(const std::vector<MultiIndex>& indices);

using PolynomialTerms = std::vector<std::pair<MultiIndex, double>>;

/// Network computing sum a_n eta_n(x) exactly through the readout.
Construction assemble_polynomial_approximator(const PolynomialTerms& terms);

/// Sum of |a_n| ||n||_2, a bound on the polynomial's Lipschitz constant on the unit cube.
double polynomial_lipschitz_bound(const PolynomialTerms& terms);
double evaluate_polynomial(const PolynomialTerms& terms, std::span<const double> x);

/// Least-squares coefficients of all monomials of total degree at most
/// `degree` in dim = 1 or 2 variables, fitted on a uniform grid of the unit
/// interval (513 points) or square (65 x 65 points).
PolynomialTerms fit_polynomial_least_squares(const std::function<double(std::span<const double>)>& f, std::size_t dim,
                                             unsigned degree);

/// All points of a uniform grid with `per_axis` points on each of `dim` axes, as dim x n.
Tensor unit_grid(std::size_t dim, std::size_t per_axis);

/// Largest |forward(net, x) - reference(x)| over grid columns, all outputs.
double verify_construction(const TransformerNet& net,
                           const std::function<std::vector<double>(std::span<const double>)>& reference,
                           const Tensor& grid);

/// Largest absolute hidden-state entry over a grid.
double max_abs_intermediate(const TransformerNet& net, const Tensor& grid);

}  // namespace lfm
