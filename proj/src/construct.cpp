#include "lfm/construct.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <set>

#include <Eigen/Dense>
#include <fmt/format.h>

namespace lfm {

unsigned MultiIndex::degree() const { return std::accumulate(powers.begin(), powers.end(), 0u); }

double MultiIndex::evaluate(std::span<const double> x) const {
  double v = 1.0;
  for (std::size_t i = 0; i < powers.size(); ++i)
    for (unsigned p = 0; p < powers[i]; ++p) v *= x[i];
  return v;
}

std::string MultiIndex::to_string() const { return fmt::format("({})", fmt::join(powers, ",")); }

// ---------------------------------------------------------------- single layers

HeadParams<Tensor> build_linear_reader(const TokenLayout& L, std::size_t j, std::size_t k, double u, double B) {
  if (j < 1 || j > L.tokens || k < 1 || k > L.patch_dim) {
    throw ContractError(fmt::format("linear reader: token {} / component {} out of range", j, k));
  }
  const std::size_t dm = L.block();
  HeadParams<Tensor> h{Tensor::zeros({2, dm}), Tensor::zeros({2, dm}), Tensor::zeros({dm, dm}), Tensor::identity(dm)};
  h.query.at(0, L.position_row(1)) = 1.0;
  h.query.at(1, L.position_row(1)) = B;
  h.key.at(0, k - 1) = 1.0;
  h.key.at(0, L.one_row()) = -u - B;
  h.key.at(1, L.position_row(j)) = 1.0;
  h.value.at(L.a_row(), L.one_row()) = 1.0;
  return h;
}

HeadParams<Tensor> build_multiplier(const TokenLayout& L, std::size_t j, double B) {
  if (j < 1 || j > L.tokens) throw ContractError(fmt::format("multiplier: token {} out of range", j));
  const std::size_t dm = L.block();
  HeadParams<Tensor> h{Tensor::zeros({2, dm}), Tensor::zeros({2, dm}), Tensor::zeros({dm, dm}), Tensor::identity(dm)};
  h.query.at(0, L.b_row()) = 1.0;
  h.query.at(1, L.position_row(1)) = B;
  h.key.at(0, L.a_row()) = 1.0;
  h.key.at(1, L.position_row(j)) = 1.0;
  h.value.at(L.c_row(), L.one_row()) = 1.0;
  return h;
}

HeadParams<Tensor> build_squarer(const TokenLayout& L) {
  const std::size_t dm = L.block();
  HeadParams<Tensor> h{Tensor::zeros({2, dm}), Tensor::zeros({2, dm}), Tensor::zeros({dm, dm}), Tensor::identity(dm)};
  h.query.at(0, L.a_row()) = 1.0;
  h.key.at(0, L.a_row()) = 1.0;
  h.value.at(L.c_row(), L.one_row()) = 1.0;
  return h;
}

FeedForwardWeights build_accumulator(const TokenLayout& L, double alpha, double B, AccumulatorVariant variant,
                                     std::size_t ff_dim) {
  if (ff_dim < 8) throw ContractError(fmt::format("accumulator: d_ff = {} is below 8", ff_dim));
  const std::size_t dm = L.block();
  FeedForwardWeights ff{Tensor::zeros({ff_dim, dm}), Tensor::zeros({ff_dim}), Tensor::zeros({dm, ff_dim}),
                        Tensor::zeros({dm})};
  const std::size_t a = L.a_row(), b = L.b_row(), c = L.c_row(), one = L.one_row();
  const bool clear_a = variant == AccumulatorVariant::Reset || variant == AccumulatorVariant::Clear ||
                       variant == AccumulatorVariant::CopyBack;
  const bool write_b = variant == AccumulatorVariant::Reset || variant == AccumulatorVariant::Move;
  // Units 0,1 read a; 2..5 rewrite b; 6,7 read c, which every variant clears.
  if (clear_a) {
    ff.w1.at(0, a) = 1;
    ff.w1.at(1, a) = -1;
    ff.w2.at(a, 0) = -1;
    ff.w2.at(a, 1) = 1;
  }
  if (write_b) {
    ff.w1.at(2, b) = 1;
    ff.w1.at(3, b) = -1;
    ff.w1.at(4, one) = -B;
    ff.w1.at(4, c) = 1;
    ff.w1.at(5, one) = B;
    ff.w1.at(5, c) = -1;
    ff.w2.at(b, 2) = -1;
    ff.w2.at(b, 3) = 1;
    ff.w2.at(b, 4) = alpha;
    ff.w2.at(b, 5) = -alpha;
  }
  ff.w1.at(6, c) = 1;
  ff.w1.at(7, c) = -1;
  ff.w2.at(c, 6) = -1;
  ff.w2.at(c, 7) = 1;
  if (variant == AccumulatorVariant::CopyBack) {
    ff.w2.at(a, 6) = 1;
    ff.w2.at(a, 7) = -1;
  }
  return ff;
}

std::size_t count_nonzero(const HeadParams<Tensor>& h) {
  return count_nonzero(h.query) + count_nonzero(h.key) + count_nonzero(h.value) + count_nonzero(h.output);
}

std::size_t count_nonzero(const FeedForwardWeights& ff) {
  return count_nonzero(ff.w1) + count_nonzero(ff.b1) + count_nonzero(ff.w2) + count_nonzero(ff.b2);
}

nlohmann::json to_json(const ConstructionReport& r) {
  return {{"construction", r.construction},
          {"patch_dim", r.patch_dim},
          {"tokens", r.tokens},
          {"layers", r.layers},
          {"heads", r.heads},
          {"nonzeros", r.nonzeros},
          {"layer_bound", r.layer_bound},
          {"max_abs_intermediate", r.max_abs_intermediate},
          {"max_error", r.max_error}};
}

// ---------------------------------------------------------------- monomials

namespace {

// B for the reader: inputs lie in [0, 1].
constexpr double kReaderBound = 8.0;

double multiplier_bound(double b1) { return 4.0 * (1.0 + std::abs(b1)); }

double layer_bound(const TokenLayout& L, unsigned degree) {
  const double m = std::max(2u, degree);
  return 2.0 * static_cast<double>(L.tokens * L.patch_dim) * (std::log2(m) + 1.0);
}

void place_pair(TransformerNet& net, std::size_t layer, std::size_t head, const TokenLayout& L, const LayerPair& p) {
  const std::size_t bs = L.block(), off = head * bs, hid = head * 8;
  auto& h = net.weights.layers[layer].heads[head];
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < bs; ++c) {
      h.query.at(r, off + c) = p.attention.query(r, c);
      h.key.at(r, off + c) = p.attention.key(r, c);
    }
  for (std::size_t i = 0; i < bs; ++i)
    for (std::size_t c = 0; c < bs; ++c) {
      h.value.at(i, off + c) = p.attention.value(i, c);
      h.output.at(off + i, c) = p.attention.output(i, c);
    }
  auto& layer_w = net.weights.layers[layer];
  for (std::size_t u = 0; u < 8; ++u) {
    layer_w.b1.mutable_data()[hid + u] = p.feedforward.b1[u];
    for (std::size_t c = 0; c < bs; ++c) {
      layer_w.w1.at(hid + u, off + c) = p.feedforward.w1(u, c);
      layer_w.w2.at(off + c, hid + u) = p.feedforward.w2(c, u);
    }
  }
  for (std::size_t c = 0; c < bs; ++c) layer_w.b2.mutable_data()[off + c] = p.feedforward.b2[c];
}

void check_layout(const MultiIndex& n) {
  if (n.layout.patch_dim == 0 || n.layout.tokens == 0 || n.powers.size() != n.layout.input_dim()) {
    throw ContractError(fmt::format("multi-index {} does not match a {}x{} layout", n.to_string(),
                                    n.layout.patch_dim, n.layout.tokens));
  }
}

// Network with one block per head; head s carries pairs[s] and starts with b = b1s[s].
TransformerNet assemble_heads(const TokenLayout& L, const std::vector<std::vector<LayerPair>>& pairs,
                              const std::vector<double>& b1s, std::size_t output_dim, double output_bound) {
  const std::size_t h = pairs.size(), bs = L.block();
  std::size_t depth = 1;
  for (const auto& p : pairs) depth = std::max(depth, p.size());
  TransformerSpec s;
  s.input_dim = L.input_dim();
  s.output_dim = output_dim;
  s.patch_dim = L.patch_dim;
  s.tokens = L.tokens;
  s.layers = depth;
  s.heads = h;
  s.key_dim = 2;
  s.value_dim = bs;
  s.ff_dim = 8 * h;
  s.output_bound = output_bound;
  TransformerNet net = make_zero_net(s);
  for (std::size_t head = 0; head < h; ++head) {
    const std::size_t off = head * bs;
    for (std::size_t p = 0; p < L.patch_dim; ++p) net.weights.embed_weight.at(off + p, p) = 1.0;
    for (std::size_t j = 1; j <= L.tokens; ++j) net.weights.embed_weight.at(off + L.position_row(j), L.patch_dim + j - 1) = 1.0;
    net.weights.embed_bias.mutable_data()[off + L.one_row()] = 1.0;
    net.weights.embed_bias.mutable_data()[off + L.b_row()] = b1s[head];
    for (std::size_t r = 0; r < pairs[head].size(); ++r) place_pair(net, r, head, L, pairs[head][r]);
  }
  return net;
}

double default_intermediate(const TransformerNet& net) {
  const std::size_t d = net.spec.input_dim;
  return max_abs_intermediate(net, unit_grid(d, d <= 3 ? 5 : 3));
}

}  // namespace

std::vector<LayerPair> monomial_pairs(const MultiIndex& n, double b1) {
  check_layout(n);
  const TokenLayout& L = n.layout;
  const double B = multiplier_bound(b1);
  const FeedForwardWeights none{Tensor::zeros({8, L.block()}), Tensor::zeros({8}), Tensor::zeros({L.block(), 8}),
                                Tensor::zeros({L.block()})};
  std::vector<LayerPair> pairs;
  for (std::size_t k = 1; k <= L.tokens; ++k)
    for (std::size_t s = 1; s <= L.patch_dim; ++s) {
      const unsigned e = n.power(s, k);
      if (e == 0) continue;
      const unsigned P = std::bit_width(e) - 1;
      pairs.push_back({build_linear_reader(L, k, s, 0.0, kReaderBound), none});
      for (unsigned r = 0; r <= P; ++r) {
        if (r > 0) pairs.push_back({build_squarer(L), build_accumulator(L, 1.0, B, AccumulatorVariant::CopyBack)});
        if ((e >> r) & 1u) {
          pairs.push_back({build_multiplier(L, 1, B), build_accumulator(L, 1.0, B, AccumulatorVariant::Move)});
        }
      }
      // The top bit is always set, so the component ends on a product step.
      pairs.back().feedforward = build_accumulator(L, 1.0, B, AccumulatorVariant::Reset);
    }
  return pairs;
}

Construction build_monomial_net(const MultiIndex& n, double b1) {
  check_layout(n);
  const TokenLayout& L = n.layout;
  TransformerNet net = assemble_heads(L, {monomial_pairs(n, b1)}, {b1}, 1, 2.0 * (1.0 + std::abs(b1)));
  net.weights.readout_weight.at(0, L.b_row()) = 1.0;
  ConstructionReport r;
  r.construction = "monomial";
  r.patch_dim = L.patch_dim;
  r.tokens = L.tokens;
  r.layers = net.spec.layers;
  r.heads = 1;
  r.nonzeros = count_nonzero_parameters(net);
  r.layer_bound = layer_bound(L, n.degree());
  r.max_abs_intermediate = default_intermediate(net);
  return {std::move(net), r};
}

Construction build_parallel_monomials(const std::vector<MultiIndex>& indices) {
  if (indices.empty()) throw ContractError("parallel monomials: no multi-indices");
  const TokenLayout L = indices.front().layout;
  std::set<std::vector<unsigned>> seen;
  std::vector<std::vector<LayerPair>> pairs;
  unsigned max_degree = 0;
  for (const auto& n : indices) {
    check_layout(n);
    if (n.layout.patch_dim != L.patch_dim || n.layout.tokens != L.tokens) {
      throw ContractError("parallel monomials: multi-indices use different layouts");
    }
    if (!seen.insert(n.powers).second) {
      throw ContractError(fmt::format("parallel monomials: {} assigned to two heads", n.to_string()));
    }
    pairs.push_back(monomial_pairs(n, 1.0));
    max_degree = std::max(max_degree, n.degree());
  }
  const std::size_t h = indices.size();
  TransformerNet net = assemble_heads(L, pairs, std::vector<double>(h, 1.0), h, 2.0 * std::sqrt(double(h)));
  for (std::size_t s = 0; s < h; ++s) net.weights.readout_weight.at(s, s * L.block() + L.b_row()) = 1.0;
  ConstructionReport r;
  r.construction = "parallel-monomials";
  r.patch_dim = L.patch_dim;
  r.tokens = L.tokens;
  r.layers = net.spec.layers;
  r.heads = h;
  r.nonzeros = count_nonzero_parameters(net);
  r.layer_bound = layer_bound(L, max_degree);
  r.max_abs_intermediate = default_intermediate(net);
  return {std::move(net), r};
}

Construction assemble_polynomial_approximator(const PolynomialTerms& terms) {
  if (terms.empty()) throw ContractError("polynomial: no terms");
  std::vector<MultiIndex> indices;
  for (const auto& [n, a] : terms) indices.push_back(n);
  Construction c = build_parallel_monomials(indices);
  const TokenLayout L = indices.front().layout;
  double total = 0.0;
  for (const auto& [n, a] : terms) total += std::abs(a);
  // Same blocks with a single scalar readout.
  c.net.spec.output_dim = 1;
  c.net.spec.output_bound = 2.0 * (1.0 + total);
  c.net.weights.readout_weight = Tensor::zeros({1, c.net.spec.model_dim()});
  c.net.weights.readout_bias = Tensor::zeros({1});
  for (std::size_t s = 0; s < terms.size(); ++s) c.net.weights.readout_weight.at(0, s * L.block() + L.b_row()) = terms[s].second;
  c.report.construction = "polynomial";
  c.report.nonzeros = count_nonzero_parameters(c.net);
  return c;
}

double polynomial_lipschitz_bound(const PolynomialTerms& terms) {
  double s = 0.0;
  for (const auto& [n, a] : terms) {
    double norm = 0.0;
    for (unsigned p : n.powers) norm += double(p) * double(p);
    s += std::abs(a) * std::sqrt(norm);
  }
  return s;
}

double evaluate_polynomial(const PolynomialTerms& terms, std::span<const double> x) {
  double s = 0.0;
  for (const auto& [n, a] : terms) s += a * n.evaluate(x);
  return s;
}

PolynomialTerms fit_polynomial_least_squares(const std::function<double(std::span<const double>)>& f,
                                             std::size_t dim, unsigned degree) {
  if (dim != 1 && dim != 2) throw ContractError(fmt::format("polynomial fit: dimension {} not supported", dim));
  const TokenLayout L{dim, 1};
  std::vector<MultiIndex> basis;
  for (unsigned total = 0; total <= degree; ++total) {
    if (dim == 1) {
      basis.push_back({L, {total}});
    } else {
      for (unsigned p = 0; p <= total; ++p) basis.push_back({L, {total - p, p}});
    }
  }
  Tensor grid = unit_grid(dim, dim == 1 ? 513 : 65);
  const std::size_t n = grid.cols();
  Eigen::MatrixXd V(n, basis.size());
  Eigen::VectorXd y(n);
  std::vector<double> x(dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < dim; ++k) x[k] = grid(k, i);
    y(i) = f(x);
    for (std::size_t b = 0; b < basis.size(); ++b) V(i, b) = basis[b].evaluate(x);
  }
  Eigen::VectorXd coef = V.colPivHouseholderQr().solve(y);
  PolynomialTerms terms;
  for (std::size_t b = 0; b < basis.size(); ++b) terms.emplace_back(basis[b], coef(b));
  return terms;
}

Tensor unit_grid(std::size_t dim, std::size_t per_axis) {
  if (per_axis < 2) throw ContractError("unit grid: need at least 2 points per axis");
  std::size_t n = 1;
  for (std::size_t k = 0; k < dim; ++k) n *= per_axis;
  std::vector<double> data(dim * n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t rest = i;
    for (std::size_t k = 0; k < dim; ++k) {
      data[k * n + i] = double(rest % per_axis) / double(per_axis - 1);
      rest /= per_axis;
    }
  }
  return make_unchecked({dim, n}, std::move(data));
}

double verify_construction(const TransformerNet& net,
                           const std::function<std::vector<double>(std::span<const double>)>& reference,
                           const Tensor& grid) {
  Tensor out = forward(net, grid);
  double worst = 0.0;
  const std::size_t n = grid.cols(), d = grid.rows();
  std::vector<double> x(d);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t k = 0; k < d; ++k) x[k] = grid(k, b);
    auto ref = reference(x);
    for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(out(i, b) - ref[i]));
  }
  return worst;
}

double max_abs_intermediate(const TransformerNet& net, const Tensor& grid) {
  ForwardTrace trace;
  forward(net, grid, &trace);
  double worst = 0.0;
  for (const auto& z : trace)
    for (double v : z.data()) worst = std::max(worst, std::abs(v));
  return worst;
}

}  // namespace lfm
