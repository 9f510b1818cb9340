#include "lfm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

namespace lfm {

namespace {

std::size_t shape_product(const Tensor::Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(fmt::format("{}: shapes {} and {} differ", op, a.shape_string(), b.shape_string()));
  }
}

void require_rank_le2(const Tensor& a, const char* op) {
  if (a.rank() > 2) throw DimensionError(fmt::format("{}: rank {} not supported", op, a.rank()));
}

Tensor::Shape matrix_shape(std::size_t r, std::size_t c) { return {r, c}; }

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor::Tensor() : shape_{0}, data_(std::make_shared<std::vector<double>>()) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (shape_product(shape_) != data.size()) {
    throw DimensionError(fmt::format("tensor: shape {} needs {} entries, got {}", fmt::join(shape_, "x"),
                                     shape_product(shape_), data.size()));
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) throw ContractError(fmt::format("tensor: entry {} is not finite", i));
  }
  data_ = std::make_shared<std::vector<double>>(std::move(data));
}

Tensor::Tensor(Unchecked, Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::make_shared<std::vector<double>>(std::move(data))) {}

Tensor make_unchecked(Tensor::Shape shape, std::vector<double> data) {
  return Tensor(Tensor::Unchecked{}, std::move(shape), std::move(data));
}

Tensor Tensor::zeros(Shape shape) {
  auto n = shape_product(shape);
  return make_unchecked(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::filled(Shape shape, double value) {
  auto n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  auto n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  std::size_t r = rows.size();
  std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  auto t = zeros({n, n});
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  if (rank() == 0) return 1;
  return shape_[0];
}

std::size_t Tensor::cols() const { return rank() == 2 ? shape_[1] : 1; }

std::span<double> Tensor::mutable_data() {
  if (data_.use_count() > 1) data_ = std::make_shared<std::vector<double>>(*data_);
  return *data_;
}

double& Tensor::at(std::size_t r, std::size_t c) { return mutable_data()[r * cols() + c]; }

double Tensor::item() const {
  if (size() != 1) throw ContractError(fmt::format("item: tensor {} is not a scalar", shape_string()));
  return (*data_)[0];
}

std::vector<double> Tensor::column(std::size_t c) const {
  std::vector<double> out(rows());
  std::size_t nc = cols();
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = (*data_)[r * nc + c];
  return out;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_product(shape) != size()) throw DimensionError("reshaped: size mismatch");
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

bool Tensor::all_finite() const {
  return std::all_of(data_->begin(), data_->end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const { return fmt::format("[{}]", fmt::join(shape_, "x")); }

bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && *a.data_ == *b.data_; }

// ---------------------------------------------------------------- plain ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank_le2(a, "matmul");
  require_rank_le2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError(fmt::format("matmul: inner dimensions {} and {} differ", a.shape_string(), b.shape_string()));
  }
  std::vector<double> out(m * n, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += aip * brow[j];
    }
  }
  Tensor::Shape shape = b.rank() == 2 ? matrix_shape(m, n) : Tensor::Shape{m};
  return make_unchecked(std::move(shape), std::move(out));
}

Tensor transpose(const Tensor& a) {
  require_rank_le2(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  auto A = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  return make_unchecked(matrix_shape(n, m), std::move(out));
}

namespace {
template <class F>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
  require_same_shape(a, b, op);
  std::vector<double> out(a.size());
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(A[i], B[i]);
  return make_unchecked(a.shape(), std::move(out));
}

template <class F>
Tensor map(const Tensor& a, F f) {
  std::vector<double> out(a.size());
  auto A = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(A[i]);
  return make_unchecked(a.shape(), std::move(out));
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return zip(a, b, "add", std::plus<>{}); }
Tensor sub(const Tensor& a, const Tensor& b) { return zip(a, b, "sub", std::minus<>{}); }
Tensor hadamard(const Tensor& a, const Tensor& b) { return zip(a, b, "hadamard", std::multiplies<>{}); }
Tensor scale(const Tensor& a, double factor) {
  return map(a, [factor](double v) { return v * factor; });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank_le2(x, "add_bias");
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.size() != m) {
    throw DimensionError(fmt::format("add_bias: bias {} does not match {} rows", bias.shape_string(), m));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[i];
  return make_unchecked(x.shape(), std::move(out));
}

Tensor relu(const Tensor& x) {
  return map(x, [](double v) { return v > 0.0 ? v : 0.0; });
}

Tensor hardmax_cols(const Tensor& x) {
  require_rank_le2(x, "hardmax_cols");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n, 0.0);
  auto X = x.data();
  for (std::size_t j = 0; j < n; ++j) {
    double best = -INFINITY;
    for (std::size_t i = 0; i < m; ++i) best = std::max(best, X[i * n + j]);
    std::size_t ties = 0;
    for (std::size_t i = 0; i < m; ++i) ties += X[i * n + j] == best;
    const double mass = 1.0 / static_cast<double>(ties);
    for (std::size_t i = 0; i < m; ++i)
      if (X[i * n + j] == best) out[i * n + j] = mass;
  }
  return make_unchecked(x.shape(), std::move(out));
}

namespace {
void check_blocks(const Tensor& a, const Tensor& b, std::size_t tokens, const char* op) {
  if (tokens == 0 || a.cols() % tokens != 0 || a.cols() != b.cols()) {
    throw DimensionError(fmt::format("{}: {} and {} are not batches of {} tokens", op, a.shape_string(),
                                     b.shape_string(), tokens));
  }
}
}  // namespace

Tensor block_gram(const Tensor& keys, const Tensor& queries, std::size_t tokens) {
  check_blocks(keys, queries, tokens, "block_gram");
  if (keys.rows() != queries.rows()) throw DimensionError("block_gram: key and query widths differ");
  const std::size_t dk = keys.rows(), cols = keys.cols(), batches = cols / tokens;
  std::vector<double> out(tokens * cols, 0.0);
  auto K = keys.data();
  auto Q = queries.data();
  for (std::size_t b = 0; b < batches; ++b) {
    const std::size_t base = b * tokens;
    for (std::size_t r = 0; r < tokens; ++r)
      for (std::size_t i = 0; i < tokens; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < dk; ++c) s += K[c * cols + base + r] * Q[c * cols + base + i];
        out[r * cols + base + i] = s;
      }
  }
  return make_unchecked(matrix_shape(tokens, cols), std::move(out));
}

Tensor block_matmul(const Tensor& values, const Tensor& gates, std::size_t tokens) {
  check_blocks(values, gates, tokens, "block_matmul");
  if (gates.rows() != tokens) throw DimensionError("block_matmul: gate rows must equal tokens");
  const std::size_t dv = values.rows(), cols = values.cols(), batches = cols / tokens;
  std::vector<double> out(dv * cols, 0.0);
  auto V = values.data();
  auto G = gates.data();
  for (std::size_t b = 0; b < batches; ++b) {
    const std::size_t base = b * tokens;
    for (std::size_t c = 0; c < dv; ++c)
      for (std::size_t i = 0; i < tokens; ++i) {
        double s = 0.0;
        for (std::size_t r = 0; r < tokens; ++r) s += V[c * cols + base + r] * G[r * cols + base + i];
        out[c * cols + base + i] = s;
      }
  }
  return make_unchecked(matrix_shape(dv, cols), std::move(out));
}

Tensor concat_rows(const Tensor& top, const Tensor& bottom) {
  if (top.cols() != bottom.cols()) throw DimensionError("concat_rows: column counts differ");
  std::vector<double> out(top.data().begin(), top.data().end());
  out.insert(out.end(), bottom.data().begin(), bottom.data().end());
  return make_unchecked(matrix_shape(top.rows() + bottom.rows(), top.cols()), std::move(out));
}

Tensor take_columns(const Tensor& x, std::size_t stride, std::size_t offset) {
  if (stride == 0 || offset >= stride || x.cols() % stride != 0) throw DimensionError("take_columns: bad stride");
  const std::size_t m = x.rows(), n = x.cols(), k = n / stride;
  std::vector<double> out(m * k);
  auto X = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = X[i * n + j * stride + offset];
  return make_unchecked(matrix_shape(m, k), std::move(out));
}

Tensor patchify_cols(const Tensor& x, std::size_t patch_dim, std::size_t tokens) {
  const std::size_t d = x.rows(), batch = x.cols();
  if (patch_dim == 0 || tokens == 0 || d > patch_dim * tokens || d + patch_dim <= patch_dim * tokens) {
    throw DimensionError(fmt::format("patchify: {} coordinates do not fill {} tokens of width {}", d, tokens,
                                     patch_dim));
  }
  const std::size_t cols = batch * tokens;
  std::vector<double> out(patch_dim * cols, 0.0);
  auto X = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < tokens; ++j)
      for (std::size_t p = 0; p < patch_dim; ++p) {
        std::size_t src = j * patch_dim + p;
        if (src < d) out[p * cols + b * tokens + j] = X[src * batch + b];
      }
  return make_unchecked(matrix_shape(patch_dim, cols), std::move(out));
}

Tensor norm_clamp_cols(const Tensor& x, double bound) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += out[i * n + j] * out[i * n + j];
    double norm = std::sqrt(s);
    if (norm > bound) {
      double f = bound / norm;
      for (std::size_t i = 0; i < m; ++i) out[i * n + j] *= f;
    }
  }
  return make_unchecked(x.shape(), std::move(out));
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return map(x, [lo, hi](double v) { return std::clamp(v, lo, hi); });
}

double sum(const Tensor& x) { return std::accumulate(x.data().begin(), x.data().end(), 0.0); }

double sum_squares(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v * v;
  return s;
}

double frobenius_norm(const Tensor& x) { return std::sqrt(sum_squares(x)); }

double operator_norm(const Tensor& a, int iterations) {
  require_rank_le2(a, "operator_norm");
  const std::size_t m = a.rows(), n = a.cols();
  if (sum_squares(a) == 0.0) return 0.0;
  auto A = a.data();
  std::vector<double> v(n), u(m);
  for (std::size_t j = 0; j < n; ++j) v[j] = 1.0 + 0.1 * static_cast<double>(j % 7);
  double sigma = 0.0;
  for (int it = 0; it < iterations; ++it) {
    double vn = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (vn == 0.0) break;
    for (auto& e : v) e /= vn;
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += A[i * n + j] * v[j];
      u[i] = s;
    }
    sigma = std::sqrt(std::inner_product(u.begin(), u.end(), u.begin(), 0.0));
    std::fill(v.begin(), v.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) v[j] += A[i * n + j] * u[i];
  }
  return sigma;
}

std::size_t count_nonzero(const Tensor& x) {
  return static_cast<std::size_t>(std::count_if(x.data().begin(), x.data().end(), [](double v) { return v != 0.0; }));
}

// ---------------------------------------------------------------- tape

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("var: not attached to a tape");
  return tape_->value(id_);
}

bool Var::tracked() const { return tape_ && tape_->tracked(id_); }

const Tensor& Gradients::of(const Var& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) throw ContractError("gradients: variable is not a tracked leaf of this tape");
  return it->second;
}

void Tape::check_live() const {
  if (consumed_) throw ContractError("tape: already consumed by backward");
}

Var Tape::leaf(Tensor value) {
  check_live();
  nodes_.push_back({std::move(value), true, true, nullptr});
  grads_.emplace_back();
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  check_live();
  nodes_.push_back({std::move(value), false, false, nullptr});
  grads_.emplace_back();
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, bool tracked, Backward backward) {
  check_live();
  nodes_.push_back({std::move(value), tracked, false, tracked ? std::move(backward) : nullptr});
  grads_.emplace_back();
  return Var(this, nodes_.size() - 1);
}

std::vector<double>& Tape::grad(std::size_t id) {
  auto& g = grads_[id];
  if (g.empty()) g.assign(nodes_[id].value.size(), 0.0);
  return g;
}

Gradients Tape::backward(const Var& loss) {
  check_live();
  if (loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
  if (nodes_[loss.id()].value.size() != 1) {
    throw ContractError(fmt::format("backward: loss must be a scalar, got {}", nodes_[loss.id()].value.shape_string()));
  }
  if (nodes_[loss.id()].tracked) grad(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.tracked || node.leaf || !node.backward || grads_[i].empty()) continue;
    node.backward(grads_[i], *this);
  }
  Gradients out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].leaf) continue;
    if (grads_[i].empty()) {
      out.grads_.emplace(i, Tensor::zeros(nodes_[i].value.shape()));
    } else {
      out.grads_.emplace(i, make_unchecked(nodes_[i].value.shape(), std::move(grads_[i])));
    }
  }
  for (auto& node : nodes_) node.backward = nullptr;
  grads_.clear();
  consumed_ = true;
  return out;
}

// ---------------------------------------------------------------- tape ops

namespace {

Tape& tape_of(const Var& a) {
  if (!a.tape()) throw ContractError("var: not attached to a tape");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  if (a.tape() != b.tape() || !a.tape()) throw ContractError("var: operands live on different tapes");
  return *a.tape();
}

void accumulate(Tape& t, std::size_t id, const std::vector<double>& g) {
  if (!t.tracked(id)) return;
  auto& dst = t.grad(id);
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(matmul(a.value(), b.value()), a.tracked() || b.tracked(),
                  [ia, ib](const std::vector<double>& g, Tape& tp) {
                    const Tensor& A = tp.value(ia);
                    const Tensor& B = tp.value(ib);
                    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
                    auto Ad = A.data();
                    auto Bd = B.data();
                    if (tp.tracked(ia)) {
                      auto& ga = tp.grad(ia);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                          double s = 0.0;
                          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * Bd[p * n + j];
                          ga[i * k + p] += s;
                        }
                    }
                    if (tp.tracked(ib)) {
                      auto& gb = tp.grad(ib);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                          double aip = Ad[i * k + p];
                          if (aip == 0.0) continue;
                          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
                        }
                    }
                  });
}

Var operator+(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(add(a.value(), b.value()), a.tracked() || b.tracked(),
                  [ia, ib](const std::vector<double>& g, Tape& tp) {
                    accumulate(tp, ia, g);
                    accumulate(tp, ib, g);
                  });
}

Var operator-(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(sub(a.value(), b.value()), a.tracked() || b.tracked(),
                  [ia, ib](const std::vector<double>& g, Tape& tp) {
                    accumulate(tp, ia, g);
                    if (!tp.tracked(ib)) return;
                    auto& gb = tp.grad(ib);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                  });
}

Var hadamard(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(hadamard(a.value(), b.value()), a.tracked() || b.tracked(),
                  [ia, ib](const std::vector<double>& g, Tape& tp) {
                    auto A = tp.value(ia).data();
                    auto B = tp.value(ib).data();
                    if (tp.tracked(ia)) {
                      auto& ga = tp.grad(ia);
                      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
                    }
                    if (tp.tracked(ib)) {
                      auto& gb = tp.grad(ib);
                      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
                    }
                  });
}

Var scale(const Var& a, double factor) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  return t.record(scale(a.value(), factor), a.tracked(), [ia, factor](const std::vector<double>& g, Tape& tp) {
    auto& ga = tp.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

Var add_bias(const Var& x, const Var& bias) {
  Tape& t = tape_of(x, bias);
  const std::size_t ix = x.id(), ib = bias.id();
  return t.record(add_bias(x.value(), bias.value()), x.tracked() || bias.tracked(),
                  [ix, ib](const std::vector<double>& g, Tape& tp) {
                    accumulate(tp, ix, g);
                    if (!tp.tracked(ib)) return;
                    const Tensor& X = tp.value(ix);
                    const std::size_t m = X.rows(), n = X.cols();
                    auto& gb = tp.grad(ib);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) gb[i] += g[i * n + j];
                  });
}

Var relu(const Var& x) {
  Tape& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record(relu(x.value()), x.tracked(), [ix](const std::vector<double>& g, Tape& tp) {
    auto X = tp.value(ix).data();
    auto& gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (X[i] > 0.0) gx[i] += g[i];
  });
}

Var hardmax_cols(const Var& x) { return tape_of(x).constant(hardmax_cols(x.value())); }

Var block_gram(const Var& keys, const Var& queries, std::size_t tokens) {
  Tape& t = tape_of(keys, queries);
  const std::size_t ik = keys.id(), iq = queries.id();
  return t.record(block_gram(keys.value(), queries.value(), tokens), keys.tracked() || queries.tracked(),
                  [ik, iq, tokens](const std::vector<double>& g, Tape& tp) {
                    const Tensor& K = tp.value(ik);
                    const Tensor& Q = tp.value(iq);
                    const std::size_t dk = K.rows(), cols = K.cols(), batches = cols / tokens;
                    auto Kd = K.data();
                    auto Qd = Q.data();
                    const bool tk = tp.tracked(ik), tq = tp.tracked(iq);
                    std::vector<double>* gk = tk ? &tp.grad(ik) : nullptr;
                    std::vector<double>* gq = tq ? &tp.grad(iq) : nullptr;
                    for (std::size_t b = 0; b < batches; ++b) {
                      const std::size_t base = b * tokens;
                      for (std::size_t r = 0; r < tokens; ++r)
                        for (std::size_t i = 0; i < tokens; ++i) {
                          double gs = g[r * cols + base + i];
                          if (gs == 0.0) continue;
                          for (std::size_t c = 0; c < dk; ++c) {
                            if (gk) (*gk)[c * cols + base + r] += gs * Qd[c * cols + base + i];
                            if (gq) (*gq)[c * cols + base + i] += gs * Kd[c * cols + base + r];
                          }
                        }
                    }
                  });
}

Var block_matmul(const Var& values, const Var& gates, std::size_t tokens) {
  Tape& t = tape_of(values, gates);
  const std::size_t iv = values.id(), ig = gates.id();
  return t.record(block_matmul(values.value(), gates.value(), tokens), values.tracked() || gates.tracked(),
                  [iv, ig, tokens](const std::vector<double>& g, Tape& tp) {
                    const Tensor& V = tp.value(iv);
                    const Tensor& G = tp.value(ig);
                    const std::size_t dv = V.rows(), cols = V.cols(), batches = cols / tokens;
                    auto Vd = V.data();
                    auto Gd = G.data();
                    std::vector<double>* gv = tp.tracked(iv) ? &tp.grad(iv) : nullptr;
                    std::vector<double>* gg = tp.tracked(ig) ? &tp.grad(ig) : nullptr;
                    for (std::size_t b = 0; b < batches; ++b) {
                      const std::size_t base = b * tokens;
                      for (std::size_t c = 0; c < dv; ++c)
                        for (std::size_t i = 0; i < tokens; ++i) {
                          double ga = g[c * cols + base + i];
                          if (ga == 0.0) continue;
                          for (std::size_t r = 0; r < tokens; ++r) {
                            if (gv) (*gv)[c * cols + base + r] += ga * Gd[r * cols + base + i];
                            if (gg) (*gg)[r * cols + base + i] += ga * Vd[c * cols + base + r];
                          }
                        }
                    }
                  });
}

Var concat_rows(const Var& top, const Var& bottom) {
  Tape& t = tape_of(top, bottom);
  const std::size_t it = top.id(), ib = bottom.id();
  const std::size_t split = top.value().size();
  return t.record(concat_rows(top.value(), bottom.value()), top.tracked() || bottom.tracked(),
                  [it, ib, split](const std::vector<double>& g, Tape& tp) {
                    if (tp.tracked(it)) {
                      auto& gt = tp.grad(it);
                      for (std::size_t i = 0; i < split; ++i) gt[i] += g[i];
                    }
                    if (tp.tracked(ib)) {
                      auto& gb = tp.grad(ib);
                      for (std::size_t i = split; i < g.size(); ++i) gb[i - split] += g[i];
                    }
                  });
}

Var take_columns(const Var& x, std::size_t stride, std::size_t offset) {
  Tape& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record(take_columns(x.value(), stride, offset), x.tracked(),
                  [ix, stride, offset](const std::vector<double>& g, Tape& tp) {
                    const Tensor& X = tp.value(ix);
                    const std::size_t m = X.rows(), n = X.cols(), k = n / stride;
                    auto& gx = tp.grad(ix);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < k; ++j) gx[i * n + j * stride + offset] += g[i * k + j];
                  });
}

Var patchify_cols(const Var& x, std::size_t patch_dim, std::size_t tokens) {
  Tape& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record(patchify_cols(x.value(), patch_dim, tokens), x.tracked(),
                  [ix, patch_dim, tokens](const std::vector<double>& g, Tape& tp) {
                    const Tensor& X = tp.value(ix);
                    const std::size_t d = X.rows(), batch = X.cols(), cols = batch * tokens;
                    auto& gx = tp.grad(ix);
                    for (std::size_t b = 0; b < batch; ++b)
                      for (std::size_t j = 0; j < tokens; ++j)
                        for (std::size_t p = 0; p < patch_dim; ++p) {
                          std::size_t src = j * patch_dim + p;
                          if (src < d) gx[src * batch + b] += g[p * cols + b * tokens + j];
                        }
                  });
}

Var norm_clamp_cols(const Var& x, double bound) {
  Tape& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record(norm_clamp_cols(x.value(), bound), x.tracked(),
                  [ix, bound](const std::vector<double>& g, Tape& tp) {
                    const Tensor& X = tp.value(ix);
                    const std::size_t m = X.rows(), n = X.cols();
                    auto Xd = X.data();
                    auto& gx = tp.grad(ix);
                    for (std::size_t j = 0; j < n; ++j) {
                      double s = 0.0, dot = 0.0;
                      for (std::size_t i = 0; i < m; ++i) {
                        s += Xd[i * n + j] * Xd[i * n + j];
                        dot += Xd[i * n + j] * g[i * n + j];
                      }
                      const double norm = std::sqrt(s);
                      if (norm > bound) {
                        const double f = bound / norm;
                        for (std::size_t i = 0; i < m; ++i)
                          gx[i * n + j] += f * (g[i * n + j] - Xd[i * n + j] * dot / s);
                      } else {
                        for (std::size_t i = 0; i < m; ++i) gx[i * n + j] += g[i * n + j];
                      }
                    }
                  });
}

Var clamp(const Var& x, double lo, double hi) {
  Tape& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record(clamp(x.value(), lo, hi), x.tracked(), [ix, lo, hi](const std::vector<double>& g, Tape& tp) {
    auto X = tp.value(ix).data();
    auto& gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (X[i] >= lo && X[i] <= hi) gx[i] += g[i];
  });
}

Var sum(const Var& x) {
  Tape& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record(make_unchecked({}, {sum(x.value())}), x.tracked(), [ix](const std::vector<double>& g, Tape& tp) {
    auto& gx = tp.grad(ix);
    for (auto& v : gx) v += g[0];
  });
}

Var sum_squares(const Var& x) {
  Tape& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record(make_unchecked({}, {sum_squares(x.value())}), x.tracked(), [ix](const std::vector<double>& g, Tape& tp) {
    auto X = tp.value(ix).data();
    auto& gx = tp.grad(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0 * g[0] * X[i];
  });
}

}  // namespace lfm
