#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lfm/errors.hpp"

namespace lfm {

/**
 * Dense row-major array of doubles.
 *
 * Storage is shared between copies and cloned on the first mutable access,
 * so passing tensors by value is cheap and a tensor never changes behind
 * another holder's back. Rank-0 tensors are scalars, rank-1 tensors are
 * vectors, rank-2 tensors are matrices; the ops below only need those.
 */
class Tensor {
 public:
  using Shape = std::vector<std::size_t>;

  Tensor();

  /// Validates that the shape matches the data length and that every entry
  /// is finite. Use this for anything that comes from outside the library.
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_->size(); }
  /// Rows of a matrix; length of a vector; 1 for a scalar.
  std::size_t rows() const;
  /// Columns of a matrix; 1 for vectors and scalars.
  std::size_t cols() const;

  std::span<const double> data() const { return *data_; }
  std::span<double> mutable_data();

  double operator[](std::size_t i) const { return (*data_)[i]; }
  double operator()(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c);
  double item() const;

  std::vector<double> column(std::size_t c) const;
  Tensor reshaped(Shape shape) const;
  bool all_finite() const;

  std::string shape_string() const;

  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  struct Unchecked {};
  Tensor(Unchecked, Shape shape, std::vector<double> data);

  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;

  friend Tensor make_unchecked(Tensor::Shape shape, std::vector<double> data);
};

/// Internal constructor used by ops whose outputs are correct by construction.
Tensor make_unchecked(Tensor::Shape shape, std::vector<double> data);

// Plain tensor arithmetic (no tape).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor relu(const Tensor& x);
Tensor hardmax_cols(const Tensor& x);
Tensor block_gram(const Tensor& keys, const Tensor& queries, std::size_t tokens);
Tensor block_matmul(const Tensor& values, const Tensor& gates, std::size_t tokens);
Tensor concat_rows(const Tensor& top, const Tensor& bottom);
Tensor take_columns(const Tensor& x, std::size_t stride, std::size_t offset);
Tensor patchify_cols(const Tensor& x, std::size_t patch_dim, std::size_t tokens);
Tensor norm_clamp_cols(const Tensor& x, double bound);
Tensor clamp(const Tensor& x, double lo, double hi);
double sum(const Tensor& x);
double sum_squares(const Tensor& x);
double frobenius_norm(const Tensor& x);
/// Largest singular value by power iteration on AᵀA, started from the all-ones vector.
double operator_norm(const Tensor& a, int iterations = 10);
std::size_t count_nonzero(const Tensor& x);

class Tape;

/// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  bool tracked() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients of a scalar loss with respect to tracked leaves.
class Gradients {
 public:
  /// Gradient for a leaf; exactly zero when the loss did not depend on it.
  const Tensor& of(const Var& leaf) const;

 private:
  friend class Tape;
  std::unordered_map<std::size_t, Tensor> grads_;
  std::unordered_map<std::size_t, Tensor> zeros_;
};

/**
 * Single-writer record of primitive operations for reverse-mode
 * differentiation.
 *
 * Nodes are appended in evaluation order, so the record is topologically
 * sorted by construction. Operations whose inputs are all untracked store no
 * backward closure. backward() walks the record once in reverse and then
 * consumes the tape.
 */
class Tape {
 public:
  using Backward = std::function<void(const std::vector<double>& grad_out, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var constant(Tensor value);

  Gradients backward(const Var& loss);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Used by op implementations.
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool tracked(std::size_t id) const { return nodes_[id].tracked; }
  Var record(Tensor value, bool tracked, Backward backward);
  /// Gradient accumulator for a tracked node; allocated on first use.
  std::vector<double>& grad(std::size_t id);

 private:
  struct Node {
    Tensor value;
    bool tracked = false;
    bool leaf = false;
    Backward backward;
  };
  void check_live() const;

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool consumed_ = false;
};

// Tape-aware versions. Results are tracked when any input is tracked.
Var matmul(const Var& a, const Var& b);
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_bias(const Var& x, const Var& bias);
Var relu(const Var& x);
/// The hardmax is piecewise constant; its output is never tracked.
Var hardmax_cols(const Var& x);
Var block_gram(const Var& keys, const Var& queries, std::size_t tokens);
Var block_matmul(const Var& values, const Var& gates, std::size_t tokens);
Var concat_rows(const Var& top, const Var& bottom);
Var take_columns(const Var& x, std::size_t stride, std::size_t offset);
Var patchify_cols(const Var& x, std::size_t patch_dim, std::size_t tokens);
Var norm_clamp_cols(const Var& x, double bound);
Var clamp(const Var& x, double lo, double hi);
Var sum(const Var& x);
Var sum_squares(const Var& x);

}  // namespace lfm
