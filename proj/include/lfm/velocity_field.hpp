#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "lfm/tensor.hpp"
#include "lfm/transformer.hpp"

namespace lfm {

/// Time-dependent vector field on R^d, defined for t in [0, horizon].
class VelocityField {
 public:
  virtual ~VelocityField() = default;
  virtual std::size_t dim() const = 0;
  virtual double horizon() const = 0;
  /// points is d x batch; times holds one time per column.
  virtual Tensor evaluate(const Tensor& points, std::span<const double> times) const = 0;

  Tensor evaluate(const Tensor& points, double t) const {
    std::vector<double> times(points.cols(), t);
    return evaluate(points, times);
  }
  std::vector<double> evaluate_point(std::span<const double> x, double t) const {
    Tensor p = make_unchecked({x.size(), 1}, std::vector<double>(x.begin(), x.end()));
    Tensor out = evaluate(p, t);
    return {out.data().begin(), out.data().end()};
  }
};

/// Field given by a per-point closure f(x, t).
class FunctionField final : public VelocityField {
 public:
  using Fn = std::function<std::vector<double>(std::span<const double>, double)>;
  FunctionField(std::size_t dim, double horizon, Fn fn) : dim_(dim), horizon_(horizon), fn_(std::move(fn)) {}
  std::size_t dim() const override { return dim_; }
  double horizon() const override { return horizon_; }
  Tensor evaluate(const Tensor& points, std::span<const double> times) const override {
    const std::size_t n = points.cols();
    std::vector<double> out(dim_ * n), x(dim_);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < dim_; ++i) x[i] = points(i, b);
      auto v = fn_(x, times[b]);
      for (std::size_t i = 0; i < dim_; ++i) out[i * n + b] = v[i];
    }
    return make_unchecked({dim_, n}, std::move(out));
  }

 private:
  std::size_t dim_;
  double horizon_;
  Fn fn_;
};

/// v(x, t) = c.
inline FunctionField constant_field(std::vector<double> c, double horizon) {
  const std::size_t d = c.size();
  return FunctionField(d, horizon, [c = std::move(c)](std::span<const double>, double) { return c; });
}

/// v(x, t) = A x + b, A given row-major.
inline FunctionField affine_field(Tensor a, std::vector<double> b, double horizon) {
  const std::size_t d = b.size();
  return FunctionField(d, horizon, [a = std::move(a), b = std::move(b)](std::span<const double> x, double) {
    std::vector<double> out(b);
    for (std::size_t i = 0; i < out.size(); ++i)
      for (std::size_t j = 0; j < x.size(); ++j) out[i] += a(i, j) * x[j];
    return out;
  });
}

/// Base field plus a constant offset.
class OffsetField final : public VelocityField {
 public:
  OffsetField(const VelocityField& base, std::vector<double> offset) : base_(base), offset_(std::move(offset)) {}
  std::size_t dim() const override { return base_.dim(); }
  double horizon() const override { return base_.horizon(); }
  Tensor evaluate(const Tensor& points, std::span<const double> times) const override {
    Tensor out = base_.evaluate(points, times);
    auto d = out.mutable_data();
    const std::size_t n = out.cols();
    for (std::size_t i = 0; i < offset_.size(); ++i)
      for (std::size_t b = 0; b < n; ++b) d[i * n + b] += offset_[i];
    return out;
  }

 private:
  const VelocityField& base_;
  std::vector<double> offset_;
};

/// Adapter exposing a rescaled velocity network as a field.
class NetworkField final : public VelocityField {
 public:
  explicit NetworkField(const RescaledVelocityNet& net) : net_(net) {}
  std::size_t dim() const override { return net_.dim(); }
  double horizon() const override { return net_.horizon; }
  Tensor evaluate(const Tensor& points, std::span<const double> times) const override {
    return velocity_forward(net_, points, times);
  }

 private:
  const RescaledVelocityNet& net_;
};

}  // namespace lfm
