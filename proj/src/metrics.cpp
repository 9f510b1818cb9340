#include "lfm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "lfm/errors.hpp"

namespace lfm {

EmpiricalMeasure::EmpiricalMeasure(Tensor pts) : points(std::move(pts)) {
  if (points.rank() != 2 || points.cols() == 0) throw ContractError("empirical measure needs at least one point");
}

std::vector<std::size_t> solve_assignment(std::span<const double> cost, std::size_t n) {
  if (cost.size() != n * n) throw DimensionError("assignment cost matrix is not square");
  // Shortest augmenting paths with potentials; index 0 is a sentinel column.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      const double* row = cost.data() + (i0 - 1) * n;
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = row[j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> match(n);
  for (std::size_t j = 1; j <= n; ++j) match[p[j] - 1] = j - 1;
  return match;
}

double w2_exact(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) throw DimensionError(fmt::format("w2_exact: dimensions {} and {}", a.rows(), b.rows()));
  if (a.cols() != b.cols())
    throw DimensionError(fmt::format("w2_exact: sizes {} and {} differ; resample first", a.cols(), b.cols()));
  const std::size_t n = a.cols(), d = a.rows();
  if (n == 0) throw ContractError("w2_exact: empty measures");
  std::vector<double> cost(n * n, 0.0);
  auto ad = a.data(), bd = b.data();
  for (std::size_t k = 0; k < d; ++k)
    for (std::size_t i = 0; i < n; ++i) {
      const double ai = ad[k * n + i];
      double* row = cost.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double diff = ai - bd[k * n + j];
        row[j] += diff * diff;
      }
    }
  const auto match = solve_assignment(cost, n);
  // Summing in sorted order makes the result independent of argument order.
  std::vector<double> pair_costs(n);
  for (std::size_t i = 0; i < n; ++i) pair_costs[i] = cost[i * n + match[i]];
  std::sort(pair_costs.begin(), pair_costs.end());
  double total = 0.0;
  for (double c : pair_costs) total += c;
  return std::sqrt(total / static_cast<double>(n));
}

double w2_exact(const EmpiricalMeasure& a, const EmpiricalMeasure& b) { return w2_exact(a.points, b.points); }

double coupling_w2(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(fmt::format("coupling_w2: {} vs {}", a.shape_string(), b.shape_string()));
  const double ss = sum_squares(sub(a, b));
  return std::sqrt(ss / static_cast<double>(a.cols()));
}

Tensor resample(const Tensor& points, std::size_t n, std::mt19937_64& rng) {
  const std::size_t d = points.rows(), m = points.cols();
  if (m == 0) throw ContractError("resample: empty point set");
  std::uniform_int_distribution<std::size_t> pick(0, m - 1);
  std::vector<double> out(d * n);
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t k = pick(rng);
    for (std::size_t i = 0; i < d; ++i) out[i * n + b] = points(i, k);
  }
  return Tensor({d, n}, std::move(out));
}

InterpolantSample sample_interpolant(const DiscreteTarget& target, double horizon, std::size_t n, std::mt19937_64& rng) {
  const std::size_t d = target.dim;
  std::uniform_real_distribution<double> time(0.0, horizon);
  std::normal_distribution<double> noise;
  std::discrete_distribution<std::size_t> pick(target.weights.begin(), target.weights.end());
  InterpolantSample s;
  s.times.resize(n);
  std::vector<double> x0(d * n), x1(d * n), xt(d * n);
  for (std::size_t b = 0; b < n; ++b) {
    const double t = time(rng);
    s.times[b] = t;
    const double c = std::sqrt(1.0 - t * t);
    for (std::size_t i = 0; i < d; ++i) x0[i * n + b] = noise(rng);
    auto a = target.atom(pick(rng));
    for (std::size_t i = 0; i < d; ++i) {
      x1[i * n + b] = a[i];
      xt[i * n + b] = t * a[i] + c * x0[i * n + b];
    }
  }
  s.x0 = Tensor({d, n}, std::move(x0));
  s.x1 = Tensor({d, n}, std::move(x1));
  s.xt = Tensor({d, n}, std::move(xt));
  return s;
}

Estimate l2_velocity_error(const VelocityField& v, const OracleField& oracle, std::size_t mc, std::uint64_t seed) {
  if (v.dim() != oracle.dim()) throw DimensionError("l2_velocity_error: field dimensions differ");
  if (std::abs(v.horizon() - oracle.horizon()) > 1e-12) throw ContractError("l2_velocity_error: horizons differ");
  if (mc < 2) throw ContractError("l2_velocity_error: need at least two samples");
  std::mt19937_64 rng(seed);
  const auto s = sample_interpolant(oracle.target(), oracle.horizon(), mc, rng);
  const Tensor diff = sub(v.evaluate(s.xt, s.times), oracle.evaluate(s.xt, s.times));
  const std::size_t d = diff.rows();
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t b = 0; b < mc; ++b) {
    double e = 0.0;
    for (std::size_t i = 0; i < d; ++i) e += diff(i, b) * diff(i, b);
    sum += e;
    sum_sq += e * e;
  }
  const double n = static_cast<double>(mc), mean = sum / n;
  const double var = std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0));
  return {mean, std::sqrt(var / n)};
}

Box Box::cube(std::size_t dim, double lo, double hi) { return {std::vector<double>(dim, lo), std::vector<double>(dim, hi)}; }

namespace {

double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

using PointMap = std::function<std::vector<double>(std::span<const double>, double)>;

// Operator norm of the central-difference Jacobian at (x, t), with steps kept inside the box.
double local_spatial_norm(const PointMap& f, std::size_t out_dim, const Box& box, std::span<const double> x, double t) {
  const std::size_t d = x.size();
  Eigen::MatrixXd jac(out_dim, d);
  std::vector<double> xp(x.begin(), x.end()), xm(x.begin(), x.end());
  for (std::size_t c = 0; c < d; ++c) {
    const double h = 1e-6 * std::max(1.0, box.hi[c] - box.lo[c]);
    xp[c] = std::min(x[c] + h, box.hi[c]);
    xm[c] = std::max(x[c] - h, box.lo[c]);
    const double step = xp[c] - xm[c];
    if (step > 0.0) {
      auto hi = f(xp, t), lo = f(xm, t);
      for (std::size_t r = 0; r < out_dim; ++r) jac(r, c) = (hi[r] - lo[r]) / step;
    } else {
      jac.col(c).setZero();
    }
    xp[c] = xm[c] = x[c];
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(jac);
  return svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
}

double local_time_norm(const PointMap& f, std::span<const double> x, double t, double horizon) {
  const double h = 1e-6 * std::max(1.0, horizon);
  const double hi_t = std::min(t + h, horizon), lo_t = std::max(t - h, 0.0);
  if (hi_t <= lo_t) return 0.0;
  return distance(f(x, hi_t), f(x, lo_t)) / (hi_t - lo_t);
}

LipschitzEstimate estimate(const PointMap& f, std::size_t out_dim, const Box& box, double horizon, bool with_time,
                           std::size_t pairs, std::uint64_t seed) {
  if (pairs == 0) throw ContractError("measure_lipschitz: pairs must be at least 1");
  if (box.lo.size() != box.hi.size()) throw DimensionError("measure_lipschitz: box bounds differ in dimension");
  const std::size_t d = box.dim();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw_point = [&] {
    std::vector<double> x(d);
    for (std::size_t i = 0; i < d; ++i) x[i] = box.lo[i] + (box.hi[i] - box.lo[i]) * unit(rng);
    return x;
  };
  LipschitzEstimate est;
  double record_x = -1.0, record_t = -1.0;
  std::vector<double> mid(d);
  for (std::size_t k = 0; k < pairs; ++k) {
    const double t = horizon * unit(rng);
    auto x1 = draw_point(), x2 = draw_point();
    const double dx = distance(x1, x2);
    if (dx > 0.0) {
      const double q = distance(f(x1, t), f(x2, t)) / dx;
      est.spatial = std::max(est.spatial, q);
      if (q > record_x) {
        record_x = q;
        for (std::size_t i = 0; i < d; ++i) mid[i] = 0.5 * (x1[i] + x2[i]);
        for (auto* p : {&x1, &x2, &mid})
          est.spatial = std::max(est.spatial, local_spatial_norm(f, out_dim, box, *p, t));
      }
    }
    if (!with_time) continue;
    auto x = draw_point();
    const double t1 = horizon * unit(rng), t2 = horizon * unit(rng);
    if (t1 != t2) {
      const double q = distance(f(x, t1), f(x, t2)) / std::abs(t1 - t2);
      est.temporal = std::max(est.temporal, q);
      if (q > record_t) {
        record_t = q;
        for (double s : {t1, t2, 0.5 * (t1 + t2)}) est.temporal = std::max(est.temporal, local_time_norm(f, x, s, horizon));
      }
    }
  }
  return est;
}

}  // namespace

LipschitzEstimate measure_lipschitz(const VelocityField& f, const Box& box, std::size_t pairs, std::uint64_t seed) {
  if (box.dim() != f.dim()) throw DimensionError("measure_lipschitz: box and field dimensions differ");
  PointMap g = [&f](std::span<const double> x, double t) { return f.evaluate_point(x, t); };
  return estimate(g, f.dim(), box, f.horizon(), true, pairs, seed);
}

double measure_lipschitz(const std::function<std::vector<double>(std::span<const double>)>& f, std::size_t out_dim,
                         const Box& box, std::size_t pairs, std::uint64_t seed) {
  PointMap g = [&f](std::span<const double> x, double) { return f(x); };
  return estimate(g, out_dim, box, 0.0, false, pairs, seed).spatial;
}

double log_log_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractError("log_log_slope: need at least two matching points");
  double mx = 0.0, my = 0.0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0 && y[i] > 0.0)) throw ContractError("log_log_slope: values must be positive");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double lx = std::log(x[i]) - mx;
    sxy += lx * (std::log(y[i]) - my);
    sxx += lx * lx;
  }
  if (sxx == 0.0) throw ContractError("log_log_slope: x values coincide");
  return sxy / sxx;
}

}  // namespace lfm
