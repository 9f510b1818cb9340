#include "lfm/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "lfm/errors.hpp"

namespace lfm {

namespace {

void require_time(double t, double lo_open, double hi, const char* what) {
  if (!(t > lo_open && t <= hi))
    throw ContractError(fmt::format("{}: t = {} outside the allowed range", what, t));
}

void require_dim(const OracleField& f, std::span<const double> x) {
  if (x.size() != f.dim()) throw DimensionError(fmt::format("point has {} coordinates, field has {}", x.size(), f.dim()));
}

}  // namespace

void DiscreteTarget::validate() const {
  if (dim == 0) throw ContractError("target dimension must be positive");
  if (weights.empty()) throw ContractError("target has no atoms");
  if (atoms.size() != dim * weights.size())
    throw DimensionError(fmt::format("{} atom coordinates for {} atoms of dimension {}", atoms.size(), weights.size(), dim));
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ContractError("target weights must be nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ContractError(fmt::format("target weights sum to {}", total));
  for (double a : atoms)
    if (!(a >= 0.0 && a <= 1.0)) throw ContractError(fmt::format("atom coordinate {} outside [0, 1]", a));
}

DiscreteTarget DiscreteTarget::uniform(std::size_t dim, std::vector<double> atoms) {
  if (dim == 0 || atoms.size() % dim != 0 || atoms.empty())
    throw DimensionError(fmt::format("{} coordinates do not form atoms of dimension {}", atoms.size(), dim));
  DiscreteTarget t;
  t.dim = dim;
  const std::size_t n = atoms.size() / dim;
  t.atoms = std::move(atoms);
  t.weights.assign(n, 1.0 / static_cast<double>(n));
  // 1/n summed n times can miss 1 by a few ulps; pin the last weight.
  double head = 0.0;
  for (std::size_t j = 0; j + 1 < n; ++j) head += t.weights[j];
  t.weights.back() = 1.0 - head;
  t.validate();
  return t;
}

DiscreteTarget DiscreteTarget::single(std::vector<double> atom) {
  const std::size_t d = atom.size();
  return uniform(d, std::move(atom));
}

DiscreteTarget DiscreteTarget::from_json(const nlohmann::json& j) {
  if (!j.contains("atoms")) throw ContractError("target JSON needs an \"atoms\" array");
  const auto& rows = j.at("atoms");
  if (!rows.is_array() || rows.empty()) throw ContractError("target JSON has no atoms");
  DiscreteTarget t;
  t.dim = rows.front().is_array() ? rows.front().size() : 1;
  for (const auto& r : rows) {
    if (r.is_array()) {
      if (r.size() != t.dim) throw DimensionError("atoms of different dimensions");
      for (const auto& v : r) t.atoms.push_back(v.get<double>());
    } else {
      if (t.dim != 1) throw DimensionError("atoms of different dimensions");
      t.atoms.push_back(r.get<double>());
    }
  }
  if (j.contains("weights")) {
    t.weights = j.at("weights").get<std::vector<double>>();
    t.validate();
    return t;
  }
  return uniform(t.dim, std::move(t.atoms));
}

DiscreteTarget DiscreteTarget::load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot open {}", path.string()));
  return from_json(nlohmann::json::parse(in));
}

DiscreteTarget DiscreteTarget::load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot open {}", path.string()));
  std::vector<double> coords;
  std::size_t dim = 0;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
        if (cell.find_first_not_of(" \t\r", used) != std::string::npos) numeric = false;
      } catch (const std::exception&) {
        numeric = false;
      }
    }
    if (!numeric) {
      if (first) {
        first = false;
        continue;
      }
      throw ContractError(fmt::format("non-numeric row in {}: {}", path.string(), line));
    }
    first = false;
    if (dim == 0) dim = row.size();
    if (row.size() != dim) throw DimensionError(fmt::format("ragged row in {}", path.string()));
    coords.insert(coords.end(), row.begin(), row.end());
  }
  if (dim == 0) throw ContractError(fmt::format("{} holds no points", path.string()));
  return uniform(dim, std::move(coords));
}

nlohmann::json DiscreteTarget::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t j = 0; j < size(); ++j) {
    auto a = atom(j);
    rows.push_back(std::vector<double>(a.begin(), a.end()));
  }
  return {{"atoms", rows}, {"weights", weights}};
}

Tensor DiscreteTarget::sample(std::size_t n, std::mt19937_64& rng) const {
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  std::vector<double> out(dim * n);
  for (std::size_t b = 0; b < n; ++b) {
    auto a = atom(pick(rng));
    for (std::size_t i = 0; i < dim; ++i) out[i * n + b] = a[i];
  }
  return Tensor({dim, n}, std::move(out));
}

Tensor DiscreteTarget::stratified(std::size_t n) const {
  const std::size_t m = size();
  std::vector<std::size_t> counts(m);
  std::vector<std::pair<double, std::size_t>> remainders(m);
  std::size_t used = 0;
  for (std::size_t j = 0; j < m; ++j) {
    const double exact = weights[j] * static_cast<double>(n);
    counts[j] = static_cast<std::size_t>(std::floor(exact));
    remainders[j] = {exact - static_cast<double>(counts[j]), j};
    used += counts[j];
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < n; ++k, ++used) ++counts[remainders[k % m].second];
  std::vector<double> out(dim * n);
  std::size_t b = 0;
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t c = 0; c < counts[j]; ++c, ++b)
      for (std::size_t i = 0; i < dim; ++i) out[i * n + b] = atoms[j * dim + i];
  return Tensor({dim, n}, std::move(out));
}

std::vector<double> DiscreteTarget::mean() const {
  std::vector<double> m(dim, 0.0);
  for (std::size_t j = 0; j < size(); ++j)
    for (std::size_t i = 0; i < dim; ++i) m[i] += weights[j] * atoms[j * dim + i];
  return m;
}

std::vector<double> interpolate(std::span<const double> x0, std::span<const double> x1, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw ContractError(fmt::format("interpolate: t = {} outside [0, 1]", t));
  if (x0.size() != x1.size()) throw DimensionError("interpolate: endpoint dimensions differ");
  const double s = std::sqrt(1.0 - t * t);
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t * x1[i] + s * x0[i];
  return out;
}

std::vector<double> regression_label(std::span<const double> x0, std::span<const double> x1, double t) {
  if (!(t >= 0.0 && t < 1.0)) throw ContractError(fmt::format("regression_label: t = {} outside [0, 1)", t));
  if (x0.size() != x1.size()) throw DimensionError("regression_label: endpoint dimensions differ");
  const double c = t / std::sqrt(1.0 - t * t);
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x1[i] - c * x0[i];
  return out;
}

std::vector<double> posterior_weights(const DiscreteTarget& target, std::span<const double> x, double t) {
  if (x.size() != target.dim) throw DimensionError("posterior_weights: point dimension differs from target");
  if (!(t >= 0.0 && t < 1.0)) throw ContractError(fmt::format("posterior_weights: t = {} outside [0, 1)", t));
  const std::size_t n = target.size();
  if (t == 0.0) return target.weights;
  const double denom = 2.0 * (1.0 - t * t);
  std::vector<double> logits(n);
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    auto a = target.atom(j);
    double dist = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double r = x[i] - t * a[i];
      dist += r * r;
    }
    logits[j] = target.weights[j] > 0.0 ? std::log(target.weights[j]) - dist / denom
                                         : -std::numeric_limits<double>::infinity();
    top = std::max(top, logits[j]);
  }
  double total = 0.0;
  for (double& l : logits) {
    l = std::exp(l - top);
    total += l;
  }
  for (double& l : logits) l /= total;
  return logits;
}

PosteriorMoments posterior_moments(const DiscreteTarget& target, std::span<const double> x, double t) {
  const auto p = posterior_weights(target, x, t);
  const std::size_t d = target.dim;
  PosteriorMoments m;
  m.mean.assign(d, 0.0);
  m.covariance.assign(d * d, 0.0);
  m.weighted_cube.assign(d, 0.0);
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] == 0.0) continue;
    auto a = target.atom(j);
    double sq = 0.0;
    for (double v : a) sq += v * v;
    m.second_moment += p[j] * sq;
    for (std::size_t i = 0; i < d; ++i) {
      m.mean[i] += p[j] * a[i];
      m.weighted_cube[i] += p[j] * a[i] * sq;
    }
  }
  // Centered accumulation keeps C positive semidefinite under rounding.
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] == 0.0) continue;
    auto a = target.atom(j);
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < d; ++c) m.covariance[r * d + c] += p[j] * (a[r] - m.mean[r]) * (a[c] - m.mean[c]);
  }
  return m;
}

OracleField::OracleField(DiscreteTarget target, double horizon) : target_(std::move(target)), horizon_(horizon) {
  target_.validate();
  if (!(horizon > 0.0 && horizon < 1.0)) throw ContractError(fmt::format("horizon {} outside (0, 1)", horizon));
}

Tensor OracleField::evaluate(const Tensor& points, std::span<const double> times) const {
  const std::size_t d = dim(), n = points.cols();
  if (points.rows() != d) throw DimensionError(fmt::format("points have {} rows, field has dimension {}", points.rows(), d));
  if (times.size() != n) throw DimensionError("one time per point required");
  std::vector<double> out(d * n), x(d);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < d; ++i) x[i] = points(i, b);
    auto v = true_velocity(*this, x, times[b]);
    for (std::size_t i = 0; i < d; ++i) out[i * n + b] = v[i];
  }
  return make_unchecked({d, n}, std::move(out));
}

std::vector<double> true_velocity(const OracleField& field, std::span<const double> x, double t) {
  require_dim(field, x);
  if (!(t >= 0.0 && t <= field.horizon()))
    throw ContractError(fmt::format("true_velocity: t = {} outside [0, {}]", t, field.horizon()));
  if (t == 0.0) return field.target().mean();
  const auto p = posterior_weights(field.target(), x, t);
  const std::size_t d = x.size();
  std::vector<double> v(d, 0.0);
  for (std::size_t j = 0; j < p.size(); ++j) {
    auto a = field.target().atom(j);
    for (std::size_t i = 0; i < d; ++i) v[i] += p[j] * a[i];
  }
  const double s = 1.0 - t * t;
  for (std::size_t i = 0; i < d; ++i) v[i] = (v[i] - t * x[i]) / s;
  return v;
}

std::vector<double> true_velocity_dt(const OracleField& field, std::span<const double> x, double t) {
  require_dim(field, x);
  require_time(t, 0.0, field.horizon(), "true_velocity_dt");
  const auto m = posterior_moments(field.target(), x, t);
  const std::size_t d = x.size();
  const double s = 1.0 - t * t, s2 = s * s, s3 = s2 * s, q = 1.0 + t * t;
  std::vector<double> out(d);
  for (std::size_t i = 0; i < d; ++i) {
    double cx = 0.0;
    for (std::size_t k = 0; k < d; ++k) cx += m.covariance[i * d + k] * x[k];
    out[i] = -q / s2 * x[i] + 2.0 * t / s2 * m.mean[i] + q / s3 * cx -
             t / s3 * (m.weighted_cube[i] - m.mean[i] * m.second_moment);
  }
  return out;
}

std::vector<double> true_velocity_grad(const OracleField& field, std::span<const double> x, double t) {
  require_dim(field, x);
  require_time(t, 0.0, field.horizon(), "true_velocity_grad");
  auto g = posterior_moments(field.target(), x, t).covariance;
  const std::size_t d = x.size();
  const double s = 1.0 - t * t;
  for (double& v : g) v *= t / (s * s);
  for (std::size_t i = 0; i < d; ++i) g[i * d + i] -= t / s;
  return g;
}

std::vector<double> score_velocity(const OracleField& field, std::span<const double> x, double t) {
  require_dim(field, x);
  if (!(t >= 1e-3 && t <= field.horizon()))
    throw ContractError(fmt::format("score_velocity: t = {} outside [1e-3, {}]", t, field.horizon()));
  const auto p = posterior_weights(field.target(), x, t);
  const std::size_t d = x.size();
  const double s = 1.0 - t * t;
  std::vector<double> score(d, 0.0);
  for (std::size_t j = 0; j < p.size(); ++j) {
    auto a = field.target().atom(j);
    for (std::size_t i = 0; i < d; ++i) score[i] += p[j] * (t * a[i] - x[i]) / s;
  }
  for (std::size_t i = 0; i < d; ++i) score[i] = score[i] / t + x[i] / t;
  return score;
}

DerivativeCheck finite_difference_check(const OracleField& field, std::span<const double> x, double t, double h) {
  if (!(t > h && t + h <= field.horizon()))
    throw ContractError(fmt::format("finite_difference_check: t = {} leaves room for no central step h = {}", t, h));
  const std::size_t d = field.dim();
  auto rel = [](double fd, double an) { return std::abs(fd - an) / std::max(std::abs(an), 1.0); };
  DerivativeCheck out;
  const auto dt = true_velocity_dt(field, x, t);
  const auto vp = true_velocity(field, x, t + h), vm = true_velocity(field, x, t - h);
  for (std::size_t i = 0; i < d; ++i) out.time_error = std::max(out.time_error, rel((vp[i] - vm[i]) / (2 * h), dt[i]));
  const auto jac = true_velocity_grad(field, x, t);
  std::vector<double> xp(x.begin(), x.end()), xm = xp;
  for (std::size_t c = 0; c < d; ++c) {
    xp[c] += h;
    xm[c] -= h;
    const auto hi = true_velocity(field, xp, t), lo = true_velocity(field, xm, t);
    for (std::size_t r = 0; r < d; ++r)
      out.jacobian_error = std::max(out.jacobian_error, rel((hi[r] - lo[r]) / (2 * h), jac[r * d + c]));
    xp[c] = x[c];
    xm[c] = x[c];
  }
  return out;
}

double symmetric_operator_norm(std::span<const double> m, std::size_t d) {
  if (m.size() != d * d) throw DimensionError("symmetric_operator_norm: matrix is not d x d");
  Eigen::MatrixXd a(d, d);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) a(r, c) = m[r * d + c];
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(a, Eigen::EigenvaluesOnly);
  return eig.eigenvalues().cwiseAbs().maxCoeff();
}

BoundsReport check_bounds(const OracleField& field, const Tensor& points, std::span<const double> times, double radius) {
  const std::size_t d = field.dim(), n = points.cols();
  if (points.rows() != d) throw DimensionError("check_bounds: point dimension differs from field");
  if (times.size() != n) throw DimensionError("check_bounds: one time per point required");
  const double T = field.horizon(), R = radius, s = 1.0 - T * T;
  const double rd = std::sqrt(static_cast<double>(d)), d32 = rd * static_cast<double>(d);
  BoundsReport r;
  r.velocity_bound = (1.0 + R) / s;
  r.time_derivative_bound = rd * (1.0 + T * T) * R / (s * s) + 2.0 * rd * T / (s * s) +
                            2.0 * d32 * (1.0 + T * T) * R / (s * s * s) + 2.0 * d32 * T / (s * s * s);
  r.jacobian_bound = T * static_cast<double>(d) / (s * s);
  std::vector<double> x(d);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < d; ++i) {
      x[i] = points(i, b);
      if (std::abs(x[i]) > R) throw ContractError(fmt::format("check_bounds: coordinate {} outside [-R, R]", x[i]));
    }
    const double t = times[b];
    for (double v : true_velocity(field, x, t)) r.max_velocity = std::max(r.max_velocity, std::abs(v));
    if (t == 0.0) continue;
    double norm = 0.0;
    for (double v : true_velocity_dt(field, x, t)) norm += v * v;
    r.max_time_derivative = std::max(r.max_time_derivative, std::sqrt(norm));
    r.max_jacobian = std::max(r.max_jacobian, symmetric_operator_norm(true_velocity_grad(field, x, t), d));
  }
  return r;
}

}  // namespace lfm
