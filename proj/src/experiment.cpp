#include "lfm/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numbers>
#include <random>
#include <set>

#include <fmt/format.h>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include "lfm/construct.hpp"
#include "lfm/csv.hpp"
#include "lfm/errors.hpp"
#include "lfm/metrics.hpp"
#include "lfm/rng.hpp"
#include "lfm/sampler.hpp"

namespace lfm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

const std::vector<std::pair<ExperimentKind, std::string>> kKindNames{
    {ExperimentKind::Construct, "construct"},
    {ExperimentKind::OracleCheck, "oracle-check"},
    {ExperimentKind::TrainLatent, "train-latent"},
    {ExperimentKind::EndToEnd, "end-to-end"},
    {ExperimentKind::DiscretizationSweep, "discretization-sweep"},
    {ExperimentKind::RateSweep, "rate-sweep"},
};

const std::vector<std::pair<SweepAxis, std::string>> kAxisNames{
    {SweepAxis::N, "n"}, {SweepAxis::M, "m"}, {SweepAxis::Horizon, "T"}, {SweepAxis::Steps, "steps"}};

// Reads the fields of one JSON object and rejects keys nobody asked for.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(fmt::format("{}: expected an object", path_.empty() ? "config" : path_));
  }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const std::string& key, std::size_t& out) {
    if (const json* v = find(key)) out = to_size(*v, where(key));
  }
  void get(const std::string& key, unsigned& out) {
    if (const json* v = find(key)) {
      const std::size_t s = to_size(*v, where(key));
      if (s > std::numeric_limits<unsigned>::max()) throw ConfigError(fmt::format("{}: value too large", where(key)));
      out = static_cast<unsigned>(s);
    }
  }
  void get(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(fmt::format("{}: expected a number", where(key)));
      out = v->get<double>();
      if (!std::isfinite(out)) throw ConfigError(fmt::format("{}: expected a finite number", where(key)));
    }
  }
  void get(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(fmt::format("{}: expected a string", where(key)));
      out = v->get<std::string>();
    }
  }
  template <class T>
  void get(const std::string& key, std::vector<T>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(fmt::format("{}: expected an array", where(key)));
      std::vector<T> r;
      for (std::size_t i = 0; i < v->size(); ++i) {
        const std::string w = fmt::format("{}[{}]", where(key), i);
        if constexpr (std::is_same_v<T, double>) {
          if (!(*v)[i].is_number()) throw ConfigError(fmt::format("{}: expected a number", w));
          r.push_back((*v)[i].template get<double>());
        } else {
          const std::size_t s = to_size((*v)[i], w);
          if (s > std::numeric_limits<T>::max()) throw ConfigError(fmt::format("{}: value too large", w));
          r.push_back(static_cast<T>(s));
        }
      }
      out = std::move(r);
    }
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ConfigError(fmt::format("{}: unknown field", where(item.key())));
  }

  static std::size_t to_size(const json& v, const std::string& where) {
    if (v.is_number_unsigned()) return v.get<std::size_t>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::size_t>(v.get<std::int64_t>());
    throw ConfigError(fmt::format("{}: expected a nonnegative integer", where));
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

NetworkShape parse_shape(const json& j, const std::string& path) {
  Fields f(j, path);
  NetworkShape s;
  f.get("layers", s.layers);
  f.get("heads", s.heads);
  f.get("value_dim", s.value_dim);
  f.get("ff_dim", s.ff_dim);
  f.finish();
  return s;
}

json shape_json(const NetworkShape& s) {
  return {{"layers", s.layers}, {"heads", s.heads}, {"value_dim", s.value_dim}, {"ff_dim", s.ff_dim}};
}

void parse_adam(Fields& f, AdamConfig& a) {
  f.get("learning_rate", a.learning_rate);
  f.get("beta1", a.beta1);
  f.get("beta2", a.beta2);
  f.get("epsilon", a.epsilon);
}

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(fmt::format("{}: {}", field, what));
}

void validate_shape(const NetworkShape& s, const std::string& path) {
  require(s.layers >= 1, path + ".layers", "must be at least 1");
  require(s.heads >= 1, path + ".heads", "must be at least 1");
  require(s.value_dim >= 1, path + ".value_dim", "must be at least 1");
  require(s.ff_dim >= 1, path + ".ff_dim", "must be at least 1");
}

bool needs_target(ExperimentKind k) {
  return k == ExperimentKind::OracleCheck || k == ExperimentKind::TrainLatent ||
         k == ExperimentKind::DiscretizationSweep;
}

bool axis_allowed(ExperimentKind base, SweepAxis a) {
  switch (base) {
    case ExperimentKind::TrainLatent:
      return a != SweepAxis::M;
    case ExperimentKind::EndToEnd:
      return true;
    case ExperimentKind::DiscretizationSweep:
      return a == SweepAxis::Horizon || a == SweepAxis::Steps;
    default:
      return false;
  }
}

bool is_training_kind(ExperimentKind k) { return k == ExperimentKind::TrainLatent || k == ExperimentKind::EndToEnd; }

// Kind used for the kind-specific checks: the sweep base for rate sweeps.
ExperimentKind effective_kind(const ExperimentConfig& c) {
  return c.kind == ExperimentKind::RateSweep && c.sweep ? c.sweep->base : c.kind;
}

}  // namespace

std::string to_string(ExperimentKind kind) {
  for (const auto& [k, name] : kKindNames)
    if (k == kind) return name;
  return "unknown";
}

ExperimentKind parse_kind(const std::string& name) {
  for (const auto& [k, n] : kKindNames)
    if (n == name) return k;
  throw UnknownKindError(fmt::format(
      "kind: unknown experiment kind \"{}\" (expected construct, oracle-check, train-latent, end-to-end, "
      "discretization-sweep or rate-sweep)",
      name));
}

std::string to_string(SweepAxis axis) {
  for (const auto& [a, name] : kAxisNames)
    if (a == axis) return name;
  return "unknown";
}

SweepAxis parse_axis(const std::string& name) {
  for (const auto& [a, n] : kAxisNames)
    if (n == name) return a;
  throw ConfigError(fmt::format("axis: unknown sweep axis \"{}\" (expected n, m, T or steps)", name));
}

void ExperimentConfig::validate() const {
  require(!seeds.empty(), "seeds", "at least one explicit seed is required");
  const ExperimentKind k = effective_kind(*this);
  if (kind == ExperimentKind::RateSweep) {
    require(sweep.has_value(), "sweep", "required for kind rate-sweep");
    require(sweep->base != ExperimentKind::RateSweep, "sweep.base", "cannot itself be rate-sweep");
    require(axis_allowed(sweep->base, sweep->axis), "sweep.axis",
            fmt::format("axis {} is not valid for kind {}", to_string(sweep->axis), to_string(sweep->base)));
    require(sweep->values.size() >= 2, "sweep.values", "at least two values are required");
  }
  if (needs_target(k)) {
    require(target.has_value(), "target", fmt::format("required for kind {}", to_string(k)));
    try {
      target->validate();
    } catch (const std::exception& e) {
      throw ConfigError(fmt::format("target: {}", e.what()));
    }
  }
  if (is_training_kind(k)) {
    require(horizon > 0.5 && horizon < 1.0, "horizon", "must lie in (0.5, 1) for training kinds");
    require(n >= 2, "n", "must be at least 2");
    require(eval_samples >= 1, "eval_samples", "must be positive");
    require(training.epochs >= 1, "training.epochs", "must be at least 1");
    require(training.batch_size >= 1, "training.batch_size", "must be positive");
    require(training.adam.learning_rate > 0.0, "training.learning_rate", "must be positive");
    require(training.clip_threshold >= 0.0, "training.clip_threshold", "must be nonnegative");
    require(training.log_every >= 1, "training.log_every", "must be positive");
    validate_shape(flow_network, "flow_network");
    require(step_constant > 0.0, "step_constant", "must be positive");
  } else {
    require(horizon > 0.0 && horizon < 1.0, "horizon", "must lie in (0, 1)");
  }
  require(radius >= 0.0, "radius", "must be nonnegative (0 selects the default)");
  if (k == ExperimentKind::TrainLatent) require(eval_mc >= 1, "eval_mc", "must be positive");
  if (k == ExperimentKind::EndToEnd) {
    try {
      (void)data_dimension(data);
    } catch (const ContractError&) {
      throw ConfigError(fmt::format("data: unknown generator \"{}\" (expected curve, plane or line)", data));
    }
    require(latent_dim >= 1, "d", "must be at least 1");
    require(m >= 1, "m", "must be positive");
    require(pretraining.epochs >= 1, "pretraining.epochs", "must be at least 1");
    require(pretraining.batch_size >= 1, "pretraining.batch_size", "must be positive");
    require(pretraining.adam.learning_rate > 0.0, "pretraining.learning_rate", "must be positive");
    require(pretraining.log_every >= 1, "pretraining.log_every", "must be positive");
    validate_shape(coder_network, "coder_network");
  }
  if (k == ExperimentKind::Construct) {
    require(construct.indices >= 1, "construct.indices", "must be positive");
    require(construct.max_degree >= 1, "construct.max_degree", "must be at least 1");
    require(!construct.input_dims.empty(), "construct.input_dims", "must be nonempty");
    for (std::size_t d : construct.input_dims)
      require(d >= 1 && d <= 4, "construct.input_dims", "entries must lie in 1..4");
    require(construct.grid_points >= 2, "construct.grid_points", "must be at least 2");
    require(!construct.degrees.empty(), "construct.degrees", "must be nonempty");
    for (unsigned d : construct.degrees) require(d >= 1 && d <= 16, "construct.degrees", "entries must lie in 1..16");
    require(construct.lipschitz_pairs >= 1, "construct.lipschitz_pairs", "must be positive");
  }
  if (k == ExperimentKind::OracleCheck) {
    require(oracle_check.points >= 1, "oracle_check.points", "must be positive");
    require(oracle_check.fd_step > 0.0 && oracle_check.fd_step < 0.01, "oracle_check.fd_step",
            "must lie in (0, 0.01)");
  }
  if (k == ExperimentKind::DiscretizationSweep) {
    require(!step_counts.empty(), "discretization.step_counts", "must be nonempty");
    for (std::size_t s : step_counts) require(s >= 1, "discretization.step_counts", "entries must be positive");
    require(tolerance > 0.0, "discretization.tolerance", "must be positive");
    require(eval_samples >= 1, "eval_samples", "must be positive");
  }
}

ExperimentConfig parse_config(const json& j) {
  Fields f(j, "");
  ExperimentConfig c;
  const json* kind = f.find("kind");
  if (!kind) throw ConfigError("kind: required");
  if (!kind->is_string()) throw ConfigError("kind: expected a string");
  c.kind = parse_kind(kind->get<std::string>());

  const json* seeds = f.find("seeds");
  if (!seeds) throw ConfigError("seeds: required (explicit seeds only)");
  if (seeds->is_array()) {
    for (std::size_t i = 0; i < seeds->size(); ++i)
      c.seeds.push_back(Fields::to_size((*seeds)[i], fmt::format("seeds[{}]", i)));
  } else {
    c.seeds.push_back(Fields::to_size(*seeds, "seeds"));
  }

  f.get("output_dir", c.output_dir);
  f.get("data", c.data);
  f.get("m", c.m);
  f.get("n", c.n);
  f.get("horizon", c.horizon);
  f.get("radius", c.radius);
  f.get("step_constant", c.step_constant);
  f.get("steps", c.steps);
  f.get("eval_samples", c.eval_samples);
  f.get("eval_mc", c.eval_mc);

  if (const json* t = f.find("target")) {
    try {
      c.target = DiscreteTarget::from_json(*t);
    } catch (const std::exception& e) {
      throw ConfigError(fmt::format("target: {}", e.what()));
    }
  }
  std::size_t d = 0;
  f.get("d", d);
  if (c.target) {
    if (d != 0 && d != c.target->dim)
      throw ConfigError(fmt::format("d: {} disagrees with the target dimension {}", d, c.target->dim));
    c.latent_dim = c.target->dim;
  } else if (f.find("d")) {
    c.latent_dim = d;
  }
  if (const json* D = f.find("D")) {
    const std::size_t want = Fields::to_size(*D, "D");
    std::size_t have = 0;
    try {
      have = data_dimension(c.data);
    } catch (const ContractError&) {
      throw ConfigError(fmt::format("data: unknown generator \"{}\" (expected curve, plane or line)", c.data));
    }
    if (want != have) throw ConfigError(fmt::format("D: {} disagrees with generator {} (D = {})", want, c.data, have));
  }

  if (const json* s = f.find("flow_network")) c.flow_network = parse_shape(*s, "flow_network");
  if (const json* s = f.find("coder_network")) c.coder_network = parse_shape(*s, "coder_network");

  if (const json* t = f.find("training")) {
    Fields g(*t, "training");
    g.get("epochs", c.training.epochs);
    g.get("batch_size", c.training.batch_size);
    parse_adam(g, c.training.adam);
    g.get("clip_threshold", c.training.clip_threshold);
    g.get("lipschitz_pairs", c.training.lipschitz_pairs);
    g.get("eval_mc", c.training.eval_mc);
    g.get("log_every", c.training.log_every);
    g.finish();
  }
  if (const json* t = f.find("pretraining")) {
    Fields g(*t, "pretraining");
    g.get("epochs", c.pretraining.epochs);
    g.get("batch_size", c.pretraining.batch_size);
    parse_adam(g, c.pretraining.adam);
    g.get("clip_threshold", c.pretraining.clip_threshold);
    g.get("log_every", c.pretraining.log_every);
    g.finish();
  }
  if (const json* t = f.find("construct")) {
    Fields g(*t, "construct");
    g.get("indices", c.construct.indices);
    g.get("max_degree", c.construct.max_degree);
    g.get("input_dims", c.construct.input_dims);
    g.get("grid_points", c.construct.grid_points);
    g.get("degrees", c.construct.degrees);
    g.get("lipschitz_pairs", c.construct.lipschitz_pairs);
    g.finish();
  }
  if (const json* t = f.find("oracle_check")) {
    Fields g(*t, "oracle_check");
    g.get("points", c.oracle_check.points);
    g.get("fd_step", c.oracle_check.fd_step);
    g.finish();
  }
  if (const json* t = f.find("discretization")) {
    Fields g(*t, "discretization");
    g.get("step_counts", c.step_counts);
    g.get("tolerance", c.tolerance);
    g.finish();
  }
  if (const json* t = f.find("sweep")) {
    Fields g(*t, "sweep");
    SweepSettings s;
    std::string base = to_string(ExperimentKind::TrainLatent), axis = "n";
    g.get("base", base);
    g.get("axis", axis);
    g.get("values", s.values);
    g.finish();
    try {
      s.base = parse_kind(base);
    } catch (const UnknownKindError&) {
      throw ConfigError(fmt::format("sweep.base: unknown experiment kind \"{}\"", base));
    }
    try {
      s.axis = parse_axis(axis);
    } catch (const ConfigError&) {
      throw ConfigError(fmt::format("sweep.axis: unknown sweep axis \"{}\" (expected n, m, T or steps)", axis));
    }
    c.sweep = s;
  }
  f.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("config: cannot open {}", path.string()));
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("config: {} is not valid JSON ({})", path.string(), e.what()));
  }
  return parse_config(j);
}

json to_json(const ExperimentConfig& c) {
  auto adam = [](const AdamConfig& a, json& j) {
    j["learning_rate"] = a.learning_rate;
    j["beta1"] = a.beta1;
    j["beta2"] = a.beta2;
    j["epsilon"] = a.epsilon;
  };
  json j;
  j["kind"] = to_string(c.kind);
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir;
  j["data"] = c.data;
  j["d"] = c.latent_dim;
  j["m"] = c.m;
  j["n"] = c.n;
  if (c.target) j["target"] = c.target->to_json();
  j["horizon"] = c.horizon;
  j["radius"] = c.radius;
  j["step_constant"] = c.step_constant;
  j["steps"] = c.steps;
  j["eval_samples"] = c.eval_samples;
  j["eval_mc"] = c.eval_mc;
  j["flow_network"] = shape_json(c.flow_network);
  j["coder_network"] = shape_json(c.coder_network);
  json t{{"epochs", c.training.epochs},
         {"batch_size", c.training.batch_size},
         {"clip_threshold", c.training.clip_threshold},
         {"lipschitz_pairs", c.training.lipschitz_pairs},
         {"eval_mc", c.training.eval_mc},
         {"log_every", c.training.log_every}};
  adam(c.training.adam, t);
  j["training"] = t;
  json p{{"epochs", c.pretraining.epochs},
         {"batch_size", c.pretraining.batch_size},
         {"clip_threshold", c.pretraining.clip_threshold},
         {"log_every", c.pretraining.log_every}};
  adam(c.pretraining.adam, p);
  j["pretraining"] = p;
  j["construct"] = {{"indices", c.construct.indices},
                    {"max_degree", c.construct.max_degree},
                    {"input_dims", c.construct.input_dims},
                    {"grid_points", c.construct.grid_points},
                    {"degrees", c.construct.degrees},
                    {"lipschitz_pairs", c.construct.lipschitz_pairs}};
  j["oracle_check"] = {{"points", c.oracle_check.points}, {"fd_step", c.oracle_check.fd_step}};
  j["discretization"] = {{"step_counts", c.step_counts}, {"tolerance", c.tolerance}};
  if (c.sweep)
    j["sweep"] = {{"base", to_string(c.sweep->base)}, {"axis", to_string(c.sweep->axis)}, {"values", c.sweep->values}};
  return j;
}

std::string git_blob_sha1(std::string_view content) {
  const std::string header = fmt::format("blob {}", content.size());
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw std::runtime_error("EVP_MD_CTX_new failed");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size() + 1) == 1 &&  // includes the NUL
                  EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, digest, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("SHA-1 digest failed");
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot read {}", p.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Files written under the output directory, in creation order.
class Artifacts {
 public:
  explicit Artifacts(fs::path root) : root_(std::move(root)) {}

  fs::path path(const std::string& rel) {
    fs::path p = root_ / rel;
    fs::create_directories(p.parent_path());
    files_.push_back(rel);
    return p;
  }
  void write_json(const std::string& rel, const json& j) {
    std::ofstream out(path(rel));
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", rel));
  }
  const fs::path& root() const { return root_; }
  const std::vector<std::string>& files() const { return files_; }

 private:
  fs::path root_;
  std::vector<std::string> files_;
};

fs::path write_manifest(const Artifacts& a, json manifest, const std::string& error) {
  manifest["library"] = {{"name", kLibraryName}, {"version", kLibraryVersion}};
  manifest["status"] = error.empty() ? "complete" : "partial";
  if (!error.empty()) manifest["error"] = error;
  json list = json::array();
  for (const auto& rel : a.files()) {
    const fs::path p = a.root() / rel;
    if (!fs::exists(p)) continue;
    const std::string content = read_file(p);
    list.push_back({{"path", rel}, {"bytes", content.size()}, {"sha1", git_blob_sha1(content)}});
  }
  manifest["artifacts"] = list;
  const fs::path out = a.root() / "manifest.json";
  std::ofstream f(out);
  f << manifest.dump(2) << '\n';
  return out;
}

std::string cell(double v) { return format_double(v); }
std::string cell(std::size_t v) { return std::to_string(v); }

LatentRunSettings latent_settings(const ExperimentConfig& c, std::uint64_t seed) {
  LatentRunSettings s;
  s.target = *c.target;
  s.n = c.n;
  s.seed = seed;
  s.horizon = c.horizon;
  s.radius = c.radius;
  s.step_constant = c.step_constant;
  s.steps = c.steps;
  s.shape = c.flow_network;
  s.train = c.training;
  s.eval_samples = c.eval_samples;
  s.eval_mc = c.eval_mc;
  return s;
}

EndToEndSettings end_to_end_settings(const ExperimentConfig& c, std::uint64_t seed) {
  EndToEndSettings s;
  s.data = c.data;
  s.latent_dim = c.latent_dim;
  s.m = c.m;
  s.n = c.n;
  s.seed = seed;
  s.horizon = c.horizon;
  s.radius = c.radius;
  s.step_constant = c.step_constant;
  s.steps = c.steps;
  s.flow_shape = c.flow_network;
  s.coder_shape = c.coder_network;
  s.train = c.training;
  s.pretrain = c.pretraining;
  s.eval_samples = c.eval_samples;
  return s;
}

// ---- construct -------------------------------------------------------------

void run_construct(const ExperimentConfig& c, Artifacts& a) {
  {
    CsvWriter w(a.path("metrics/blocks.csv"), {"block", "patch_dim", "tokens", "nonzeros", "budget"});
    const std::vector<std::pair<AccumulatorVariant, std::string>> variants{
        {AccumulatorVariant::Reset, "accumulator-reset"},
        {AccumulatorVariant::Move, "accumulator-move"},
        {AccumulatorVariant::CopyBack, "accumulator-copy-back"},
        {AccumulatorVariant::Clear, "accumulator-clear"}};
    for (std::size_t dp = 1; dp <= 3; ++dp)
      for (std::size_t l = 1; l <= 3; ++l) {
        const TokenLayout L{dp, l};
        const std::size_t dm = L.block();
        auto row = [&](const std::string& name, std::size_t nz, std::size_t budget) {
          w.row({name, cell(dp), cell(l), cell(nz), cell(budget)});
        };
        row("linear-reader", count_nonzero(build_linear_reader(L, l, dp, 0.3, 8.0)), dm + 6);
        row("multiplier", count_nonzero(build_multiplier(L, 1, 8.0)), dm + 5);
        row("squarer", count_nonzero(build_squarer(L)), dm + 3);
        for (const auto& [v, name] : variants) row(name, count_nonzero(build_accumulator(L, 1.5, 8.0, v)), 18);
      }
  }

  json reports = json::array();
  {
    CsvWriter w(a.path("metrics/monomials.csv"),
                {"seed", "index", "patch_dim", "tokens", "exponents", "degree", "layers", "layer_bound", "nonzeros",
                 "max_abs_intermediate", "max_error"});
    for (std::uint64_t seed : c.seeds) {
      auto rng = substream(seed, "construct");
      for (std::size_t k = 0; k < c.construct.indices; ++k) {
        std::uniform_int_distribution<std::size_t> pick_dim(0, c.construct.input_dims.size() - 1);
        const std::size_t dim = c.construct.input_dims[pick_dim(rng)];
        std::vector<TokenLayout> layouts;
        for (std::size_t dp = 1; dp <= dim; ++dp)
          if (dim % dp == 0) layouts.push_back({dp, dim / dp});
        std::uniform_int_distribution<std::size_t> pick_layout(0, layouts.size() - 1);
        MultiIndex n{layouts[pick_layout(rng)], std::vector<unsigned>(dim, 0)};
        std::uniform_int_distribution<unsigned> pick_degree(0, c.construct.max_degree);
        std::uniform_int_distribution<std::size_t> pick_entry(0, dim - 1);
        for (unsigned left = pick_degree(rng); left > 0; --left) ++n.powers[pick_entry(rng)];

        Construction con = build_monomial_net(n);
        const Tensor grid = unit_grid(dim, c.construct.grid_points);
        con.report.max_error = verify_construction(
            con.net, [&](std::span<const double> x) { return std::vector<double>{n.evaluate(x)}; }, grid);
        con.report.max_abs_intermediate = max_abs_intermediate(con.net, grid);
        const auto& r = con.report;
        w.row({std::to_string(seed), cell(k), cell(r.patch_dim), cell(r.tokens), fmt::format("{}", fmt::join(n.powers, " ")), cell(std::size_t(n.degree())),
               cell(r.layers), cell(r.layer_bound), cell(r.nonzeros), cell(r.max_abs_intermediate), cell(r.max_error)});
        json rj = to_json(r);
        rj["seed"] = seed;
        rj["exponents"] = n.powers;
        reports.push_back(rj);
      }
    }
  }

  {
    CsvWriter w(a.path("metrics/approximation.csv"),
                {"degree", "sup_error", "lipschitz", "lipschitz_bound", "layers", "heads", "nonzeros"});
    auto f = [](std::span<const double> x) { return std::sin(2.0 * std::numbers::pi * x[0]); };
    const Tensor grid = unit_grid(1, 2049);
    for (unsigned degree : c.construct.degrees) {
      const PolynomialTerms terms = fit_polynomial_least_squares(f, 1, degree);
      Construction con = assemble_polynomial_approximator(terms);
      con.report.max_error =
          verify_construction(con.net, [&](std::span<const double> x) { return std::vector<double>{f(x)}; }, grid);
      con.report.max_abs_intermediate = max_abs_intermediate(con.net, grid);
      const double lip = measure_lipschitz(
          [&](std::span<const double> x) { return forward_point(con.net, x); }, 1, Box::cube(1, 0.0, 1.0),
          c.construct.lipschitz_pairs, derive_seed(c.seeds.front(), "lipschitz"));
      w.row({cell(std::size_t(degree)), cell(con.report.max_error), cell(lip), cell(polynomial_lipschitz_bound(terms)),
             cell(con.report.layers), cell(con.report.heads), cell(con.report.nonzeros)});
      a.write_json(fmt::format("checkpoints/polynomial_degree{}.json", degree), to_json(con.net));
      json rj = to_json(con.report);
      rj["degree"] = degree;
      reports.push_back(rj);
    }
  }
  a.write_json("checkpoints/construction_reports.json", reports);
}

// ---- oracle-check ----------------------------------------------------------

void run_oracle_check(const ExperimentConfig& c, Artifacts& a) {
  const DiscreteTarget& target = *c.target;
  const std::size_t d = target.dim;
  const double R = c.radius > 0.0 ? c.radius : 2.0;
  const double h = c.oracle_check.fd_step;
  OracleField field(target, c.horizon);

  std::vector<std::string> header{"seed", "point", "t"};
  for (std::size_t i = 0; i < d; ++i) header.push_back(fmt::format("x{}", i + 1));
  header.insert(header.end(), {"time_error", "jacobian_error"});
  CsvWriter pw(a.path("metrics/oracle_points.csv"), header);
  CsvWriter bw(a.path("metrics/oracle_bounds.csv"), {"seed", "quantity", "max", "bound", "holds"});

  for (std::uint64_t seed : c.seeds) {
    auto rng = substream(seed, "oracle-points");
    std::uniform_real_distribution<double> ux(-R, R), ut(std::max(0.02, 2 * h), c.horizon - 2 * h);
    Tensor points = Tensor::zeros({d, c.oracle_check.points});
    std::vector<double> times(c.oracle_check.points);
    for (std::size_t p = 0; p < c.oracle_check.points; ++p) {
      times[p] = ut(rng);
      std::vector<double> x(d);
      for (std::size_t i = 0; i < d; ++i) points.at(i, p) = x[i] = ux(rng);
      const DerivativeCheck chk = finite_difference_check(field, x, times[p], h);
      std::vector<std::string> row{std::to_string(seed), cell(p), cell(times[p])};
      for (double v : x) row.push_back(cell(v));
      row.push_back(cell(chk.time_error));
      row.push_back(cell(chk.jacobian_error));
      pw.row(row);
    }
    const BoundsReport b = check_bounds(field, points, times, R);
    auto row = [&](const char* q, double mx, double bound, bool ok) {
      bw.row({std::to_string(seed), q, cell(mx), cell(bound), ok ? "1" : "0"});
    };
    row("velocity", b.max_velocity, b.velocity_bound, b.velocity_ok());
    row("time_derivative", b.max_time_derivative, b.time_derivative_bound, b.time_derivative_ok());
    row("jacobian", b.max_jacobian, b.jacobian_bound, b.jacobian_ok());
  }
}

// ---- train-latent ----------------------------------------------------------

void run_train_latent(const ExperimentConfig& c, Artifacts& a) {
  CsvWriter sw(a.path("metrics/summary.csv"), {"seed", "n", "horizon", "steps", "w2", "population_gap",
                                               "population_gap_stderr", "zero_field_gap", "zero_field_gap_stderr",
                                               "best_epoch"});
  for (std::uint64_t seed : c.seeds) {
    spdlog::info("train-latent: seed {}", seed);
    const LatentRunResult r = run_latent_flow(latent_settings(c, seed));
    write_training_log(a.path(fmt::format("metrics/training_seed{}.csv", seed)), r.training.log);
    a.write_json(fmt::format("checkpoints/velocity_seed{}.json", seed), to_json(r.training.net));
    sw.row({std::to_string(seed), cell(c.n), cell(c.horizon), cell(r.grid.steps()), cell(r.w2),
            cell(r.population_gap.value), cell(r.population_gap.std_error), cell(r.zero_field_gap.value),
            cell(r.zero_field_gap.std_error), cell(r.training.best_epoch)});
  }
}

// ---- end-to-end ------------------------------------------------------------

void run_end_to_end_kind(const ExperimentConfig& c, Artifacts& a) {
  CsvWriter sw(a.path("metrics/summary.csv"),
               {"seed", "m", "n", "horizon", "w2", "heldout_reconstruction", "pretrain_best_epoch", "flow_best_epoch"});
  CsvWriter cw(a.path("metrics/checkpoint_w2.csv"), {"seed", "epoch", "w2"});
  for (std::uint64_t seed : c.seeds) {
    spdlog::info("end-to-end: seed {}", seed);
    const EndToEndResult r = run_end_to_end(end_to_end_settings(c, seed));
    write_pretrain_log(a.path(fmt::format("metrics/pretrain_seed{}.csv", seed)), r.pretrain.log);
    write_training_log(a.path(fmt::format("metrics/training_seed{}.csv", seed)), r.flow.log);
    for (const auto& ck : r.checkpoints) cw.row({std::to_string(seed), cell(ck.epoch), cell(ck.w2)});
    a.write_json(fmt::format("checkpoints/encoder_seed{}.json", seed), to_json(r.pretrain.pair.encoder));
    a.write_json(fmt::format("checkpoints/decoder_seed{}.json", seed), to_json(r.pretrain.pair.decoder));
    a.write_json(fmt::format("checkpoints/velocity_seed{}.json", seed), to_json(r.flow.net));
    sw.row({std::to_string(seed), cell(c.m), cell(c.n), cell(c.horizon), cell(r.w2), cell(r.heldout_reconstruction),
            cell(r.pretrain.best_epoch), cell(r.flow.best_epoch)});
  }
}

// ---- discretization-sweep --------------------------------------------------

void run_discretization(const ExperimentConfig& c, Artifacts& a) {
  OracleField field(*c.target, c.horizon);
  CsvWriter w(a.path("metrics/discretization.csv"), {"seed", "steps", "max_step", "coupling_w2", "exact_w2"});
  CsvWriter sw(a.path("metrics/slopes.csv"), {"seed", "quantity", "slope"});
  for (std::uint64_t seed : c.seeds) {
    const Tensor starts = gaussian_starts(field.dim(), c.eval_samples, derive_seed(seed, "sampling"));
    const auto curve = discretization_error_curve(field, c.horizon, starts, c.step_counts, c.tolerance);
    std::vector<double> steps, coupling, exact;
    for (const auto& p : curve) {
      w.row({std::to_string(seed), cell(p.steps), cell(p.max_step), cell(p.coupling_w2), cell(p.exact_w2)});
      steps.push_back(static_cast<double>(p.steps));
      coupling.push_back(p.coupling_w2);
      exact.push_back(p.exact_w2);
    }
    auto slope = [&](const std::vector<double>& y) {
      try {
        return log_log_slope(steps, y);
      } catch (const ContractError&) {
        return kNaN;
      }
    };
    sw.row({std::to_string(seed), "coupling_w2", cell(slope(coupling))});
    sw.row({std::to_string(seed), "exact_w2", cell(slope(exact))});
  }
}

// ---- sweeps ----------------------------------------------------------------

struct Measurement {
  std::string quantity;
  double metric = 0.0;
  double stderr_ = kNaN;
};

std::vector<Measurement> measure(const ExperimentConfig& c, SweepAxis axis, std::uint64_t seed) {
  switch (c.kind) {
    case ExperimentKind::TrainLatent: {
      const LatentRunResult r = run_latent_flow(latent_settings(c, seed));
      return {{"population_gap", r.population_gap.value, r.population_gap.std_error}, {"w2", r.w2, kNaN}};
    }
    case ExperimentKind::EndToEnd: {
      const EndToEndResult r = run_end_to_end(end_to_end_settings(c, seed));
      return {{"w2", r.w2, kNaN}, {"heldout_reconstruction", r.heldout_reconstruction, kNaN}};
    }
    case ExperimentKind::DiscretizationSweep: {
      if (axis == SweepAxis::Horizon)
        return {{"early_stopping_w2", early_stopping_w2(*c.target, c.horizon, c.eval_samples, seed, c.tolerance), kNaN}};
      OracleField field(*c.target, c.horizon);
      const Tensor starts = gaussian_starts(field.dim(), c.eval_samples, derive_seed(seed, "sampling"));
      const auto p = discretization_error_curve(field, c.horizon, starts, c.step_counts, c.tolerance).front();
      return {{"coupling_w2", p.coupling_w2, kNaN}, {"exact_w2", p.exact_w2, kNaN}};
    }
    default:
      throw ConfigError(fmt::format("kind: {} cannot be swept", to_string(c.kind)));
  }
}

std::size_t integral_value(double v, SweepAxis axis) {
  if (!(v >= 1.0 && v == std::floor(v) && v < 1e15))
    throw ConfigError(fmt::format("values: {} is not a positive integer, as axis {} requires", v, to_string(axis)));
  return static_cast<std::size_t>(v);
}

ExperimentConfig apply_axis(ExperimentConfig c, SweepAxis axis, double v) {
  switch (axis) {
    case SweepAxis::N:
      c.n = integral_value(v, axis);
      break;
    case SweepAxis::M:
      c.m = integral_value(v, axis);
      break;
    case SweepAxis::Horizon:
      c.horizon = v;
      break;
    case SweepAxis::Steps:
      c.steps = integral_value(v, axis);
      c.step_counts = {c.steps};
      break;
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(fmt::format("values: {} = {} gives an invalid config ({})", to_string(axis), v, e.what()));
  }
  return c;
}

RunOutcome finish_run(Artifacts& a, const json& manifest, const std::exception* failure) {
  RunOutcome out;
  if (failure) {
    out.exit_code = kExitRuntimeFailure;
    out.partial = true;
    out.error = failure->what();
    spdlog::error("run failed: {}", out.error);
  }
  out.manifest = write_manifest(a, manifest, out.error);
  return out;
}

RunOutcome sweep_into(const ExperimentConfig& base, SweepAxis axis, const std::vector<double>& values,
                      const fs::path& out, json manifest) {
  if (!axis_allowed(base.kind, axis))
    throw ConfigError(fmt::format("axis: {} is not valid for kind {}", to_string(axis), to_string(base.kind)));
  if (values.size() < 2) throw ConfigError("values: at least two values are required");
  std::vector<ExperimentConfig> configs;
  for (double v : values) configs.push_back(apply_axis(base, axis, v));

  manifest["noise_qualified"] = base.seeds.size() >= 2;
  manifest["sweep"] = {{"base", to_string(base.kind)}, {"axis", to_string(axis)}, {"values", values}};
  fs::create_directories(out);
  Artifacts a(out);
  try {
    struct Row {
      double value;
      std::uint64_t seed;
      Measurement m;
    };
    std::vector<Row> rows;
    for (std::size_t k = 0; k < values.size(); ++k)
      for (std::uint64_t seed : base.seeds) {
        spdlog::info("sweep: {} = {}, seed {}", to_string(axis), values[k], seed);
        for (auto& m : measure(configs[k], axis, seed)) rows.push_back({values[k], seed, m});
      }
    // Log-log slope of the seed means, per quantity.
    std::vector<std::string> quantities;
    for (const auto& r : rows)
      if (std::find(quantities.begin(), quantities.end(), r.m.quantity) == quantities.end())
        quantities.push_back(r.m.quantity);
    std::vector<std::pair<std::string, double>> slopes;
    for (const auto& q : quantities) {
      std::vector<double> xs, ys;
      for (double v : values) {
        double sum = 0.0;
        std::size_t cnt = 0;
        for (const auto& r : rows)
          if (r.value == v && r.m.quantity == q) {
            sum += r.m.metric;
            ++cnt;
          }
        xs.push_back(axis == SweepAxis::Horizon ? 1.0 - v : v);
        ys.push_back(sum / static_cast<double>(cnt));
      }
      double slope = kNaN;
      try {
        slope = log_log_slope(xs, ys);
      } catch (const ContractError&) {
      }
      slopes.emplace_back(q, slope);
    }
    CsvWriter w(a.path("metrics/sweep.csv"), {"axis", "value", "seed", "quantity", "metric", "stderr", "slope"});
    for (const auto& r : rows) {
      double slope = kNaN;
      for (const auto& [q, s] : slopes)
        if (q == r.m.quantity) slope = s;
      w.row({to_string(axis), cell(r.value), std::to_string(r.seed), r.m.quantity, cell(r.m.metric), cell(r.m.stderr_),
             cell(slope)});
    }
  } catch (const std::exception& e) {
    // Divergence, non-convergence or I/O failure: keep what was written and flag it.
    return finish_run(a, manifest, &e);
  }
  return finish_run(a, manifest, nullptr);
}

json base_manifest(const ExperimentConfig& cfg, const fs::path& out) {
  ExperimentConfig resolved = cfg;
  resolved.output_dir = out.string();
  return {{"kind", to_string(cfg.kind)}, {"config", to_json(resolved)}, {"noise_qualified", cfg.seeds.size() >= 2}};
}

}  // namespace

RunOutcome run_experiment(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  if (cfg.kind == ExperimentKind::RateSweep) {
    ExperimentConfig base = cfg;
    base.kind = cfg.sweep->base;
    base.sweep.reset();
    return sweep_into(base, cfg.sweep->axis, cfg.sweep->values, out, base_manifest(cfg, out));
  }
  fs::create_directories(out);
  Artifacts a(out);
  const json manifest = base_manifest(cfg, out);
  try {
    switch (cfg.kind) {
      case ExperimentKind::Construct:
        run_construct(cfg, a);
        break;
      case ExperimentKind::OracleCheck:
        run_oracle_check(cfg, a);
        break;
      case ExperimentKind::TrainLatent:
        run_train_latent(cfg, a);
        break;
      case ExperimentKind::EndToEnd:
        run_end_to_end_kind(cfg, a);
        break;
      case ExperimentKind::DiscretizationSweep:
        run_discretization(cfg, a);
        break;
      case ExperimentKind::RateSweep:
        break;
    }
  } catch (const std::exception& e) {
    // Divergence, non-convergence or I/O failure: keep what was written and flag it.
    return finish_run(a, manifest, &e);
  }
  return finish_run(a, manifest, nullptr);
}

RunOutcome run_sweep(const ExperimentConfig& cfg, SweepAxis axis, const std::vector<double>& values, const fs::path& out) {
  cfg.validate();
  ExperimentConfig base = cfg;
  if (cfg.kind == ExperimentKind::RateSweep) {
    base.kind = cfg.sweep->base;
    base.sweep.reset();
  }
  json manifest = base_manifest(cfg, out);
  return sweep_into(base, axis, values, out, manifest);
}

std::vector<std::string> verify_manifest(const fs::path& dir) {
  std::vector<std::string> problems;
  const fs::path mp = dir / "manifest.json";
  if (!fs::exists(mp)) return {"manifest.json is missing"};
  json m;
  try {
    m = json::parse(read_file(mp));
  } catch (const std::exception& e) {
    return {fmt::format("manifest.json does not parse: {}", e.what())};
  }
  for (const char* key : {"library", "config", "status", "artifacts", "noise_qualified"})
    if (!m.contains(key)) problems.push_back(fmt::format("manifest.json lacks \"{}\"", key));
  if (!m.contains("artifacts")) return problems;
  for (const auto& item : m.at("artifacts")) {
    const std::string rel = item.at("path").get<std::string>();
    const fs::path p = dir / rel;
    if (!fs::exists(p)) {
      problems.push_back(fmt::format("{} is listed but missing", rel));
      continue;
    }
    if (git_blob_sha1(read_file(p)) != item.at("sha1").get<std::string>())
      problems.push_back(fmt::format("{} does not match its recorded hash", rel));
  }
  return problems;
}

}  // namespace lfm
