#include "lfm/transformer.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace lfm {

void TransformerSpec::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ContractError(fmt::format("transformer spec: {} must be at least 1", name));
  };
  positive(input_dim, "input_dim");
  positive(output_dim, "output_dim");
  positive(tokens, "tokens");
  positive(patch_dim, "patch_dim");
  positive(heads, "heads");
  positive(key_dim, "key_dim");
  positive(value_dim, "value_dim");
  positive(ff_dim, "ff_dim");
  if (input_dim > patch_dim * tokens || input_dim + patch_dim <= patch_dim * tokens) {
    throw ContractError(fmt::format("transformer spec: input_dim {} does not fill {} tokens of patch_dim {}",
                                    input_dim, tokens, patch_dim));
  }
  if (!(output_bound > 0.0) || !std::isfinite(output_bound)) {
    throw ContractError("transformer spec: output_bound must be positive and finite");
  }
  if (!(lipschitz_budget >= 0.0) || !std::isfinite(lipschitz_budget)) {
    throw ContractError("transformer spec: lipschitz_budget must be nonnegative and finite");
  }
}

void default_layout(std::size_t input_dim, std::size_t& patch_dim, std::size_t& tokens) {
  tokens = input_dim <= 9 ? 1 : 2;
  patch_dim = (input_dim + tokens - 1) / tokens;
}

namespace {

NetParams<Tensor> zero_params(const TransformerSpec& s) {
  const std::size_t dm = s.model_dim();
  NetParams<Tensor> p;
  p.embed_weight = Tensor::zeros({dm, s.embed_dim()});
  p.embed_bias = Tensor::zeros({dm});
  p.layers.resize(s.layers);
  for (auto& layer : p.layers) {
    layer.heads.resize(s.heads);
    for (auto& h : layer.heads) {
      h.query = Tensor::zeros({s.key_dim, dm});
      h.key = Tensor::zeros({s.key_dim, dm});
      h.value = Tensor::zeros({s.value_dim, dm});
      h.output = Tensor::zeros({dm, s.value_dim});
    }
    layer.w1 = Tensor::zeros({s.ff_dim, dm});
    layer.b1 = Tensor::zeros({s.ff_dim});
    layer.w2 = Tensor::zeros({dm, s.ff_dim});
    layer.b2 = Tensor::zeros({dm});
  }
  p.readout_weight = Tensor::zeros({s.output_dim, dm});
  p.readout_bias = Tensor::zeros({s.output_dim});
  return p;
}

}  // namespace

TransformerNet make_zero_net(const TransformerSpec& spec) {
  spec.validate();
  return TransformerNet{spec, zero_params(spec)};
}

TransformerNet make_random_net(const TransformerSpec& spec, std::mt19937_64& rng) {
  TransformerNet net = make_zero_net(spec);
  auto fill = [&rng](Tensor& t, std::size_t fan_in) {
    const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-a, a);
    for (auto& v : t.mutable_data()) v = u(rng);
  };
  auto& w = net.weights;
  fill(w.embed_weight, spec.embed_dim());
  fill(w.embed_bias, spec.embed_dim());
  for (auto& layer : w.layers) {
    for (auto& h : layer.heads) {
      fill(h.query, spec.model_dim());
      fill(h.key, spec.model_dim());
      fill(h.value, spec.model_dim());
      fill(h.output, spec.value_dim);
    }
    fill(layer.w1, spec.model_dim());
    fill(layer.b1, spec.model_dim());
    fill(layer.w2, spec.ff_dim);
    fill(layer.b2, spec.ff_dim);
  }
  fill(w.readout_weight, spec.model_dim());
  fill(w.readout_bias, spec.model_dim());
  return net;
}

BoundNet bind(const TransformerNet& net, Tape& tape, bool trainable) {
  BoundNet out;
  const auto& w = net.weights;
  auto b = [&](const Tensor& t) { return trainable ? tape.leaf(t) : tape.constant(t); };
  out.embed_weight = b(w.embed_weight);
  out.embed_bias = b(w.embed_bias);
  out.layers.resize(w.layers.size());
  for (std::size_t r = 0; r < w.layers.size(); ++r) {
    const auto& src = w.layers[r];
    auto& dst = out.layers[r];
    dst.heads.resize(src.heads.size());
    for (std::size_t s = 0; s < src.heads.size(); ++s) {
      dst.heads[s].query = b(src.heads[s].query);
      dst.heads[s].key = b(src.heads[s].key);
      dst.heads[s].value = b(src.heads[s].value);
      dst.heads[s].output = b(src.heads[s].output);
    }
    dst.w1 = b(src.w1);
    dst.b1 = b(src.b1);
    dst.w2 = b(src.w2);
    dst.b2 = b(src.b2);
  }
  out.readout_weight = b(w.readout_weight);
  out.readout_bias = b(w.readout_bias);
  return out;
}

Var embed_input(const Var& patches, const Var& weight, const Var& bias, std::size_t tokens) {
  const std::size_t cols = patches.value().cols();
  Tensor pos = Tensor::zeros({tokens, cols});
  auto pd = pos.mutable_data();
  for (std::size_t c = 0; c < cols; ++c) pd[(c % tokens) * cols + c] = 1.0;
  Var stacked = concat_rows(patches, patches.tape()->constant(std::move(pos)));
  return add_bias(matmul(weight, stacked), bias);
}

Var attention_layer(const Var& z, const std::vector<HeadParams<Var>>& heads, std::size_t tokens) {
  Var out = z;
  for (const auto& h : heads) {
    Var scores = block_gram(matmul(h.key, z), matmul(h.query, z), tokens);
    Var gate = hadamard(scores, hardmax_cols(scores));
    Var mixed = block_matmul(matmul(h.value, z), gate, tokens);
    out = out + matmul(h.output, mixed);
  }
  return out;
}

Var feedforward_layer(const Var& y, const Var& w1, const Var& b1, const Var& w2, const Var& b2) {
  Var hidden = relu(add_bias(matmul(w1, y), b1));
  return y + add_bias(matmul(w2, hidden), b2);
}

Var forward(const TransformerSpec& spec, const BoundNet& p, const Var& x, ForwardTrace* trace) {
  if (x.value().rows() != spec.input_dim) {
    throw DimensionError(fmt::format("forward: input has {} rows, network expects {}", x.value().rows(),
                                     spec.input_dim));
  }
  const std::size_t l = spec.tokens;
  Var z = embed_input(patchify_cols(x, spec.patch_dim, l), p.embed_weight, p.embed_bias, l);
  if (trace) trace->push_back(z.value());
  for (const auto& layer : p.layers) {
    z = attention_layer(z, layer.heads, l);
    if (trace) trace->push_back(z.value());
    z = feedforward_layer(z, layer.w1, layer.b1, layer.w2, layer.b2);
    if (trace) trace->push_back(z.value());
  }
  Var first = take_columns(z, l, 0);
  Var out = add_bias(matmul(p.readout_weight, first), p.readout_bias);
  return norm_clamp_cols(out, spec.output_bound);
}

Tensor forward(const TransformerNet& net, const Tensor& x, ForwardTrace* trace) {
  Tape tape;
  BoundNet p = bind(net, tape, false);
  Tensor out = forward(net.spec, p, tape.constant(x), trace).value();
  return out;
}

std::vector<double> forward_point(const TransformerNet& net, std::span<const double> x) {
  Tensor in({x.size(), 1}, std::vector<double>(x.begin(), x.end()));
  Tensor out = forward(net, in);
  return {out.data().begin(), out.data().end()};
}

std::size_t count_nonzero_parameters(const TransformerNet& net) {
  std::size_t n = 0;
  net.for_each_parameter([&n](const std::string&, const Tensor& t) { n += count_nonzero(t); });
  return n;
}

double max_weight_norm(const TransformerNet& net) {
  double worst = 0.0;
  net.for_each_parameter([&worst](const std::string&, const Tensor& t) {
    if (t.rank() == 2) worst = std::max(worst, operator_norm(t));
  });
  return worst;
}

std::size_t clip_operator_norms(TransformerNet& net, double threshold) {
  if (threshold <= 0.0) return 0;
  std::size_t clipped = 0;
  net.for_each_parameter([&](const std::string&, Tensor& t) {
    if (t.rank() != 2) return;
    const double norm = operator_norm(t);
    if (norm > threshold) {
      const double f = threshold / norm;
      for (auto& v : t.mutable_data()) v *= f;
      ++clipped;
    }
  });
  return clipped;
}

double parameter_norm(const TransformerNet& net) {
  double s = 0.0;
  net.for_each_parameter([&s](const std::string&, const Tensor& t) { s += sum_squares(t); });
  return std::sqrt(s);
}

nlohmann::json spec_to_json(const TransformerSpec& s) {
  return {{"input_dim", s.input_dim}, {"output_dim", s.output_dim}, {"tokens", s.tokens},
          {"patch_dim", s.patch_dim}, {"layers", s.layers},         {"heads", s.heads},
          {"key_dim", s.key_dim},     {"value_dim", s.value_dim},   {"ff_dim", s.ff_dim},
          {"output_bound", s.output_bound}, {"lipschitz_budget", s.lipschitz_budget},
          {"sparsity_budget", s.sparsity_budget}};
}

TransformerSpec spec_from_json(const nlohmann::json& j) {
  TransformerSpec s;
  auto get = [&j](const char* key, auto& field) {
    if (!j.contains(key)) throw ContractError(fmt::format("transformer spec: missing field '{}'", key));
    j.at(key).get_to(field);
  };
  get("input_dim", s.input_dim);
  get("output_dim", s.output_dim);
  get("tokens", s.tokens);
  get("patch_dim", s.patch_dim);
  get("layers", s.layers);
  get("heads", s.heads);
  get("key_dim", s.key_dim);
  get("value_dim", s.value_dim);
  get("ff_dim", s.ff_dim);
  get("output_bound", s.output_bound);
  get("lipschitz_budget", s.lipschitz_budget);
  if (j.contains("sparsity_budget")) j.at("sparsity_budget").get_to(s.sparsity_budget);
  s.validate();
  return s;
}

nlohmann::json to_json(const TransformerNet& net) {
  nlohmann::json params = nlohmann::json::object();
  net.for_each_parameter([&params](const std::string& name, const Tensor& t) {
    params[name] = std::vector<double>(t.data().begin(), t.data().end());
  });
  return {{"spec", spec_to_json(net.spec)}, {"parameters", params}};
}

TransformerNet net_from_json(const nlohmann::json& j) {
  TransformerNet net = make_zero_net(spec_from_json(j.at("spec")));
  const auto& params = j.at("parameters");
  net.for_each_parameter([&params](const std::string& name, Tensor& t) {
    if (!params.contains(name)) throw ContractError(fmt::format("checkpoint: missing parameter '{}'", name));
    auto values = params.at(name).get<std::vector<double>>();
    t = Tensor(t.shape(), std::move(values));
  });
  return net;
}

TransformerSpec velocity_spec(std::size_t dim, std::size_t layers, std::size_t heads, std::size_t value_dim,
                              std::size_t ff_dim, double output_bound, double lipschitz_budget) {
  TransformerSpec s;
  s.input_dim = dim + 1;
  s.output_dim = dim;
  default_layout(s.input_dim, s.patch_dim, s.tokens);
  s.layers = layers;
  s.heads = heads;
  s.key_dim = 2;
  s.value_dim = value_dim;
  s.ff_dim = ff_dim;
  s.output_bound = output_bound;
  s.lipschitz_budget = lipschitz_budget;
  s.validate();
  return s;
}

Tensor velocity_input(const RescaledVelocityNet& v, const Tensor& points, std::span<const double> times) {
  const std::size_t d = v.dim(), batch = points.cols();
  if (points.rows() != d || times.size() != batch) {
    throw DimensionError(fmt::format("velocity: points {} and {} times do not match dimension {}",
                                     points.shape_string(), times.size(), d));
  }
  const double R = v.radius, T = v.horizon;
  std::vector<double> in((d + 1) * batch);
  auto P = points.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double t = times[b];
    if (!(t >= 0.0 && t <= T * (1.0 + 1e-12))) {
      throw ContractError(fmt::format("velocity: time {} outside [0, {}]", t, T));
    }
    for (std::size_t i = 0; i < d; ++i) in[i * batch + b] = (std::clamp(P[i * batch + b], -R, R) + R) / (2.0 * R);
    in[d * batch + b] = std::min(t / T, 1.0);
  }
  return make_unchecked({d + 1, batch}, std::move(in));
}

Tensor velocity_forward(const RescaledVelocityNet& v, const Tensor& points, std::span<const double> times) {
  return forward(v.inner, velocity_input(v, points, times));
}

Var velocity_forward(const RescaledVelocityNet& v, const BoundNet& params, Tape& tape, const Tensor& points,
                     std::span<const double> times) {
  return forward(v.inner.spec, params, tape.constant(velocity_input(v, points, times)));
}

std::vector<double> velocity_forward(const RescaledVelocityNet& v, std::span<const double> x, double t) {
  Tensor pts({x.size(), 1}, std::vector<double>(x.begin(), x.end()));
  Tensor out = velocity_forward(v, pts, std::span<const double>(&t, 1));
  return {out.data().begin(), out.data().end()};
}

nlohmann::json to_json(const RescaledVelocityNet& v) {
  auto j = to_json(v.inner);
  j["radius"] = v.radius;
  j["horizon"] = v.horizon;
  return j;
}

RescaledVelocityNet velocity_net_from_json(const nlohmann::json& j) {
  RescaledVelocityNet v;
  v.inner = net_from_json(j);
  v.radius = j.at("radius").get<double>();
  v.horizon = j.at("horizon").get<double>();
  return v;
}

}  // namespace lfm
