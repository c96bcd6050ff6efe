#include "mim/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "mim/errors.hpp"
#include "mim/kernels.hpp"

namespace mim {

namespace {

std::string layer_name(std::size_t layer, std::string_view leaf) {
  return "h" + std::to_string(layer) + "." + std::string(leaf);
}

struct Slot {
  std::string name;
  Shape shape;
};

std::vector<Slot> parameter_layout(const ModelConfig& c) {
  const std::size_t d = c.d_model, kvw = c.kv_width(), ff = c.d_ff();
  std::vector<Slot> out;
  out.push_back({"tok_emb", {c.vocab_size, d}});
  out.push_back({"pos_emb", {c.context_len, d}});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    out.push_back({layer_name(l, "ln1.gain"), {d}});
    out.push_back({layer_name(l, "ln1.bias"), {d}});
    out.push_back({layer_name(l, "attn.wq"), {d, c.n_heads * c.d_head}});
    out.push_back({layer_name(l, "attn.wk"), {d, kvw}});
    out.push_back({layer_name(l, "attn.wv"), {d, kvw}});
    out.push_back({layer_name(l, "attn.wo"), {c.n_heads * c.d_head, d}});
    out.push_back({layer_name(l, "ln2.gain"), {d}});
    out.push_back({layer_name(l, "ln2.bias"), {d}});
    out.push_back({layer_name(l, "mlp.w1"), {d, ff}});
    out.push_back({layer_name(l, "mlp.b1"), {ff}});
    out.push_back({layer_name(l, "mlp.w2"), {ff, d}});
    out.push_back({layer_name(l, "mlp.b2"), {d}});
  }
  out.push_back({"ln_f.gain", {d}});
  out.push_back({"ln_f.bias", {d}});
  return out;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

const char* fusion_name(FusionPoint f) { return f == FusionPoint::kResidual ? "residual" : "attention_output"; }

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("model." + field + ": " + why);
  };
  if (n_layers == 0) fail("n_layers", "must be positive");
  if (n_heads == 0) fail("n_heads", "must be positive");
  if (d_model == 0) fail("d_model", "must be positive");
  if (d_head == 0) fail("d_head", "must be positive");
  if (n_heads * d_head != d_model) fail("d_head", "n_heads * d_head must equal d_model");
  if (context_len < 4) fail("context_len", "must be at least 4");
  if (vocab_size < 2) fail("vocab_size", "must be at least 2");
  if (mlp_ratio == 0) fail("mlp_ratio", "must be positive");
  if (!std::isfinite(lambda) || lambda < 0.0) fail("lambda", "must be a finite non-negative number");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},       {"n_heads", c.n_heads},
                     {"d_model", c.d_model},         {"d_head", c.d_head},
                     {"context_len", c.context_len}, {"vocab_size", c.vocab_size},
                     {"mlp_ratio", c.mlp_ratio},     {"lambda", c.lambda},
                     {"mqa", c.mqa},                 {"fusion", fusion_name(c.fusion)}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_model = j.value("d_model", d.d_model);
  c.d_head = j.value("d_head", c.d_model / std::max<std::size_t>(c.n_heads, 1));
  c.context_len = j.value("context_len", d.context_len);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.lambda = j.value("lambda", d.lambda);
  c.mqa = j.value("mqa", d.mqa);
  const std::string fusion = j.value("fusion", std::string("attention_output"));
  if (fusion == "attention_output") {
    c.fusion = FusionPoint::kAttentionOutput;
  } else if (fusion == "residual") {
    c.fusion = FusionPoint::kResidual;
  } else {
    throw ConfigError("model.fusion: unknown value '" + fusion + "'");
  }
}

template <typename T>
std::size_t Parameters<T>::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return i;
  }
  throw IndexError("no parameter named '" + std::string(name) + "'");
}

template <typename T>
std::size_t Parameters<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, kvw = c.kv_width(), ff = c.d_ff(), qw = c.n_heads * c.d_head;
  const std::size_t per_layer = 4 * d + d * qw + 2 * d * kvw + qw * d + d * ff + ff + ff * d + d;
  return c.vocab_size * d + c.context_len * d + c.n_layers * per_layer + 2 * d;
}

bool decays(std::string_view name) { return !ends_with(name, "gain") && !ends_with(name, "bias") &&
                                            !ends_with(name, ".b1") && !ends_with(name, ".b2"); }

template <typename T>
Parameters<T> init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Parameters<T> p;
  p.config = config;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  for (auto& slot : parameter_layout(config)) {
    Tensor<T> t(slot.shape);
    if (ends_with(slot.name, "gain")) {
      t.fill(T{1});
    } else if (decays(slot.name)) {
      const double scale = ends_with(slot.name, "attn.wo") || ends_with(slot.name, "mlp.w2") ? residual_scale : 1.0;
      for (auto& v : t.values()) v = static_cast<T>(normal(rng) * scale);
    }
    p.names.push_back(std::move(slot.name));
    p.tensors.push_back(std::move(t));
  }
  return p;
}

template <typename T>
BoundParameters<T> bind_parameters(Graph<T>& g, const Parameters<T>& params) {
  BoundParameters<T> b;
  b.source = &params;
  b.vars.reserve(params.tensors.size());
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    b.vars.push_back(g.parameter(params.names[i], params.tensors[i]));
  }
  return b;
}

namespace {

template <typename T>
struct StreamState {
  StreamTokens tokens;
  Var x;
};

// Shared body of the single and fused passes. Each stream runs the same layer
// stack; with two streams the attention outputs (or post-attention residuals)
// are mixed at every layer.
template <typename T>
std::vector<Var> build_streams(Graph<T>& g, const BoundParameters<T>& p, const std::vector<StreamTokens>& streams,
                               T lambda, FusedActivations<T>* acts) {
  const ModelConfig& c = p.source->config;
  std::vector<StreamState<T>> s;
  for (const auto& tok : streams) {
    if (tok.rows == 0 || tok.length == 0 || tok.ids.size() != tok.rows * tok.length) {
      throw ShapeError("stream tokens: " + std::to_string(tok.ids.size()) + " ids for " + std::to_string(tok.rows) +
                       "x" + std::to_string(tok.length));
    }
    if (tok.length > c.context_len) {
      throw LengthError("stream length " + std::to_string(tok.length) + " exceeds context " +
                        std::to_string(c.context_len));
    }
    std::vector<std::int32_t> ids(tok.ids.begin(), tok.ids.end());
    std::vector<std::int32_t> pos(ids.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int32_t>(i % tok.length);
    Var x = ops::add(g, ops::embedding(g, p["tok_emb"], ids), ops::embedding(g, p["pos_emb"], pos));
    s.push_back({tok, x});
  }
  const bool fused = s.size() == 2;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    std::vector<Var> attn(s.size());
    for (std::size_t k = 0; k < s.size(); ++k) {
      Var h = ops::layer_norm(g, s[k].x, p[layer_name(l, "ln1.gain")], p[layer_name(l, "ln1.bias")]);
      Var q = ops::matmul(g, h, p[layer_name(l, "attn.wq")]);
      Var kk = ops::matmul(g, h, p[layer_name(l, "attn.wk")]);
      Var v = ops::matmul(g, h, p[layer_name(l, "attn.wv")]);
      const ops::AttentionDims dims{s[k].tokens.rows, s[k].tokens.length, c.n_heads, c.kv_heads(), c.d_head};
      Var a = ops::causal_attention(g, q, kk, v, dims);
      attn[k] = ops::matmul(g, a, p[layer_name(l, "attn.wo")]);
    }
    if (fused && c.fusion == FusionPoint::kAttentionOutput) {
      Var f0 = ops::fuse(g, attn[0], attn[1], lambda);
      Var f1 = ops::fuse(g, attn[1], attn[0], lambda);
      if (acts) {
        acts->fwd_attention.push_back(g.value(attn[0]));
        acts->bwd_attention.push_back(g.value(attn[1]));
        acts->fwd_fused.push_back(g.value(f0));
        acts->bwd_fused.push_back(g.value(f1));
      }
      attn = {f0, f1};
    }
    for (std::size_t k = 0; k < s.size(); ++k) s[k].x = ops::add(g, s[k].x, attn[k]);
    if (fused && c.fusion == FusionPoint::kResidual) {
      Var f0 = ops::fuse(g, s[0].x, s[1].x, lambda);
      Var f1 = ops::fuse(g, s[1].x, s[0].x, lambda);
      if (acts) {
        acts->fwd_attention.push_back(g.value(s[0].x));
        acts->bwd_attention.push_back(g.value(s[1].x));
        acts->fwd_fused.push_back(g.value(f0));
        acts->bwd_fused.push_back(g.value(f1));
      }
      s[0].x = f0;
      s[1].x = f1;
    }
    for (auto& st : s) {
      Var h = ops::layer_norm(g, st.x, p[layer_name(l, "ln2.gain")], p[layer_name(l, "ln2.bias")]);
      Var u = ops::add_bias(g, ops::matmul(g, h, p[layer_name(l, "mlp.w1")]), p[layer_name(l, "mlp.b1")]);
      Var m = ops::add_bias(g, ops::matmul(g, ops::gelu(g, u), p[layer_name(l, "mlp.w2")]), p[layer_name(l, "mlp.b2")]);
      st.x = ops::add(g, st.x, m);
    }
  }
  std::vector<Var> logits;
  for (auto& st : s) {
    Var h = ops::layer_norm(g, st.x, p["ln_f.gain"], p["ln_f.bias"]);
    logits.push_back(ops::matmul_nt(g, h, p["tok_emb"]));
  }
  return logits;
}

}  // namespace

template <typename T>
Var stream_logits(Graph<T>& g, const BoundParameters<T>& p, const StreamTokens& tokens) {
  return build_streams<T>(g, p, {tokens}, T{0}, nullptr)[0];
}

template <typename T>
std::pair<Var, Var> fused_stream_logits(Graph<T>& g, const BoundParameters<T>& p, const StreamTokens& first,
                                        const StreamTokens& second, T lambda) {
  if (first.rows != second.rows || first.length != second.length) {
    throw AlignmentError("fused streams must have the same geometry");
  }
  auto out = build_streams<T>(g, p, {first, second}, lambda, nullptr);
  return {out[0], out[1]};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> fused_forward(const Parameters<T>& params, std::span<const TokenId> fwd_tokens,
                                              std::span<const TokenId> bwd_tokens, T lambda,
                                              FusedActivations<T>* activations) {
  if (fwd_tokens.size() != bwd_tokens.size()) {
    throw AlignmentError("fused_forward: stream lengths " + std::to_string(fwd_tokens.size()) + " and " +
                         std::to_string(bwd_tokens.size()) + " differ");
  }
  Graph<T> g(false);
  auto bound = bind_parameters(g, params);
  const StreamTokens a{fwd_tokens, 1, fwd_tokens.size()};
  const StreamTokens b{bwd_tokens, 1, bwd_tokens.size()};
  auto out = build_streams<T>(g, bound, {a, b}, lambda, activations);
  return {g.value(out[0]), g.value(out[1])};
}

// ---------------------------------------------------------------------------

template <typename T>
AttentionCache<T>::AttentionCache(const ModelConfig& config)
    : layers_(config.n_layers), width_(config.kv_width()), capacity_(config.context_len) {
  keys_.assign(layers_, std::vector<T>(capacity_ * width_));
  values_.assign(layers_, std::vector<T>(capacity_ * width_));
}

template <typename T>
void AttentionCache<T>::truncate(std::size_t length) {
  if (length > length_) throw ContractError("cannot truncate a cache of " + std::to_string(length_) + " to " +
                                            std::to_string(length));
  length_ = length;
}

template <typename T>
void AttentionCache<T>::advance(std::size_t n) {
  if (length_ + n > capacity_) throw LengthError("attention cache overflow");
  length_ += n;
}

template <typename T>
Tensor<T> forward_pass(const Parameters<T>& params, std::span<const TokenId> tokens, AttentionCache<T>* cache) {
  const ModelConfig& c = params.config;
  const std::size_t n = tokens.size();
  if (n == 0) throw ShapeError("forward_pass: no tokens");
  const std::size_t past = cache ? cache->length() : 0;
  if (past + n > c.context_len) {
    throw LengthError("sequence of " + std::to_string(past + n) + " tokens exceeds context " +
                      std::to_string(c.context_len));
  }
  const std::size_t d = c.d_model, kvw = c.kv_width(), ff = c.d_ff(), total = past + n;
  const auto& emb = params["tok_emb"];
  const auto& pos = params["pos_emb"];
  std::vector<T> x(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const TokenId id = tokens[i];
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
      throw IndexError("forward_pass: token id " + std::to_string(id) + " outside the vocabulary");
    }
    for (std::size_t j = 0; j < d; ++j) {
      x[i * d + j] = emb.at(static_cast<std::size_t>(id), j) + pos.at(past + i, j);
    }
  }

  std::vector<T> h(n * d), mean(n), rstd(n), q(n * d), a(n * d), o(n * d), u(n * ff), gu(n * ff), m(n * d);
  // Without a cache the keys and values live in local buffers.
  std::vector<T> local_k, local_v;
  if (!cache) {
    local_k.resize(total * kvw);
    local_v.resize(total * kvw);
  }
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    std::span<T> keys = cache ? cache->keys(l).first(total * kvw) : std::span<T>(local_k);
    std::span<T> values = cache ? cache->values(l).first(total * kvw) : std::span<T>(local_v);
    kernels::layer_norm_forward<T>(x, params[layer_name(l, "ln1.gain")].span(),
                                   params[layer_name(l, "ln1.bias")].span(), h, mean, rstd, n, d);
    kernels::matmul<T>(h, params[layer_name(l, "attn.wq")].span(), q, n, d, d);
    kernels::matmul<T>(h, params[layer_name(l, "attn.wk")].span(), keys.subspan(past * kvw), n, d, kvw);
    kernels::matmul<T>(h, params[layer_name(l, "attn.wv")].span(), values.subspan(past * kvw), n, d, kvw);
    const kernels::AttentionShape shape{n, total, c.n_heads, c.kv_heads(), c.d_head};
    kernels::attention_forward<T>(q, keys, values, a, {}, shape);
    kernels::matmul<T>(a, params[layer_name(l, "attn.wo")].span(), o, n, d, d);
    for (std::size_t i = 0; i < n * d; ++i) x[i] += o[i];

    kernels::layer_norm_forward<T>(x, params[layer_name(l, "ln2.gain")].span(),
                                   params[layer_name(l, "ln2.bias")].span(), h, mean, rstd, n, d);
    kernels::matmul<T>(h, params[layer_name(l, "mlp.w1")].span(), u, n, d, ff);
    const auto& b1 = params[layer_name(l, "mlp.b1")];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < ff; ++j) u[i * ff + j] += b1[j];
    }
    kernels::gelu_forward<T>(u, gu);
    kernels::matmul<T>(gu, params[layer_name(l, "mlp.w2")].span(), m, n, ff, d);
    const auto& b2 = params[layer_name(l, "mlp.b2")];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) x[i * d + j] += m[i * d + j] + b2[j];
    }
  }
  kernels::layer_norm_forward<T>(x, params["ln_f.gain"].span(), params["ln_f.bias"].span(), h, mean, rstd, n, d);
  Tensor<T> logits({n, c.vocab_size});
  kernels::matmul_nt<T>(h, emb.span(), logits.span(), n, d, c.vocab_size);
  if (cache) cache->advance(n);
  return logits;
}

#define MIM_INSTANTIATE_MODEL(T)                                                                                  \
  template struct Parameters<T>;                                                                                \
  template Parameters<T> init_parameters<T>(const ModelConfig&, std::uint64_t);                                 \
  template BoundParameters<T> bind_parameters<T>(Graph<T>&, const Parameters<T>&);                              \
  template Var stream_logits<T>(Graph<T>&, const BoundParameters<T>&, const StreamTokens&);                     \
  template std::pair<Var, Var> fused_stream_logits<T>(Graph<T>&, const BoundParameters<T>&, const StreamTokens&, \
                                                      const StreamTokens&, T);                                  \
  template std::pair<Tensor<T>, Tensor<T>> fused_forward<T>(const Parameters<T>&, std::span<const TokenId>,     \
                                                            std::span<const TokenId>, T, FusedActivations<T>*); \
  template class AttentionCache<T>;                                                                             \
  template Tensor<T> forward_pass<T>(const Parameters<T>&, std::span<const TokenId>, AttentionCache<T>*);

MIM_INSTANTIATE_MODEL(float)
MIM_INSTANTIATE_MODEL(double)

#undef MIM_INSTANTIATE_MODEL

}  // namespace mim
