#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mim/autograd.hpp"
#include "mim/tensor.hpp"
#include "mim/vocab.hpp"

namespace mim {

// Where the opposite stream's hidden state is mixed in at each layer.
enum class FusionPoint {
  kAttentionOutput,  // H_f = H_attn + lambda * H'_attn, before the residual add
  kResidual,         // after the attention residual add
};

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t d_head = 32;
  std::size_t context_len = 256;
  std::size_t vocab_size = vocab::kSize;
  std::size_t mlp_ratio = 4;
  double lambda = 0.0;
  bool mqa = true;
  FusionPoint fusion = FusionPoint::kAttentionOutput;

  std::size_t kv_heads() const noexcept { return mqa ? 1 : n_heads; }
  std::size_t kv_width() const noexcept { return kv_heads() * d_head; }
  std::size_t d_ff() const noexcept { return mlp_ratio * d_model; }
  // Smaller vocabularies are only useful for toy models fed hand-mapped ids.
  bool sentinel_compatible() const noexcept { return vocab_size >= vocab::kSize; }

  // Throws ConfigError naming the offending field.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// One set of weights serving both stream directions. The output projection is
// tied to the token embedding.
template <typename T>
struct Parameters {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;

  std::size_t index_of(std::string_view name) const;
  Tensor<T>& operator[](std::string_view name) { return tensors[index_of(name)]; }
  const Tensor<T>& operator[](std::string_view name) const { return tensors[index_of(name)]; }
  std::size_t scalar_count() const;

  template <typename U>
  Parameters<U> cast() const {
    Parameters<U> out;
    out.config = config;
    out.names = names;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }
};

// Closed-form number of scalars for a configuration.
std::size_t parameter_count(const ModelConfig& config);

// Normal(0, 0.02) weights; residual output projections (attn.wo, mlp.w2) are
// additionally scaled by 1/sqrt(2 * n_layers). Gains are 1, biases 0.
template <typename T>
Parameters<T> init_parameters(const ModelConfig& config, std::uint64_t seed);

// True for tensors that receive weight decay (everything but gains and biases).
bool decays(std::string_view parameter_name);

// ---------------------------------------------------------------------------
// Graph construction

template <typename T>
struct BoundParameters {
  std::vector<Var> vars;
  const Parameters<T>* source = nullptr;
  Var operator[](std::string_view name) const { return vars[source->index_of(name)]; }
};

template <typename T>
BoundParameters<T> bind_parameters(Graph<T>& g, const Parameters<T>& params);

// Token ids for `rows` sequences of `length` positions, row-major.
struct StreamTokens {
  std::span<const TokenId> ids;
  std::size_t rows = 0;
  std::size_t length = 0;
};

// Logits [rows*length x vocab] of one causal stream.
template <typename T>
Var stream_logits(Graph<T>& g, const BoundParameters<T>& p, const StreamTokens& tokens);

// Two streams with matching geometry coupled at every layer by
// H_f = H + lambda * H_other (step t of one stream with step t of the other).
// Returns (first logits, second logits).
template <typename T>
std::pair<Var, Var> fused_stream_logits(Graph<T>& g, const BoundParameters<T>& p, const StreamTokens& first,
                                        const StreamTokens& second, T lambda);

// Per-layer hidden states captured by a fused pass for inspection.
template <typename T>
struct FusedActivations {
  std::vector<Tensor<T>> fwd_attention;
  std::vector<Tensor<T>> bwd_attention;
  std::vector<Tensor<T>> fwd_fused;
  std::vector<Tensor<T>> bwd_fused;
};

// Graph-free fused pass over one pair of streams. Throws AlignmentError when the
// streams have different lengths.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> fused_forward(const Parameters<T>& params, std::span<const TokenId> fwd_tokens,
                                              std::span<const TokenId> bwd_tokens, T lambda,
                                              FusedActivations<T>* activations = nullptr);

// ---------------------------------------------------------------------------
// Incremental inference

// Keys and values of every processed position, one buffer per layer.
template <typename T>
class AttentionCache {
 public:
  explicit AttentionCache(const ModelConfig& config);

  std::size_t length() const noexcept { return length_; }
  std::size_t capacity() const noexcept { return capacity_; }
  void truncate(std::size_t length);
  void clear() { truncate(0); }

  // Floats currently held: n_layers * length * 2 * kv_width.
  std::size_t memory_floats() const noexcept { return layers_ * length_ * 2 * width_; }

  std::span<T> keys(std::size_t layer) { return keys_[layer]; }
  std::span<T> values(std::size_t layer) { return values_[layer]; }
  std::size_t width() const noexcept { return width_; }

  // Advances the length after a forward call wrote `n` new rows.
  void advance(std::size_t n);

 private:
  std::size_t layers_;
  std::size_t width_;
  std::size_t capacity_;
  std::size_t length_ = 0;
  std::vector<std::vector<T>> keys_;
  std::vector<std::vector<T>> values_;
};

// Logits [tokens.size() x vocab] for `tokens` appended after whatever the cache
// already holds. Without a cache the tokens start at position 0. Throws
// LengthError if the total would exceed the context.
template <typename T>
Tensor<T> forward_pass(const Parameters<T>& params, std::span<const TokenId> tokens,
                       AttentionCache<T>* cache = nullptr);

}  // namespace mim
