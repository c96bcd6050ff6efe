#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mim/tensor.hpp"

namespace mim {

// Handle to a node of a Graph.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const noexcept { return id != npos; }
};

template <typename T>
using GradientMap = std::map<std::string, Tensor<T>>;

// Tape of recorded operations for reverse-mode differentiation.
//
// Nodes are appended in evaluation order, which is already a topological
// order, so the backward sweep simply walks the tape from the loss down to the
// first node. A graph is single-threaded; the kernels it calls may use OpenMP
// internally.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  // With `track_gradients == false` parameters are bound as plain inputs and
  // no backward closures are kept; used for evaluation-only passes.
  explicit Graph(bool track_gradients = true) : track_(track_gradients) {}

  Var parameter(std::string name, Tensor<T> value);
  // Differentiable leaf that is not a named parameter (used by gradient checks).
  Var variable(Tensor<T> value);
  // Plain input; never receives a gradient.
  Var input(Tensor<T> value);
  // Explicitly flagged constant (candidate tokens, stop-gradient sides).
  Var constant(Tensor<T> value);
  // Constant copy of an existing node's value.
  Var detach(Var v);

  Var record(Tensor<T> value, const std::vector<Var>& inputs, BackwardFn backward);

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool is_constant(Var v) const { return nodes_.at(v.id).constant; }
  bool tracking() const noexcept { return track_; }

  // Gradient buffer of a node, zero-initialised on first access.
  Tensor<T>& grad(Var v);
  // Gradient of a node after backward(); empty tensor if none flowed into it.
  const Tensor<T>& grad_or_empty(Var v) const { return nodes_.at(v.id).grad; }

  // Runs the backward sweep from a scalar loss. Returns gradients keyed by
  // parameter name for every parameter the loss depends on.
  GradientMap<T> backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  // Number of backward closures executed by the last backward() call.
  std::size_t backward_visits() const noexcept { return visits_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    std::string name;
    bool requires_grad = false;
    bool constant = false;
    bool parameter = false;
  };

  bool track_;
  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

// Differentiable operations. All shapes must match exactly except for the
// row-wise bias broadcast in add_bias.
namespace ops {

template <typename T>
Var matmul(Graph<T>& g, Var a, Var b);
// a[m x k] * b[n x k]^T
template <typename T>
Var matmul_nt(Graph<T>& g, Var a, Var b);
template <typename T>
Var add(Graph<T>& g, Var a, Var b);
template <typename T>
Var add_bias(Graph<T>& g, Var x, Var bias);
template <typename T>
Var scale(Graph<T>& g, Var x, T factor);
// a + lambda * b. With lambda == 0 the result is `a` itself.
template <typename T>
Var fuse(Graph<T>& g, Var a, Var b, T lambda);
template <typename T>
Var layer_norm(Graph<T>& g, Var x, Var gain, Var bias);
template <typename T>
Var gelu(Graph<T>& g, Var x);
template <typename T>
Var softmax_rows(Graph<T>& g, Var x);
// Gathers rows of `table` by id.
template <typename T>
Var embedding(Graph<T>& g, Var table, const std::vector<std::int32_t>& ids);

// Causal self-attention over `batch` independent sequences of `length`
// positions each. q is [batch*length x heads*head_dim]; k and v are
// [batch*length x kv_heads*head_dim].
struct AttentionDims {
  std::size_t batch = 1;
  std::size_t length = 1;
  std::size_t heads = 1;
  std::size_t kv_heads = 1;
  std::size_t head_dim = 1;
};
template <typename T>
Var causal_attention(Graph<T>& g, Var q, Var k, Var v, const AttentionDims& dims);

inline constexpr std::int32_t kIgnoreTarget = -1;

// Mean over rows with target != kIgnoreTarget of -log softmax(logits)[target],
// via log-sum-exp. Returns a [1] tensor.
template <typename T>
Var cross_entropy(Graph<T>& g, Var logits, const std::vector<std::int32_t>& targets);

// Mean over `pairs` (row of a, row of b) of 0.5 * sum_z |softmax(a)_z - softmax(b)_z|.
// The subgradient of |.| at zero is 0. Either side can be excluded from the
// gradient.
struct TvOptions {
  bool stop_grad_a = false;
  bool stop_grad_b = false;
};
template <typename T>
Var tv_mean(Graph<T>& g, Var logits_a, Var logits_b, const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
            TvOptions options = {});

template <typename T>
Var sum(Graph<T>& g, Var x);

// sum_i coeffs[i] * terms[i] over [1] tensors.
template <typename T>
Var linear_combination(Graph<T>& g, const std::vector<Var>& terms, const std::vector<T>& coeffs);

}  // namespace ops

}  // namespace mim
