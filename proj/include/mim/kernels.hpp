#pragma once

#include <cstddef>
#include <span>

// Dense kernels used by both the autograd graph and the cached inference path.
//
// Every kernel exists twice: `mim::kernels::reference` is a plain serial
// implementation kept as the ground truth for tests, and `mim::kernels` is the
// OpenMP version used everywhere else. Parallel kernels partition work by
// output rows only, so results do not depend on the thread count.
//
// All matrices are row-major. Functions taking `accumulate` add into the output
// instead of overwriting it.

namespace mim::kernels {

// c[m x n] (+)= a[m x k] * b[k x n]
template <typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate = false);

// c[m x n] (+)= a[m x k] * b[n x k]^T
template <typename T>
void matmul_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate = false);

// c[k x n] (+)= a[m x k]^T * b[m x n]
template <typename T>
void matmul_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate = false);

// Row-wise softmax with max subtraction.
template <typename T>
void softmax_rows(std::span<const T> x, std::span<T> y, std::size_t rows, std::size_t cols);

inline constexpr double kLayerNormEps = 1e-5;

// y = (x - mean) * rstd * gain + bias per row. mean/rstd are saved for backward.
template <typename T>
void layer_norm_forward(std::span<const T> x, std::span<const T> gain, std::span<const T> bias, std::span<T> y,
                        std::span<T> mean, std::span<T> rstd, std::size_t rows, std::size_t cols);

// Accumulates into dx, dgain, dbias.
template <typename T>
void layer_norm_backward(std::span<const T> x, std::span<const T> gain, std::span<const T> mean,
                         std::span<const T> rstd, std::span<const T> dy, std::span<T> dx, std::span<T> dgain,
                         std::span<T> dbias, std::size_t rows, std::size_t cols);

// tanh-approximated GELU.
template <typename T>
void gelu_forward(std::span<const T> x, std::span<T> y);

template <typename T>
void gelu_backward(std::span<const T> x, std::span<const T> dy, std::span<T> dx);

// Geometry of one causal attention call over a single sequence.
//
// Queries are the last `n_q` positions of a sequence of `n_kv` positions, so
// query i sits at absolute position n_kv - n_q + i and attends keys 0..that
// position. `kv_heads` is 1 for multi-query attention or `heads` for MHA.
struct AttentionShape {
  std::size_t n_q = 0;
  std::size_t n_kv = 0;
  std::size_t heads = 1;
  std::size_t kv_heads = 1;
  std::size_t head_dim = 1;
};

// q[n_q x heads*head_dim], k/v[n_kv x kv_heads*head_dim] -> out[n_q x heads*head_dim].
// When `probs` is non-empty it receives attention weights laid out
// [heads][n_q][n_kv] (entries beyond the causal limit are zero).
template <typename T>
void attention_forward(std::span<const T> q, std::span<const T> k, std::span<const T> v, std::span<T> out,
                       std::span<T> probs, const AttentionShape& shape);

// Accumulates into dq, dk, dv using the probabilities saved by forward.
template <typename T>
void attention_backward(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                        std::span<const T> probs, std::span<const T> dout, std::span<T> dq, std::span<T> dk,
                        std::span<T> dv, const AttentionShape& shape);

namespace reference {

template <typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate = false);
template <typename T>
void matmul_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate = false);
template <typename T>
void matmul_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate = false);
template <typename T>
void softmax_rows(std::span<const T> x, std::span<T> y, std::size_t rows, std::size_t cols);
template <typename T>
void layer_norm_forward(std::span<const T> x, std::span<const T> gain, std::span<const T> bias, std::span<T> y,
                        std::span<T> mean, std::span<T> rstd, std::size_t rows, std::size_t cols);
template <typename T>
void attention_forward(std::span<const T> q, std::span<const T> k, std::span<const T> v, std::span<T> out,
                       std::span<T> probs, const AttentionShape& shape);
template <typename T>
void attention_backward(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                        std::span<const T> probs, std::span<const T> dout, std::span<T> dq, std::span<T> dk,
                        std::span<T> dv, const AttentionShape& shape);

}  // namespace reference

// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace mim::kernels
