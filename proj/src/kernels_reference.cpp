#include <cmath>
#include <limits>
#include <vector>

#include "mim/kernels.hpp"

namespace mim::kernels::reference {

template <typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T sum = 0;
      for (std::size_t p = 0; p < k; ++p) sum += a[i * k + p] * b[p * n + j];
      c[i * n + j] = accumulate ? c[i * n + j] + sum : sum;
    }
  }
}

template <typename T>
void matmul_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T sum = 0;
      for (std::size_t p = 0; p < k; ++p) sum += a[i * k + p] * b[j * k + p];
      c[i * n + j] = accumulate ? c[i * n + j] + sum : sum;
    }
  }
}

template <typename T>
void matmul_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate) {
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) {
      T sum = 0;
      for (std::size_t i = 0; i < m; ++i) sum += a[i * k + p] * b[i * n + j];
      c[p * n + j] = accumulate ? c[p * n + j] + sum : sum;
    }
  }
}

template <typename T>
void softmax_rows(std::span<const T> x, std::span<T> y, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    T mx = x[r * cols];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[r * cols + j]);
    T sum = 0;
    for (std::size_t j = 0; j < cols; ++j) sum += std::exp(x[r * cols + j] - mx);
    for (std::size_t j = 0; j < cols; ++j) y[r * cols + j] = std::exp(x[r * cols + j] - mx) / sum;
  }
}

template <typename T>
void layer_norm_forward(std::span<const T> x, std::span<const T> gain, std::span<const T> bias, std::span<T> y,
                        std::span<T> mean, std::span<T> rstd, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    T mu = 0;
    for (std::size_t j = 0; j < cols; ++j) mu += x[r * cols + j];
    mu /= static_cast<T>(cols);
    T var = 0;
    for (std::size_t j = 0; j < cols; ++j) var += (x[r * cols + j] - mu) * (x[r * cols + j] - mu);
    var /= static_cast<T>(cols);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    for (std::size_t j = 0; j < cols; ++j) y[r * cols + j] = (x[r * cols + j] - mu) * rs * gain[j] + bias[j];
    mean[r] = mu;
    rstd[r] = rs;
  }
}

template <typename T>
void attention_forward(std::span<const T> q, std::span<const T> k, std::span<const T> v, std::span<T> out,
                       std::span<T> probs, const AttentionShape& s) {
  const std::size_t dh = s.head_dim;
  const std::size_t qw = s.heads * dh;
  const std::size_t kw = s.kv_heads * dh;
  const std::size_t group = s.heads / s.kv_heads;
  const std::size_t offset = s.n_kv - s.n_q;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> w(s.n_kv);
  for (std::size_t h = 0; h < s.heads; ++h) {
    const std::size_t kvh = h / group;
    for (std::size_t i = 0; i < s.n_q; ++i) {
      const std::size_t limit = offset + i + 1;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < limit; ++j) {
        T dot = 0;
        for (std::size_t d = 0; d < dh; ++d) dot += q[i * qw + h * dh + d] * k[j * kw + kvh * dh + d];
        w[j] = dot * scale;
        mx = std::max(mx, w[j]);
      }
      T sum = 0;
      for (std::size_t j = 0; j < limit; ++j) sum += std::exp(w[j] - mx);
      for (std::size_t j = 0; j < limit; ++j) w[j] = std::exp(w[j] - mx) / sum;
      for (std::size_t d = 0; d < dh; ++d) {
        T acc = 0;
        for (std::size_t j = 0; j < limit; ++j) acc += w[j] * v[j * kw + kvh * dh + d];
        out[i * qw + h * dh + d] = acc;
      }
      if (!probs.empty()) {
        for (std::size_t j = 0; j < s.n_kv; ++j) probs[(h * s.n_q + i) * s.n_kv + j] = j < limit ? w[j] : T{0};
      }
    }
  }
}

template <typename T>
void attention_backward(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                        std::span<const T> probs, std::span<const T> dout, std::span<T> dq, std::span<T> dk,
                        std::span<T> dv, const AttentionShape& s) {
  const std::size_t dh = s.head_dim;
  const std::size_t qw = s.heads * dh;
  const std::size_t kw = s.kv_heads * dh;
  const std::size_t group = s.heads / s.kv_heads;
  const std::size_t offset = s.n_kv - s.n_q;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> dp(s.n_kv);
  for (std::size_t h = 0; h < s.heads; ++h) {
    const std::size_t kvh = h / group;
    for (std::size_t i = 0; i < s.n_q; ++i) {
      const std::size_t limit = offset + i + 1;
      const T* p = probs.data() + (h * s.n_q + i) * s.n_kv;
      T weighted = 0;
      for (std::size_t j = 0; j < limit; ++j) {
        T acc = 0;
        for (std::size_t d = 0; d < dh; ++d) acc += dout[i * qw + h * dh + d] * v[j * kw + kvh * dh + d];
        dp[j] = acc;
        weighted += p[j] * acc;
      }
      for (std::size_t j = 0; j < limit; ++j) {
        const T dscore = p[j] * (dp[j] - weighted) * scale;
        for (std::size_t d = 0; d < dh; ++d) {
          dq[i * qw + h * dh + d] += dscore * k[j * kw + kvh * dh + d];
          dk[j * kw + kvh * dh + d] += dscore * q[i * qw + h * dh + d];
          dv[j * kw + kvh * dh + d] += p[j] * dout[i * qw + h * dh + d];
        }
      }
    }
  }
}

#define MIM_INSTANTIATE_REFERENCE(T)                                                                          \
  template void matmul<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t, std::size_t,      \
                          std::size_t, bool);                                                                 \
  template void matmul_nt<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t, std::size_t,   \
                             std::size_t, bool);                                                              \
  template void matmul_tn<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t, std::size_t,   \
                             std::size_t, bool);                                                              \
  template void softmax_rows<T>(std::span<const T>, std::span<T>, std::size_t, std::size_t);                   \
  template void layer_norm_forward<T>(std::span<const T>, std::span<const T>, std::span<const T>, std::span<T>, \
                                      std::span<T>, std::span<T>, std::size_t, std::size_t);                  \
  template void attention_forward<T>(std::span<const T>, std::span<const T>, std::span<const T>, std::span<T>, \
                                     std::span<T>, const AttentionShape&);                                    \
  template void attention_backward<T>(std::span<const T>, std::span<const T>, std::span<const T>,              \
                                      std::span<const T>, std::span<const T>, std::span<T>, std::span<T>,      \
                                      std::span<T>, const AttentionShape&);

MIM_INSTANTIATE_REFERENCE(float)
MIM_INSTANTIATE_REFERENCE(double)

#undef MIM_INSTANTIATE_REFERENCE

}  // namespace mim::kernels::reference
