#include "mim/kernels.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <type_traits>
#include <cmath>
#include <limits>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mim::kernels {

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace {

constexpr std::size_t kRowBlock = 8;
constexpr std::size_t kTileCols = 32;

// c[0..R)[0..kTileCols) += a[0..R)[0..k) * b[0..k)[0..kTileCols), accumulated
// in a local tile the compiler keeps in registers.
template <typename T, std::size_t R>
inline void gemm_tile(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
                      std::size_t k) {
  T acc[R][kTileCols] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const T* br = b + p * ldb;
    for (std::size_t r = 0; r < R; ++r) {
      const T x = a[r * lda + p];
#pragma omp simd
      for (std::size_t j = 0; j < kTileCols; ++j) acc[r][j] += x * br[j];
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
#pragma omp simd
    for (std::size_t j = 0; j < kTileCols; ++j) c[r * ldc + j] += acc[r][j];
  }
}

template <typename T, std::size_t R>
inline void gemm_strip(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
                       std::size_t k, std::size_t n) {
  std::size_t j = 0;
  for (; j + kTileCols <= n; j += kTileCols) gemm_tile<T, R>(a, lda, b + j, ldb, c + j, ldc, k);
  if (j == n) return;
  for (std::size_t r = 0; r < R; ++r) {
    T* cr = c + r * ldc;
    const T* ar = a + r * lda;
    for (std::size_t p = 0; p < k; ++p) {
      const T* br = b + p * ldb;
      const T x = ar[p];
#pragma omp simd
      for (std::size_t jj = j; jj < n; ++jj) cr[jj] += x * br[jj];
    }
  }
}

// c[r][j] += sum_p a[r][p] * b[p][j] for r < rows <= kRowBlock, j < n, with
// explicit row strides.
template <typename T>
inline void gemm_rows(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
                      std::size_t rows, std::size_t k, std::size_t n) {
  std::size_t r = 0;
  if (rows - r >= 8) {
    gemm_strip<T, 8>(a, lda, b, ldb, c, ldc, k, n);
    r += 8;
  }
  if (rows - r >= 4) {
    gemm_strip<T, 4>(a + r * lda, lda, b, ldb, c + r * ldc, ldc, k, n);
    r += 4;
  }
  if (rows - r >= 2) {
    gemm_strip<T, 2>(a + r * lda, lda, b, ldb, c + r * ldc, ldc, k, n);
    r += 2;
  }
  if (rows - r >= 1) gemm_strip<T, 1>(a + r * lda, lda, b, ldb, c + r * ldc, ldc, k, n);
}

// exp for float without a library call so loops using it vectorize.
// Range reduction to 2^k * e^r with |r| <= ln2 / 2, then a degree-6 polynomial.
inline float exp_poly(float x) {
  x = std::max(-87.0f, std::min(x, 88.0f));
  const float k = static_cast<float>(static_cast<std::int32_t>(x * 1.44269504088896341f + 128.5f) - 128);
  const float r = x - k * 0.693359375f + k * 2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  const float e = p * r * r + r + 1.0f;
  return e * std::bit_cast<float>((static_cast<std::int32_t>(k) + 127) << 23);
}

template <typename T>
inline T exp_t(T x) {
  if constexpr (std::is_same_v<T, float>) {
    return exp_poly(x);
  } else {
    return std::exp(x);
  }
}

template <typename T>
inline T tanh_t(T x) {
  if constexpr (std::is_same_v<T, float>) {
    return 1.0f - 2.0f / (1.0f + exp_poly(2.0f * x));
  } else {
    return std::tanh(x);
  }
}

template <typename T>
std::vector<T> transpose(const T* src, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  constexpr std::size_t tile = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += tile) {
    for (std::size_t j0 = 0; j0 < cols; j0 += tile) {
      const std::size_t i1 = std::min(rows, i0 + tile);
      const std::size_t j1 = std::min(cols, j0 + tile);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) out[j * rows + i] = src[i * cols + j];
      }
    }
  }
  return out;
}

template <typename T>
T gelu_scalar(T x) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T u = c * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + tanh_t(u));
}

template <typename T>
T gelu_grad_scalar(T x) {
  constexpr T c = T(0.7978845608028654);
  const T x2 = x * x;
  const T u = c * (x + T(0.044715) * x2 * x);
  const T th = tanh_t(u);
  const T du = c * (T(1) + T(3) * T(0.044715) * x2);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

}  // namespace

template <typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate) {
  const std::ptrdiff_t blocks = static_cast<std::ptrdiff_t>((m + kRowBlock - 1) / kRowBlock);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
    const std::size_t i0 = static_cast<std::size_t>(blk) * kRowBlock;
    const std::size_t rows = std::min(kRowBlock, m - i0);
    if (!accumulate) std::fill_n(c.data() + i0 * n, rows * n, T{0});
    gemm_rows(a.data() + i0 * k, k, b.data(), n, c.data() + i0 * n, n, rows, k, n);
  }
}

template <typename T>
void matmul_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate) {
  const std::vector<T> bt = transpose(b.data(), n, k);
  matmul<T>(a, bt, c, m, k, n, accumulate);
}

template <typename T>
void matmul_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate) {
  const std::vector<T> at = transpose(a.data(), m, k);
  matmul<T>(at, b, c, k, m, n, accumulate);
}

template <typename T>
void softmax_rows(std::span<const T> x, std::span<T> y, std::size_t rows, std::size_t cols) {
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ri = 0; ri < static_cast<std::ptrdiff_t>(rows); ++ri) {
    const std::size_t r = static_cast<std::size_t>(ri);
    const T* xr = x.data() + r * cols;
    T* yr = y.data() + r * cols;
    const T mx = *std::max_element(xr, xr + cols);
    T sum = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < cols; ++j) yr[j] *= inv;
  }
}

template <typename T>
void layer_norm_forward(std::span<const T> x, std::span<const T> gain, std::span<const T> bias, std::span<T> y,
                        std::span<T> mean, std::span<T> rstd, std::size_t rows, std::size_t cols) {
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ri = 0; ri < static_cast<std::ptrdiff_t>(rows); ++ri) {
    const std::size_t r = static_cast<std::size_t>(ri);
    const T* xr = x.data() + r * cols;
    T* yr = y.data() + r * cols;
    T mu = 0;
    for (std::size_t j = 0; j < cols; ++j) mu += xr[j];
    mu /= static_cast<T>(cols);
    T var = 0;
    for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(cols);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    for (std::size_t j = 0; j < cols; ++j) yr[j] = (xr[j] - mu) * rs * gain[j] + bias[j];
    mean[r] = mu;
    rstd[r] = rs;
  }
}

template <typename T>
void layer_norm_backward(std::span<const T> x, std::span<const T> gain, std::span<const T> mean,
                         std::span<const T> rstd, std::span<const T> dy, std::span<T> dx, std::span<T> dgain,
                         std::span<T> dbias, std::size_t rows, std::size_t cols) {
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ri = 0; ri < static_cast<std::ptrdiff_t>(rows); ++ri) {
    const std::size_t r = static_cast<std::size_t>(ri);
    const T* xr = x.data() + r * cols;
    const T* dyr = dy.data() + r * cols;
    T* dxr = dx.data() + r * cols;
    const T mu = mean[r];
    const T rs = rstd[r];
    T sum_g = 0;
    T sum_gx = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      const T g = dyr[j] * gain[j];
      const T xhat = (xr[j] - mu) * rs;
      sum_g += g;
      sum_gx += g * xhat;
    }
    const T inv_n = T(1) / static_cast<T>(cols);
    for (std::size_t j = 0; j < cols; ++j) {
      const T g = dyr[j] * gain[j];
      const T xhat = (xr[j] - mu) * rs;
      dxr[j] += rs * (g - inv_n * sum_g - xhat * inv_n * sum_gx);
    }
  }
  // Column reductions run serially over rows so the summation order is fixed.
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ji = 0; ji < static_cast<std::ptrdiff_t>(cols); ++ji) {
    const std::size_t j = static_cast<std::size_t>(ji);
    T dg = 0;
    T db = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      const T xhat = (x[r * cols + j] - mean[r]) * rstd[r];
      dg += dy[r * cols + j] * xhat;
      db += dy[r * cols + j];
    }
    dgain[j] += dg;
    dbias[j] += db;
  }
}

template <typename T>
void gelu_forward(std::span<const T> x, std::span<T> y) {
#pragma omp parallel for simd schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(x.size()); ++i) y[i] = gelu_scalar(x[i]);
}

template <typename T>
void gelu_backward(std::span<const T> x, std::span<const T> dy, std::span<T> dx) {
#pragma omp parallel for simd schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(x.size()); ++i) {
    dx[i] += dy[i] * gelu_grad_scalar(x[i]);
  }
}

namespace {

// Head `h` of a [rows x heads*dh] matrix as a contiguous [rows x dh] block.
template <typename T>
std::vector<T> gather_head(const T* src, std::size_t rows, std::size_t width, std::size_t h, std::size_t dh) {
  std::vector<T> out(rows * dh);
  for (std::size_t i = 0; i < rows; ++i) std::copy_n(src + i * width + h * dh, dh, out.data() + i * dh);
  return out;
}

}  // namespace

// Queries are processed in blocks of kRowBlock rows per head; scores and the
// weighted values go through the blocked gemm.
template <typename T>
void attention_forward(std::span<const T> q, std::span<const T> k, std::span<const T> v, std::span<T> out,
                       std::span<T> probs, const AttentionShape& s) {
  const std::size_t dh = s.head_dim;
  const std::size_t qw = s.heads * dh;
  const std::size_t kw = s.kv_heads * dh;
  const std::size_t group = s.heads / s.kv_heads;
  const std::size_t offset = s.n_kv - s.n_q;
  const std::size_t nk = s.n_kv;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const std::size_t blocks = (s.n_q + kRowBlock - 1) / kRowBlock;
  const std::ptrdiff_t work = static_cast<std::ptrdiff_t>(s.heads * blocks);

  // Per kv head: K^T [dh x n_kv] and V [n_kv x dh].
  std::vector<std::vector<T>> kt(s.kv_heads), vc(s.kv_heads);
  for (std::size_t h = 0; h < s.kv_heads; ++h) {
    const std::vector<T> kh = gather_head(k.data(), nk, kw, h, dh);
    kt[h] = transpose(kh.data(), nk, dh);
    vc[h] = gather_head(v.data(), nk, kw, h, dh);
  }

#pragma omp parallel
  {
    std::vector<T> qb(kRowBlock * dh), sc(kRowBlock * nk), ob(kRowBlock * dh);
#pragma omp for schedule(static)
    for (std::ptrdiff_t item = 0; item < work; ++item) {
      const std::size_t h = static_cast<std::size_t>(item) / blocks;
      const std::size_t i0 = (static_cast<std::size_t>(item) % blocks) * kRowBlock;
      const std::size_t rows = std::min(kRowBlock, s.n_q - i0);
      const std::size_t kvh = h / group;
      const std::size_t lim = offset + i0 + rows;
      for (std::size_t r = 0; r < rows; ++r) std::copy_n(q.data() + (i0 + r) * qw + h * dh, dh, qb.data() + r * dh);
      std::fill(sc.begin(), sc.end(), T{0});
      gemm_rows(qb.data(), dh, kt[kvh].data(), nk, sc.data(), nk, rows, dh, lim);
      for (std::size_t r = 0; r < rows; ++r) {
        T* row = sc.data() + r * nk;
        const std::size_t limit = offset + i0 + r + 1;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < limit; ++j) {
          row[j] *= scale;
          mx = std::max(mx, row[j]);
        }
        T sum = 0;
#pragma omp simd reduction(+ : sum)
        for (std::size_t j = 0; j < limit; ++j) {
          row[j] = exp_t(row[j] - mx);
          sum += row[j];
        }
        const T inv = T(1) / sum;
#pragma omp simd
        for (std::size_t j = 0; j < limit; ++j) row[j] *= inv;
        std::fill(row + limit, row + nk, T{0});
      }
      std::fill(ob.begin(), ob.end(), T{0});
      gemm_rows(sc.data(), nk, vc[kvh].data(), dh, ob.data(), dh, rows, lim, dh);
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(ob.data() + r * dh, dh, out.data() + (i0 + r) * qw + h * dh);
        if (!probs.empty()) std::copy_n(sc.data() + r * nk, nk, probs.data() + (h * s.n_q + i0 + r) * nk);
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
  const std::size_t nq = s.n_q;
  const std::size_t nk = s.n_kv;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  std::vector<std::vector<T>> kc(s.kv_heads), vt(s.kv_heads), qg(s.heads), dog(s.heads);
  for (std::size_t h = 0; h < s.kv_heads; ++h) {
    kc[h] = gather_head(k.data(), nk, kw, h, dh);
    const std::vector<T> vh = gather_head(v.data(), nk, kw, h, dh);
    vt[h] = transpose(vh.data(), nk, dh);
  }
  for (std::size_t h = 0; h < s.heads; ++h) {
    qg[h] = gather_head(q.data(), nq, qw, h, dh);
    dog[h] = gather_head(dout.data(), nq, qw, h, dh);
  }

  // dS = P * (dP - sum(P * dP)) with dP = dO V^T, then dq = scale * dS K.
  std::vector<T> ds(s.heads * nq * nk, T{0});
  const std::size_t q_blocks = (nq + kRowBlock - 1) / kRowBlock;
#pragma omp parallel
  {
    std::vector<T> dqb(kRowBlock * dh);
#pragma omp for schedule(static)
    for (std::ptrdiff_t item = 0; item < static_cast<std::ptrdiff_t>(s.heads * q_blocks); ++item) {
      const std::size_t h = static_cast<std::size_t>(item) / q_blocks;
      const std::size_t i0 = (static_cast<std::size_t>(item) % q_blocks) * kRowBlock;
      const std::size_t rows = std::min(kRowBlock, nq - i0);
      const std::size_t kvh = h / group;
      const std::size_t lim = offset + i0 + rows;
      T* dsb = ds.data() + (h * nq + i0) * nk;
      gemm_rows(dog[h].data() + i0 * dh, dh, vt[kvh].data(), nk, dsb, nk, rows, dh, lim);
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t limit = offset + i0 + r + 1;
        const T* pr = probs.data() + (h * nq + i0 + r) * nk;
        T* dsr = dsb + r * nk;
        T dot = 0;
#pragma omp simd reduction(+ : dot)
        for (std::size_t j = 0; j < limit; ++j) dot += pr[j] * dsr[j];
#pragma omp simd
        for (std::size_t j = 0; j < limit; ++j) dsr[j] = pr[j] * (dsr[j] - dot);
        std::fill(dsr + limit, dsr + nk, T{0});
      }
      std::fill(dqb.begin(), dqb.end(), T{0});
      gemm_rows(dsb, nk, kc[kvh].data(), dh, dqb.data(), dh, rows, lim, dh);
      for (std::size_t r = 0; r < rows; ++r) {
        T* dqi = dq.data() + (i0 + r) * qw + h * dh;
        for (std::size_t d = 0; d < dh; ++d) dqi[d] += scale * dqb[r * dh + d];
      }
    }
  }

  // dK = scale * sum_h dS_h^T Q_h and dV = sum_h P_h^T dO_h, one key block per
  // iteration so every output row has a single writer.
  std::vector<std::vector<T>> dst(s.heads), pt(s.heads);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t hi = 0; hi < static_cast<std::ptrdiff_t>(s.heads); ++hi) {
    const std::size_t h = static_cast<std::size_t>(hi);
    dst[h] = transpose(ds.data() + h * nq * nk, nq, nk);
    pt[h] = transpose(probs.data() + h * nq * nk, nq, nk);
  }
  const std::size_t k_blocks = (nk + kRowBlock - 1) / kRowBlock;
#pragma omp parallel
  {
    std::vector<T> kb(kRowBlock * dh), vb(kRowBlock * dh);
#pragma omp for schedule(static)
    for (std::ptrdiff_t item = 0; item < static_cast<std::ptrdiff_t>(s.kv_heads * k_blocks); ++item) {
      const std::size_t kvh = static_cast<std::size_t>(item) / k_blocks;
      const std::size_t j0 = (static_cast<std::size_t>(item) % k_blocks) * kRowBlock;
      const std::size_t rows = std::min(kRowBlock, nk - j0);
      const std::size_t first_i = j0 > offset ? j0 - offset : 0;
      std::fill(kb.begin(), kb.end(), T{0});
      std::fill(vb.begin(), vb.end(), T{0});
      if (first_i < nq) {
        for (std::size_t hh = 0; hh < group; ++hh) {
          const std::size_t h = kvh * group + hh;
          const std::size_t span = nq - first_i;
          gemm_rows(dst[h].data() + j0 * nq + first_i, nq, qg[h].data() + first_i * dh, dh, kb.data(), dh, rows,
                    span, dh);
          gemm_rows(pt[h].data() + j0 * nq + first_i, nq, dog[h].data() + first_i * dh, dh, vb.data(), dh, rows,
                    span, dh);
        }
      }
      for (std::size_t r = 0; r < rows; ++r) {
        T* dkj = dk.data() + (j0 + r) * kw + kvh * dh;
        T* dvj = dv.data() + (j0 + r) * kw + kvh * dh;
        for (std::size_t d = 0; d < dh; ++d) {
          dkj[d] += scale * kb[r * dh + d];
          dvj[d] += vb[r * dh + d];
        }
      }
    }
  }
}

#define MIM_INSTANTIATE_KERNELS(T)                                                                            \
  template void matmul<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t, std::size_t,      \
                          std::size_t, bool);                                                                 \
  template void matmul_nt<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t, std::size_t,   \
                             std::size_t, bool);                                                              \
  template void matmul_tn<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t, std::size_t,   \
                             std::size_t, bool);                                                              \
  template void softmax_rows<T>(std::span<const T>, std::span<T>, std::size_t, std::size_t);                   \
  template void layer_norm_forward<T>(std::span<const T>, std::span<const T>, std::span<const T>, std::span<T>, \
                                      std::span<T>, std::span<T>, std::size_t, std::size_t);                  \
  template void layer_norm_backward<T>(std::span<const T>, std::span<const T>, std::span<const T>,             \
                                       std::span<const T>, std::span<const T>, std::span<T>, std::span<T>,     \
                                       std::span<T>, std::size_t, std::size_t);                               \
  template void gelu_forward<T>(std::span<const T>, std::span<T>);                                             \
  template void gelu_backward<T>(std::span<const T>, std::span<const T>, std::span<T>);                        \
  template void attention_forward<T>(std::span<const T>, std::span<const T>, std::span<const T>, std::span<T>, \
                                     std::span<T>, const AttentionShape&);                                    \
  template void attention_backward<T>(std::span<const T>, std::span<const T>, std::span<const T>,              \
                                      std::span<const T>, std::span<const T>, std::span<T>, std::span<T>,      \
                                      std::span<T>, const AttentionShape&);

MIM_INSTANTIATE_KERNELS(float)
MIM_INSTANTIATE_KERNELS(double)

#undef MIM_INSTANTIATE_KERNELS

}  // namespace mim::kernels
