// Times the OpenMP kernels against the serial reference on training-sized
// shapes and reports the largest output difference.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mim/kernels.hpp"

namespace k = mim::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<float> d(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

double best_ms(int reps, const std::function<void()>& fn) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    best = std::min(best, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

double max_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<double>(std::abs(a[i] - b[i])));
  return m;
}

void report(const std::string& name, double serial, double parallel, double diff) {
  std::printf("%-22s %10.3f %10.3f %8.2fx %10.2e\n", name.c_str(), serial, parallel, serial / parallel, diff);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Serial vs parallel kernel timings"};
  std::size_t rows = 1024, d = 128, ctx = 256, heads = 4;
  int reps = 5;
  app.add_option("--rows", rows, "rows of the activation matrices");
  app.add_option("--d", d, "model width");
  app.add_option("--ctx", ctx, "attention sequence length");
  app.add_option("--heads", heads, "attention heads");
  app.add_option("--reps", reps, "repetitions; the best time is reported");
  CLI11_PARSE(app, argc, argv);

  std::mt19937_64 rng(0);
  std::printf("threads: %d\n", k::max_threads());
  std::printf("%-22s %10s %10s %9s %10s\n", "kernel", "serial ms", "omp ms", "speedup", "max diff");

  {
    const std::size_t n = 4 * d;
    const auto a = random_vec(rows * d, rng), b = random_vec(d * n, rng);
    std::vector<float> c1(rows * n), c2(rows * n);
    const double s = best_ms(reps, [&] { k::reference::matmul<float>(a, b, c1, rows, d, n); });
    const double p = best_ms(reps, [&] { k::matmul<float>(a, b, c2, rows, d, n); });
    report("matmul", s, p, max_diff(c1, c2));
  }
  {
    const std::size_t n = 4 * d;
    const auto a = random_vec(rows * d, rng), b = random_vec(n * d, rng);
    std::vector<float> c1(rows * n), c2(rows * n);
    const double s = best_ms(reps, [&] { k::reference::matmul_nt<float>(a, b, c1, rows, d, n); });
    const double p = best_ms(reps, [&] { k::matmul_nt<float>(a, b, c2, rows, d, n); });
    report("matmul_nt", s, p, max_diff(c1, c2));
  }
  {
    const std::size_t n = 4 * d;
    const auto a = random_vec(rows * d, rng), b = random_vec(rows * n, rng);
    std::vector<float> c1(d * n), c2(d * n);
    const double s = best_ms(reps, [&] { k::reference::matmul_tn<float>(a, b, c1, rows, d, n); });
    const double p = best_ms(reps, [&] { k::matmul_tn<float>(a, b, c2, rows, d, n); });
    report("matmul_tn", s, p, max_diff(c1, c2));
  }
  {
    const std::size_t cols = 264;
    const auto x = random_vec(rows * cols, rng);
    std::vector<float> y1(x.size()), y2(x.size());
    const double s = best_ms(reps, [&] { k::reference::softmax_rows<float>(x, y1, rows, cols); });
    const double p = best_ms(reps, [&] { k::softmax_rows<float>(x, y2, rows, cols); });
    report("softmax_rows", s, p, max_diff(y1, y2));
  }
  {
    const auto x = random_vec(rows * d, rng), g = random_vec(d, rng), b = random_vec(d, rng);
    std::vector<float> y1(x.size()), y2(x.size()), m(rows), r(rows);
    const double s = best_ms(reps, [&] { k::reference::layer_norm_forward<float>(x, g, b, y1, m, r, rows, d); });
    const double p = best_ms(reps, [&] { k::layer_norm_forward<float>(x, g, b, y2, m, r, rows, d); });
    report("layer_norm_forward", s, p, max_diff(y1, y2));
  }
  {
    const k::AttentionShape shape{ctx, ctx, heads, heads, d / heads};
    const auto q = random_vec(ctx * d, rng), kk = random_vec(ctx * d, rng), v = random_vec(ctx * d, rng);
    std::vector<float> o1(ctx * d), o2(ctx * d), p1(heads * ctx * ctx), p2(heads * ctx * ctx);
    const double s = best_ms(reps, [&] { k::reference::attention_forward<float>(q, kk, v, o1, p1, shape); });
    const double p = best_ms(reps, [&] { k::attention_forward<float>(q, kk, v, o2, p2, shape); });
    report("attention_forward", s, p, max_diff(o1, o2));

    const auto dout = random_vec(ctx * d, rng);
    std::vector<float> dq1(ctx * d), dk1(ctx * d), dv1(ctx * d), dq2(ctx * d), dk2(ctx * d), dv2(ctx * d);
    const double sb = best_ms(reps, [&] {
      std::fill(dq1.begin(), dq1.end(), 0.0f);
      std::fill(dk1.begin(), dk1.end(), 0.0f);
      std::fill(dv1.begin(), dv1.end(), 0.0f);
      k::reference::attention_backward<float>(q, kk, v, p1, dout, dq1, dk1, dv1, shape);
    });
    const double pb = best_ms(reps, [&] {
      std::fill(dq2.begin(), dq2.end(), 0.0f);
      std::fill(dk2.begin(), dk2.end(), 0.0f);
      std::fill(dv2.begin(), dv2.end(), 0.0f);
      k::attention_backward<float>(q, kk, v, p2, dout, dq2, dk2, dv2, shape);
    });
    report("attention_backward", sb, pb, std::max({max_diff(dq1, dq2), max_diff(dk1, dk2), max_diff(dv1, dv2)}));
  }
  return 0;
}
