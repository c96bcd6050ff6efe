#include "mim/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <sstream>

#include "mim/kernels.hpp"

namespace mim {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() &&
         std::equal(a.span().begin(), a.span().end(), b.span().begin(), [](T x, T y) {
           return std::memcmp(&x, &y, sizeof(T)) == 0;
         });
}

template bool bitwise_equal<float>(const Tensor<float>&, const Tensor<float>&);
template bool bitwise_equal<double>(const Tensor<double>&, const Tensor<double>&);

template <typename T>
Var Graph<T>::parameter(std::string name, Tensor<T> value) {
  Node node;
  node.value = std::move(value);
  node.name = std::move(name);
  node.parameter = true;
  node.requires_grad = track_;
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Graph<T>::variable(Tensor<T> value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = track_;
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Graph<T>::input(Tensor<T> value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Graph<T>::constant(Tensor<T> value) {
  Node node;
  node.value = std::move(value);
  node.constant = true;
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Graph<T>::detach(Var v) {
  return constant(value(v));
}

template <typename T>
Var Graph<T>::record(Tensor<T> value, const std::vector<Var>& inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  if (track_) {
    node.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                     [this](Var v) { return nodes_.at(v.id).requires_grad; });
    if (node.requires_grad) node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename T>
Tensor<T>& Graph<T>::grad(Var v) {
  Node& node = nodes_.at(v.id);
  if (node.grad.empty()) node.grad = Tensor<T>(node.value.shape());
  return node.grad;
}

template <typename T>
GradientMap<T> Graph<T>::backward(Var loss) {
  if (value(loss).size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_string(value(loss).shape()));
  }
  for (Node& node : nodes_) node.grad = Tensor<T>();
  visits_ = 0;
  GradientMap<T> out;
  if (!requires_grad(loss)) return out;
  grad(loss)[0] = T{1};
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || node.grad.empty() || !node.backward) continue;
    node.backward(*this, i);
    ++visits_;
  }
  for (const Node& node : nodes_) {
    if (node.parameter && !node.grad.empty()) out.emplace(node.name, node.grad);
  }
  return out;
}

template class Graph<float>;
template class Graph<double>;

namespace ops {
namespace {

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace

template <typename T>
Var matmul(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  if (bv.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(av.shape()) + " * " +
                     shape_string(bv.shape()));
  }
  Tensor<T> out({m, n});
  kernels::matmul<T>(av.span(), bv.span(), out.span(), m, k, n);
  return g.record(std::move(out), {a, b}, [a, b, m, k, n](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& go = gr.grad(Var{self});
    if (gr.requires_grad(a)) kernels::matmul_nt<T>(go.span(), gr.value(b).span(), gr.grad(a).span(), m, n, k, true);
    if (gr.requires_grad(b)) kernels::matmul_tn<T>(gr.value(a).span(), go.span(), gr.grad(b).span(), m, k, n, true);
  });
}

template <typename T>
Var matmul_nt(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  require_matrix(av, "matmul_nt");
  require_matrix(bv, "matmul_nt");
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[0];
  if (bv.shape()[1] != k) {
    throw ShapeError("matmul_nt: inner dimensions differ " + shape_string(av.shape()) + " * " +
                     shape_string(bv.shape()) + "^T");
  }
  Tensor<T> out({m, n});
  kernels::matmul_nt<T>(av.span(), bv.span(), out.span(), m, k, n);
  return g.record(std::move(out), {a, b}, [a, b, m, k, n](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& go = gr.grad(Var{self});
    if (gr.requires_grad(a)) kernels::matmul<T>(go.span(), gr.value(b).span(), gr.grad(a).span(), m, n, k, true);
    if (gr.requires_grad(b)) kernels::matmul_tn<T>(go.span(), gr.value(a).span(), gr.grad(b).span(), m, n, k, true);
  });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  require_same_shape(av, bv, "add");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& go = gr.grad(Var{self});
    for (Var in : {a, b}) {
      if (!gr.requires_grad(in)) continue;
      Tensor<T>& gi = gr.grad(in);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
    }
  });
}

template <typename T>
Var add_bias(Graph<T>& g, Var x, Var bias) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& bv = g.value(bias);
  if (bv.size() != xv.cols()) {
    throw ShapeError("add_bias: bias " + shape_string(bv.shape()) + " does not match columns of " +
                     shape_string(xv.shape()));
  }
  Tensor<T> out = xv;
  const std::size_t rows = out.rows(), cols = out.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  }
  return g.record(std::move(out), {x, bias}, [x, bias, rows, cols](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& go = gr.grad(Var{self});
    if (gr.requires_grad(x)) {
      Tensor<T>& gx = gr.grad(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
    }
    if (gr.requires_grad(bias)) {
      Tensor<T>& gb = gr.grad(bias);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) gb[c] += go[r * cols + c];
      }
    }
  });
}

template <typename T>
Var scale(Graph<T>& g, Var x, T factor) {
  Tensor<T> out = g.value(x);
  for (T& v : out.values()) v *= factor;
  return g.record(std::move(out), {x}, [x, factor](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& go = gr.grad(Var{self});
    Tensor<T>& gx = gr.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * go[i];
  });
}

template <typename T>
Var fuse(Graph<T>& g, Var a, Var b, T lambda) {
  require_same_shape(g.value(a), g.value(b), "fuse");
  if (lambda == T{0}) return a;
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += lambda * bv[i];
  return g.record(std::move(out), {a, b}, [a, b, lambda](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& go = gr.grad(Var{self});
    if (gr.requires_grad(a)) {
      Tensor<T>& ga = gr.grad(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
    }
    if (gr.requires_grad(b)) {
      Tensor<T>& gb = gr.grad(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += lambda * go[i];
    }
  });
}

template <typename T>
Var layer_norm(Graph<T>& g, Var x, Var gain, Var bias) {
  const Tensor<T>& xv = g.value(x);
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (g.value(gain).size() != cols || g.value(bias).size() != cols) {
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(cols) + " entries");
  }
  Tensor<T> out(xv.shape());
  auto mean = std::make_shared<std::vector<T>>(rows);
  auto rstd = std::make_shared<std::vector<T>>(rows);
  kernels::layer_norm_forward<T>(xv.span(), g.value(gain).span(), g.value(bias).span(), out.span(), *mean, *rstd,
                                 rows, cols);
  return g.record(std::move(out), {x, gain, bias},
                  [x, gain, bias, mean, rstd, rows, cols](Graph<T>& gr, std::size_t self) {
                    const Tensor<T>& go = gr.grad(Var{self});
                    // Scratch buffers absorb gradients for inputs that do not need them.
                    std::vector<T> sink_x, sink_g, sink_b;
                    auto target = [&](Var v, std::vector<T>& sink, std::size_t n) -> std::span<T> {
                      if (gr.requires_grad(v)) return gr.grad(v).span();
                      sink.assign(n, T{0});
                      return sink;
                    };
                    std::span<T> dx = target(x, sink_x, rows * cols);
                    std::span<T> dg = target(gain, sink_g, cols);
                    std::span<T> db = target(bias, sink_b, cols);
                    kernels::layer_norm_backward<T>(gr.value(x).span(), gr.value(gain).span(), *mean, *rstd,
                                                    go.span(), dx, dg, db, rows, cols);
                  });
}

template <typename T>
Var gelu(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  Tensor<T> out(xv.shape());
  kernels::gelu_forward<T>(xv.span(), out.span());
  return g.record(std::move(out), {x}, [x](Graph<T>& gr, std::size_t self) {
    kernels::gelu_backward<T>(gr.value(x).span(), gr.grad(Var{self}).span(), gr.grad(x).span());
  });
}

template <typename T>
Var softmax_rows(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor<T> out(xv.shape());
  kernels::softmax_rows<T>(xv.span(), out.span(), rows, cols);
  return g.record(std::move(out), {x}, [x, rows, cols](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& y = gr.value(Var{self});
    const Tensor<T>& go = gr.grad(Var{self});
    Tensor<T>& gx = gr.grad(x);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += y[r * cols + c] * go[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[r * cols + c] * (go[r * cols + c] - dot);
    }
  });
}

template <typename T>
Var embedding(Graph<T>& g, Var table, const std::vector<std::int32_t>& ids) {
  const Tensor<T>& tv = g.value(table);
  require_matrix(tv, "embedding");
  const std::size_t vocab = tv.shape()[0], dim = tv.shape()[1];
  if (ids.empty()) throw ShapeError("embedding: no ids");
  Tensor<T> out({ids.size(), dim});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw IndexError("embedding: id " + std::to_string(ids[r]) + " outside table of " + std::to_string(vocab) +
                       " rows");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[r]) * dim, dim, out.data() + r * dim);
  }
  return g.record(std::move(out), {table}, [table, ids, dim](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& go = gr.grad(Var{self});
    Tensor<T>& gt = gr.grad(table);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      T* dst = gt.data() + static_cast<std::size_t>(ids[r]) * dim;
      const T* src = go.data() + r * dim;
      for (std::size_t c = 0; c < dim; ++c) dst[c] += src[c];
    }
  });
}

template <typename T>
Var causal_attention(Graph<T>& g, Var q, Var k, Var v, const AttentionDims& d) {
  const Tensor<T>& qv = g.value(q);
  const Tensor<T>& kv = g.value(k);
  const Tensor<T>& vv = g.value(v);
  const std::size_t qw = d.heads * d.head_dim;
  const std::size_t kw = d.kv_heads * d.head_dim;
  const std::size_t rows = d.batch * d.length;
  if (d.kv_heads == 0 || d.heads % d.kv_heads != 0) throw ShapeError("attention: heads must be a multiple of kv_heads");
  if (qv.shape() != Shape{rows, qw} || kv.shape() != Shape{rows, kw} || vv.shape() != Shape{rows, kw}) {
    throw ShapeError("attention: q/k/v shapes " + shape_string(qv.shape()) + ", " + shape_string(kv.shape()) +
                     ", " + shape_string(vv.shape()) + " do not match the attention dims");
  }
  const kernels::AttentionShape as{d.length, d.length, d.heads, d.kv_heads, d.head_dim};
  const std::size_t probs_per_seq = d.heads * d.length * d.length;
  auto probs = std::make_shared<std::vector<T>>(d.batch * probs_per_seq);
  Tensor<T> out({rows, qw});
  for (std::size_t b = 0; b < d.batch; ++b) {
    kernels::attention_forward<T>(qv.span().subspan(b * d.length * qw, d.length * qw),
                                  kv.span().subspan(b * d.length * kw, d.length * kw),
                                  vv.span().subspan(b * d.length * kw, d.length * kw),
                                  out.span().subspan(b * d.length * qw, d.length * qw),
                                  std::span<T>(*probs).subspan(b * probs_per_seq, probs_per_seq), as);
  }
  return g.record(std::move(out), {q, k, v},
                  [q, k, v, d, as, probs, qw, kw, probs_per_seq](Graph<T>& gr, std::size_t self) {
                    const Tensor<T>& go = gr.grad(Var{self});
                    // Attention inputs are always projections of the residual stream, so
                    // all three receive gradients together.
                    Tensor<T>& dq = gr.grad(q);
                    Tensor<T>& dk = gr.grad(k);
                    Tensor<T>& dv = gr.grad(v);
                    for (std::size_t b = 0; b < d.batch; ++b) {
                      const std::size_t qo = b * d.length * qw, ko = b * d.length * kw;
                      kernels::attention_backward<T>(
                          gr.value(q).span().subspan(qo, d.length * qw), gr.value(k).span().subspan(ko, d.length * kw),
                          gr.value(v).span().subspan(ko, d.length * kw),
                          std::span<const T>(*probs).subspan(b * probs_per_seq, probs_per_seq),
                          go.span().subspan(qo, d.length * qw), dq.span().subspan(qo, d.length * qw),
                          dk.span().subspan(ko, d.length * kw), dv.span().subspan(ko, d.length * kw), as);
                    }
                  });
}

template <typename T>
Var cross_entropy(Graph<T>& g, Var logits, const std::vector<std::int32_t>& targets) {
  const Tensor<T>& lv = g.value(logits);
  require_matrix(lv, "cross_entropy");
  const std::size_t rows = lv.rows(), cols = lv.cols();
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) +
                     " rows");
  }
  std::size_t count = 0;
  for (std::int32_t t : targets) {
    if (t == kIgnoreTarget) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= cols) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(cols));
    }
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: no scored targets");

  auto probs = std::make_shared<std::vector<T>>(rows * cols);
  std::vector<T> row_loss(rows, T{0});
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ri = 0; ri < static_cast<std::ptrdiff_t>(rows); ++ri) {
    const std::size_t r = static_cast<std::size_t>(ri);
    if (targets[r] == kIgnoreTarget) continue;
    const T* x = lv.data() + r * cols;
    T* p = probs->data() + r * cols;
    const T mx = *std::max_element(x, x + cols);
    T sum = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      p[c] = std::exp(x[c] - mx);
      sum += p[c];
    }
    const T lse = mx + std::log(sum);
    row_loss[r] = lse - x[targets[r]];
    const T inv = T(1) / sum;
    for (std::size_t c = 0; c < cols; ++c) p[c] *= inv;
  }
  T total = 0;
  for (T l : row_loss) total += l;
  Tensor<T> out({1}, {total / static_cast<T>(count)});
  return g.record(std::move(out), {logits},
                  [logits, targets, probs, rows, cols, count](Graph<T>& gr, std::size_t self) {
                    const T scale = gr.grad(Var{self})[0] / static_cast<T>(count);
                    Tensor<T>& gl = gr.grad(logits);
#pragma omp parallel for schedule(static)
                    for (std::ptrdiff_t ri = 0; ri < static_cast<std::ptrdiff_t>(rows); ++ri) {
                      const std::size_t r = static_cast<std::size_t>(ri);
                      if (targets[r] == kIgnoreTarget) continue;
                      const T* p = probs->data() + r * cols;
                      T* dst = gl.data() + r * cols;
                      for (std::size_t c = 0; c < cols; ++c) dst[c] += scale * p[c];
                      dst[targets[r]] -= scale;
                    }
                  });
}

template <typename T>
Var tv_mean(Graph<T>& g, Var logits_a, Var logits_b, const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
            TvOptions options) {
  const Tensor<T>& av = g.value(logits_a);
  const Tensor<T>& bv = g.value(logits_b);
  require_matrix(av, "tv_mean");
  require_matrix(bv, "tv_mean");
  const std::size_t cols = av.cols();
  if (bv.cols() != cols) throw ShapeError("tv_mean: vocabulary sizes differ");
  if (pairs.empty()) throw AlignmentError("tv_mean: no aligned pairs");
  for (const auto& [ra, rb] : pairs) {
    if (ra >= av.rows() || rb >= bv.rows()) throw AlignmentError("tv_mean: aligned row out of range");
  }
  const std::size_t n = pairs.size();
  // Per pair: softmax of both rows.
  auto pa = std::make_shared<std::vector<T>>(n * cols);
  auto pb = std::make_shared<std::vector<T>>(n * cols);
  std::vector<T> dist(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    kernels::reference::softmax_rows<T>(av.span().subspan(pairs[i].first * cols, cols),
                                        std::span<T>(*pa).subspan(i * cols, cols), 1, cols);
    kernels::reference::softmax_rows<T>(bv.span().subspan(pairs[i].second * cols, cols),
                                        std::span<T>(*pb).subspan(i * cols, cols), 1, cols);
    T acc = 0;
    for (std::size_t c = 0; c < cols; ++c) acc += std::abs((*pa)[i * cols + c] - (*pb)[i * cols + c]);
    dist[i] = T(0.5) * acc;
  }
  T total = 0;
  for (T d : dist) total += d;
  Tensor<T> out({1}, {total / static_cast<T>(n)});

  const Var a_in = options.stop_grad_a ? g.detach(logits_a) : logits_a;
  const Var b_in = options.stop_grad_b ? g.detach(logits_b) : logits_b;
  return g.record(std::move(out), {a_in, b_in}, [a_in, b_in, pairs, pa, pb, cols](Graph<T>& gr, std::size_t self) {
    const std::size_t n = pairs.size();
    const T scale = gr.grad(Var{self})[0] / static_cast<T>(n);
    const bool want_a = gr.requires_grad(a_in);
    const bool want_b = gr.requires_grad(b_in);
    std::vector<T> da(want_a ? n * cols : 0), db(want_b ? n * cols : 0);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
      const std::size_t i = static_cast<std::size_t>(ii);
      const T* p = pa->data() + i * cols;
      const T* q = pb->data() + i * cols;
      // d TV / d p_z = 0.5 sign(p_z - q_z); then through each softmax.
      T dot_a = 0, dot_b = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        const T diff = p[c] - q[c];
        const T s = diff > 0 ? T(0.5) : (diff < 0 ? T(-0.5) : T(0));
        dot_a += p[c] * s;
        dot_b += q[c] * -s;
      }
      for (std::size_t c = 0; c < cols; ++c) {
        const T diff = p[c] - q[c];
        const T s = diff > 0 ? T(0.5) : (diff < 0 ? T(-0.5) : T(0));
        if (want_a) da[i * cols + c] = scale * p[c] * (s - dot_a);
        if (want_b) db[i * cols + c] = scale * q[c] * (-s - dot_b);
      }
    }
    if (want_a) {
      Tensor<T>& ga = gr.grad(a_in);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < cols; ++c) ga[pairs[i].first * cols + c] += da[i * cols + c];
      }
    }
    if (want_b) {
      Tensor<T>& gb = gr.grad(b_in);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < cols; ++c) gb[pairs[i].second * cols + c] += db[i * cols + c];
      }
    }
  });
}

template <typename T>
Var sum(Graph<T>& g, Var x) {
  T total = 0;
  for (T v : g.value(x).span()) total += v;
  return g.record(Tensor<T>({1}, {total}), {x}, [x](Graph<T>& gr, std::size_t self) {
    const T go = gr.grad(Var{self})[0];
    for (T& v : gr.grad(x).values()) v += go;
  });
}

template <typename T>
Var linear_combination(Graph<T>& g, const std::vector<Var>& terms, const std::vector<T>& coeffs) {
  if (terms.size() != coeffs.size() || terms.empty()) {
    throw ShapeError("linear_combination: terms and coefficients must be non-empty and equal in number");
  }
  T total = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) total += coeffs[i] * g.value(terms[i]).item();
  return g.record(Tensor<T>({1}, {total}), terms, [terms, coeffs](Graph<T>& gr, std::size_t self) {
    const T go = gr.grad(Var{self})[0];
    for (std::size_t i = 0; i < terms.size(); ++i) {
      if (gr.requires_grad(terms[i])) gr.grad(terms[i])[0] += coeffs[i] * go;
    }
  });
}

#define MIM_INSTANTIATE_OPS(T)                                                                                \
  template Var matmul<T>(Graph<T>&, Var, Var);                                                                 \
  template Var matmul_nt<T>(Graph<T>&, Var, Var);                                                              \
  template Var add<T>(Graph<T>&, Var, Var);                                                                    \
  template Var add_bias<T>(Graph<T>&, Var, Var);                                                               \
  template Var scale<T>(Graph<T>&, Var, T);                                                                    \
  template Var fuse<T>(Graph<T>&, Var, Var, T);                                                                \
  template Var layer_norm<T>(Graph<T>&, Var, Var, Var);                                                        \
  template Var gelu<T>(Graph<T>&, Var);                                                                        \
  template Var softmax_rows<T>(Graph<T>&, Var);                                                                \
  template Var embedding<T>(Graph<T>&, Var, const std::vector<std::int32_t>&);                                 \
  template Var causal_attention<T>(Graph<T>&, Var, Var, Var, const AttentionDims&);                            \
  template Var cross_entropy<T>(Graph<T>&, Var, const std::vector<std::int32_t>&);                             \
  template Var tv_mean<T>(Graph<T>&, Var, Var, const std::vector<std::pair<std::size_t, std::size_t>>&,        \
                          TvOptions);                                                                         \
  template Var sum<T>(Graph<T>&, Var);                                                                         \
  template Var linear_combination<T>(Graph<T>&, const std::vector<Var>&, const std::vector<T>&);

MIM_INSTANTIATE_OPS(float)
MIM_INSTANTIATE_OPS(double)

#undef MIM_INSTANTIATE_OPS

}  // namespace ops
}  // namespace mim
