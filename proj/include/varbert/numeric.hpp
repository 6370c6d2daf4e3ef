#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "varbert/common.hpp"

namespace varbert {

// Dense row-major tensor. Parameters are 1-D or 2-D; a 1-D tensor of length
// m is treated as a 1 x m row by the tape.
template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until gradients are first accumulated

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims, T fill = T(0)) : shape(std::move(dims)) {
    values.assign(element_count(shape), fill);
  }

  static std::size_t element_count(const std::vector<std::size_t>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t size() const { return values.size(); }
  std::size_t rows() const { return shape.size() >= 2 ? shape[0] : 1; }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }

  void zero_grad() { grad.assign(values.size(), T(0)); }
};

namespace kernels {

// C[n x m] += A[n x k] * B[k x m]
template <typename T>
void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const T* __restrict a, const T* __restrict b,
             T* __restrict c) {
  std::size_t i = 0;
  // Four rows of C per pass over B.
  for (; i + 4 <= n; i += 4) {
    T* __restrict c0 = c + i * m;
    T* __restrict c1 = c0 + m;
    T* __restrict c2 = c1 + m;
    T* __restrict c3 = c2 + m;
    const T* a0 = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T x0 = a0[p], x1 = a0[k + p], x2 = a0[2 * k + p], x3 = a0[3 * k + p];
      const T* __restrict brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) {
        const T bv = brow[j];
        c0[j] += x0 * bv;
        c1[j] += x1 * bv;
        c2[j] += x2 * bv;
        c3[j] += x3 * bv;
      }
    }
  }
  for (; i < n; ++i) {
    T* __restrict crow = c + i * m;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* __restrict brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[k x m] += A[n x k]^T * B[n x m]
template <typename T>
void gemm_tn(std::size_t n, std::size_t k, std::size_t m, const T* __restrict a, const T* __restrict b,
             T* __restrict c) {
  std::size_t i = 0;
  // Four rows of A and B per pass over C.
  for (; i + 4 <= n; i += 4) {
    const T* __restrict b0 = b + i * m;
    const T* __restrict b1 = b0 + m;
    const T* __restrict b2 = b1 + m;
    const T* __restrict b3 = b2 + m;
    const T* a0 = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T x0 = a0[p], x1 = a0[k + p], x2 = a0[2 * k + p], x3 = a0[3 * k + p];
      T* __restrict crow = c + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += x0 * b0[j] + x1 * b1[j] + x2 * b2[j] + x3 * b3[j];
    }
  }
  for (; i < n; ++i) {
    const T* arow = a + i * k;
    const T* __restrict brow = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* __restrict crow = c + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[n x m] += A[n x k] * B[m x k]^T
template <typename T>
void gemm_nt(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c) {
  std::vector<T> bt(k * m);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * m + j] = b[j * k + p];
  gemm_nn(n, k, m, a, bt.data(), c);
}


}  // namespace kernels

template <typename T>
class Tape;

struct Var {
  std::size_t id = 0;
};

// Reverse-mode tape. Nodes are appended in execution order; backward walks
// them in reverse. With record=false no closures are kept (inference).
template <typename T>
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const { return record_; }

  Var constant(std::size_t rows, std::size_t cols, std::vector<T> values) {
    Node& n = push(rows, cols, false);
    n.value = std::move(values);
    return last();
  }

  // Leaf bound to a parameter; gradients accumulate into p.grad.
  Var param(Tensor<T>& p) {
    Node& n = push(p.rows(), p.cols(), record_);
    n.external = &p.values;
    n.param = &p;
    return last();
  }

  std::size_t rows(Var v) const { return nodes_[v.id].rows; }
  std::size_t cols(Var v) const { return nodes_[v.id].cols; }
  const T* value(Var v) const { return nodes_[v.id].data(); }
  std::span<const T> values(Var v) const { return {value(v), rows(v) * cols(v)}; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  T* grad(Var v) {
    Node& n = nodes_[v.id];
    return n.param ? n.param->grad.data() : n.grad.data();
  }

  // Output node whose value the caller fills; `backward` is recorded when any
  // input requires gradients.
  Var op(std::size_t rows, std::size_t cols, std::initializer_list<Var> inputs) {
    return op(rows, cols, std::span<const Var>(inputs.begin(), inputs.size()));
  }

  Var op(std::size_t rows, std::size_t cols, std::span<const Var> inputs) {
    bool ng = false;
    if (record_)
      for (Var in : inputs) ng = ng || nodes_[in.id].needs_grad;
    Node& n = push(rows, cols, ng);
    n.value.assign(rows * cols, T(0));
    return last();
  }

  T* mutable_value(Var v) { return nodes_[v.id].value.data(); }

  void on_backward(Var v, std::function<void()> fn) {
    if (nodes_[v.id].needs_grad) nodes_[v.id].backward = std::move(fn);
  }

  void backward(Var loss, T seed = T(1)) {
    if (!record_) throw RuntimeError("backward on a non-recording tape");
    for (Node& n : nodes_) {
      if (!n.needs_grad) continue;
      if (n.param) {
        if (n.param->grad.size() != n.param->values.size()) n.param->grad.assign(n.param->values.size(), T(0));
      } else {
        n.grad.assign(n.rows * n.cols, T(0));
      }
    }
    if (!nodes_[loss.id].needs_grad) return;
    grad(loss)[0] += seed;
    for (std::size_t i = nodes_.size(); i-- > 0;)
      if (nodes_[i].needs_grad && nodes_[i].backward) nodes_[i].backward();
  }

 private:
  struct Node {
    std::size_t rows = 0, cols = 0;
    std::vector<T> value;
    const std::vector<T>* external = nullptr;
    Tensor<T>* param = nullptr;
    std::vector<T> grad;
    bool needs_grad = false;
    std::function<void()> backward;

    const T* data() const { return external ? external->data() : value.data(); }
  };

  Node& push(std::size_t rows, std::size_t cols, bool needs_grad) {
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.rows = rows;
    n.cols = cols;
    n.needs_grad = needs_grad;
    return n;
  }

  Var last() const { return {nodes_.size() - 1}; }

  bool record_;
  std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable primitives

namespace ops {

inline void require(bool ok, const char* what) {
  if (!ok) throw RuntimeError(std::string("shape mismatch in ") + what);
}

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
  const std::size_t n = t.rows(a), k = t.cols(a), m = t.cols(b);
  require(t.rows(b) == k, "matmul");
  Var c = t.op(n, m, {a, b});
  kernels::gemm_nn(n, k, m, t.value(a), t.value(b), t.mutable_value(c));
  t.on_backward(c, [&t, a, b, c, n, k, m] {
    if (t.needs_grad(a)) kernels::gemm_nt(n, m, k, t.grad(c), t.value(b), t.grad(a));
    if (t.needs_grad(b)) kernels::gemm_tn(n, k, m, t.value(a), t.grad(c), t.grad(b));
  });
  return c;
}

// a[n x k] * b[m x k]^T
template <typename T>
Var matmul_nt(Tape<T>& t, Var a, Var b) {
  const std::size_t n = t.rows(a), k = t.cols(a), m = t.rows(b);
  require(t.cols(b) == k, "matmul_nt");
  Var c = t.op(n, m, {a, b});
  kernels::gemm_nt(n, k, m, t.value(a), t.value(b), t.mutable_value(c));
  t.on_backward(c, [&t, a, b, c, n, k, m] {
    if (t.needs_grad(a)) kernels::gemm_nn(n, m, k, t.grad(c), t.value(b), t.grad(a));
    if (t.needs_grad(b)) kernels::gemm_tn(n, m, k, t.grad(c), t.value(a), t.grad(b));
  });
  return c;
}

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  const std::size_t n = t.rows(a) * t.cols(a);
  require(t.rows(a) == t.rows(b) && t.cols(a) == t.cols(b), "add");
  Var c = t.op(t.rows(a), t.cols(a), {a, b});
  const T *av = t.value(a), *bv = t.value(b);
  T* cv = t.mutable_value(c);
  for (std::size_t i = 0; i < n; ++i) cv[i] = av[i] + bv[i];
  t.on_backward(c, [&t, a, b, c, n] {
    const T* g = t.grad(c);
    if (t.needs_grad(a)) {
      T* ga = t.grad(a);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (t.needs_grad(b)) {
      T* gb = t.grad(b);
      for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
    }
  });
  return c;
}

// a[n x m] + bias[1 x m] broadcast over rows.
template <typename T>
Var add_row(Tape<T>& t, Var a, Var bias) {
  const std::size_t n = t.rows(a), m = t.cols(a);
  require(t.rows(bias) * t.cols(bias) == m, "add_row");
  Var c = t.op(n, m, {a, bias});
  const T *av = t.value(a), *bv = t.value(bias);
  T* cv = t.mutable_value(c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) cv[i * m + j] = av[i * m + j] + bv[j];
  t.on_backward(c, [&t, a, bias, c, n, m] {
    const T* g = t.grad(c);
    if (t.needs_grad(a)) {
      T* ga = t.grad(a);
      for (std::size_t i = 0; i < n * m; ++i) ga[i] += g[i];
    }
    if (t.needs_grad(bias)) {
      T* gb = t.grad(bias);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
    }
  });
  return c;
}

template <typename T>
Var scale(Tape<T>& t, Var a, T s) {
  const std::size_t n = t.rows(a) * t.cols(a);
  Var c = t.op(t.rows(a), t.cols(a), {a});
  const T* av = t.value(a);
  T* cv = t.mutable_value(c);
  for (std::size_t i = 0; i < n; ++i) cv[i] = av[i] * s;
  t.on_backward(c, [&t, a, c, n, s] {
    const T* g = t.grad(c);
    T* ga = t.grad(a);
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * s;
  });
  return c;
}

// Row gather: out[i] = table[rows[i]]. Used for embedding lookup.
template <typename T>
Var gather_rows(Tape<T>& t, Var table, std::vector<std::size_t> rows) {
  const std::size_t m = t.cols(table), vocab = t.rows(table);
  for (std::size_t r : rows) require(r < vocab, "gather_rows (index out of range)");
  Var c = t.op(rows.size(), m, {table});
  const T* tv = t.value(table);
  T* cv = t.mutable_value(c);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(tv + rows[i] * m, m, cv + i * m);
  t.on_backward(c, [&t, table, c, m, rows = std::move(rows)] {
    const T* g = t.grad(c);
    T* gt = t.grad(table);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < m; ++j) gt[rows[i] * m + j] += g[i * m + j];
  });
  return c;
}

template <typename T>
Var slice_cols(Tape<T>& t, Var a, std::size_t start, std::size_t width) {
  const std::size_t n = t.rows(a), m = t.cols(a);
  require(start + width <= m, "slice_cols");
  Var c = t.op(n, width, {a});
  const T* av = t.value(a);
  T* cv = t.mutable_value(c);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(av + i * m + start, width, cv + i * width);
  t.on_backward(c, [&t, a, c, n, m, start, width] {
    const T* g = t.grad(c);
    T* ga = t.grad(a);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < width; ++j) ga[i * m + start + j] += g[i * width + j];
  });
  return c;
}

template <typename T>
Var concat_cols(Tape<T>& t, const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols");
  const std::size_t n = t.rows(parts[0]);
  std::size_t m = 0;
  for (Var p : parts) {
    require(t.rows(p) == n, "concat_cols");
    m += t.cols(p);
  }
  Var c = t.op(n, m, std::span<const Var>(parts));
  T* cv = t.mutable_value(c);
  std::size_t off = 0;
  for (Var p : parts) {
    const std::size_t w = t.cols(p);
    const T* pv = t.value(p);
    for (std::size_t i = 0; i < n; ++i) std::copy_n(pv + i * w, w, cv + i * m + off);
    off += w;
  }
  t.on_backward(c, [&t, parts, c, n, m] {
    const T* g = t.grad(c);
    std::size_t off = 0;
    for (Var p : parts) {
      const std::size_t w = t.cols(p);
      if (t.needs_grad(p)) {
        T* gp = t.grad(p);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * m + off + j];
      }
      off += w;
    }
  });
  return c;
}

// Columns with key_valid[j] == false are pushed to a large negative value so
// softmax assigns them zero weight.
template <typename T>
Var mask_cols(Tape<T>& t, Var a, const std::vector<bool>& key_valid) {
  const std::size_t n = t.rows(a), m = t.cols(a);
  require(key_valid.size() == m, "mask_cols");
  Var c = t.op(n, m, {a});
  const T* av = t.value(a);
  T* cv = t.mutable_value(c);
  const T neg = T(-1e9);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) cv[i * m + j] = key_valid[j] ? av[i * m + j] : neg;
  t.on_backward(c, [&t, a, c, n, m, key_valid] {
    const T* g = t.grad(c);
    T* ga = t.grad(a);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        if (key_valid[j]) ga[i * m + j] += g[i * m + j];
  });
  return c;
}

template <typename T>
void softmax_row(const T* x, T* y, std::size_t m) {
  T mx = x[0];
  for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, x[j]);
  T sum = 0;
  for (std::size_t j = 0; j < m; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  const T inv = T(1) / sum;
  for (std::size_t j = 0; j < m; ++j) y[j] *= inv;
}

template <typename T>
Var softmax_rows(Tape<T>& t, Var a) {
  const std::size_t n = t.rows(a), m = t.cols(a);
  Var c = t.op(n, m, {a});
  const T* av = t.value(a);
  T* cv = t.mutable_value(c);
  for (std::size_t i = 0; i < n; ++i) softmax_row(av + i * m, cv + i * m, m);
  t.on_backward(c, [&t, a, c, n, m] {
    const T* g = t.grad(c);
    const T* y = t.value(c);
    T* ga = t.grad(a);
    for (std::size_t i = 0; i < n; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < m; ++j) dot += g[i * m + j] * y[i * m + j];
      for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += y[i * m + j] * (g[i * m + j] - dot);
    }
  });
  return c;
}

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
Var layer_norm(Tape<T>& t, Var a, Var gamma, Var beta, T eps = T(kLayerNormEps)) {
  const std::size_t n = t.rows(a), m = t.cols(a);
  require(t.rows(gamma) * t.cols(gamma) == m && t.rows(beta) * t.cols(beta) == m, "layer_norm");
  Var c = t.op(n, m, {a, gamma, beta});
  const T *av = t.value(a), *gv = t.value(gamma), *bv = t.value(beta);
  T* cv = t.mutable_value(c);
  std::vector<T> xhat(n * m), rstd(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* x = av + i * m;
    T mean = 0;
    for (std::size_t j = 0; j < m; ++j) mean += x[j];
    mean /= T(m);
    T var = 0;
    for (std::size_t j = 0; j < m; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= T(m);
    rstd[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) {
      xhat[i * m + j] = (x[j] - mean) * rstd[i];
      cv[i * m + j] = xhat[i * m + j] * gv[j] + bv[j];
    }
  }
  t.on_backward(c, [&t, a, gamma, beta, c, n, m, xhat = std::move(xhat), rstd = std::move(rstd)] {
    const T* g = t.grad(c);
    const T* gv = t.value(gamma);
    if (t.needs_grad(gamma) || t.needs_grad(beta)) {
      T* gg = t.needs_grad(gamma) ? t.grad(gamma) : nullptr;
      T* gb = t.needs_grad(beta) ? t.grad(beta) : nullptr;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          if (gg) gg[j] += g[i * m + j] * xhat[i * m + j];
          if (gb) gb[j] += g[i * m + j];
        }
    }
    if (t.needs_grad(a)) {
      T* ga = t.grad(a);
      for (std::size_t i = 0; i < n; ++i) {
        T sum_d = 0, sum_dx = 0;
        for (std::size_t j = 0; j < m; ++j) {
          const T d = g[i * m + j] * gv[j];
          sum_d += d;
          sum_dx += d * xhat[i * m + j];
        }
        for (std::size_t j = 0; j < m; ++j) {
          const T d = g[i * m + j] * gv[j];
          ga[i * m + j] += rstd[i] / T(m) * (T(m) * d - sum_d - xhat[i * m + j] * sum_dx);
        }
      }
    }
  });
  return c;
}

// Exact GELU: x * Phi(x).
template <typename T>
Var gelu(Tape<T>& t, Var a) {
  const std::size_t n = t.rows(a) * t.cols(a);
  Var c = t.op(t.rows(a), t.cols(a), {a});
  const T* av = t.value(a);
  T* cv = t.mutable_value(c);
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  for (std::size_t i = 0; i < n; ++i) cv[i] = av[i] * T(0.5) * (T(1) + std::erf(av[i] * inv_sqrt2));
  t.on_backward(c, [&t, a, c, n, inv_sqrt2] {
    const T* g = t.grad(c);
    const T* x = t.value(a);
    T* ga = t.grad(a);
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    for (std::size_t i = 0; i < n; ++i) {
      const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
      const T pdf = std::exp(T(-0.5) * x[i] * x[i]) * inv_sqrt_2pi;
      ga[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
  return c;
}

// Inverted dropout; the identity when !training or p == 0.
template <typename T>
Var dropout(Tape<T>& t, Var a, double p, Rng* rng, bool training) {
  if (!training || p <= 0.0) return a;
  if (!rng) throw RuntimeError("dropout in training mode needs a generator");
  const std::size_t n = t.rows(a) * t.cols(a);
  std::vector<T> mask(n);
  const T keep_scale = T(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < n; ++i) {
    const double u = static_cast<double>((*rng)() >> 11) * 0x1.0p-53;
    mask[i] = u < p ? T(0) : keep_scale;
  }
  Var c = t.op(t.rows(a), t.cols(a), {a});
  const T* av = t.value(a);
  T* cv = t.mutable_value(c);
  for (std::size_t i = 0; i < n; ++i) cv[i] = av[i] * mask[i];
  t.on_backward(c, [&t, a, c, n, mask = std::move(mask)] {
    const T* g = t.grad(c);
    T* ga = t.grad(a);
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * mask[i];
  });
  return c;
}

struct Target {
  std::size_t row = 0;
  std::int64_t id = 0;
};

// Mean over targets of -log softmax(logits[row])[id]; rows without a target
// contribute nothing.
template <typename T>
Var cross_entropy_masked(Tape<T>& t, Var logits, std::vector<Target> targets) {
  const std::size_t n = t.rows(logits), m = t.cols(logits);
  if (targets.empty()) throw RuntimeError("cross_entropy_masked: no target positions");
  for (const Target& tg : targets)
    if (tg.row >= n || tg.id < 0 || static_cast<std::size_t>(tg.id) >= m)
      throw RuntimeError("cross_entropy_masked: target out of range");
  Var c = t.op(1, 1, {logits});
  const T* lv = t.value(logits);
  T total = 0;
  std::vector<T> probs(targets.size() * m);
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const T* row = lv + targets[k].row * m;
    T mx = row[0];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (std::size_t j = 0; j < m; ++j) sum += std::exp(row[j] - mx);
    const T lse = mx + std::log(sum);
    total += lse - row[targets[k].id];
    for (std::size_t j = 0; j < m; ++j) probs[k * m + j] = std::exp(row[j] - lse);
  }
  const T inv = T(1) / T(targets.size());
  t.mutable_value(c)[0] = total * inv;
  t.on_backward(c, [&t, logits, c, m, inv, targets = std::move(targets), probs = std::move(probs)] {
    const T g = t.grad(c)[0] * inv;
    T* gl = t.grad(logits);
    for (std::size_t k = 0; k < targets.size(); ++k) {
      T* row = gl + targets[k].row * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += g * probs[k * m + j];
      row[targets[k].id] -= g;
    }
  });
  return c;
}

template <typename T>
Var sum_squares(Tape<T>& t, Var a) {
  const std::size_t n = t.rows(a) * t.cols(a);
  Var c = t.op(1, 1, {a});
  const T* av = t.value(a);
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += av[i] * av[i];
  t.mutable_value(c)[0] = s;
  t.on_backward(c, [&t, a, c, n] {
    const T g = t.grad(c)[0];
    const T* av = t.value(a);
    T* ga = t.grad(a);
    for (std::size_t i = 0; i < n; ++i) ga[i] += T(2) * av[i] * g;
  });
  return c;
}

// Weighted sum of all elements: sum(a .* w). Turns any tensor output into a
// scalar for gradient checks.
template <typename T>
Var weighted_sum(Tape<T>& t, Var a, std::vector<T> w) {
  const std::size_t n = t.rows(a) * t.cols(a);
  require(w.size() == n, "weighted_sum");
  Var c = t.op(1, 1, {a});
  const T* av = t.value(a);
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += av[i] * w[i];
  t.mutable_value(c)[0] = s;
  t.on_backward(c, [&t, a, c, n, w = std::move(w)] {
    const T g = t.grad(c)[0];
    T* ga = t.grad(a);
    for (std::size_t i = 0; i < n; ++i) ga[i] += w[i] * g;
  });
  return c;
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates_checked = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
};

// Compares reverse-mode gradients of `build` (Tape<double>& -> scalar Var)
// against central differences on up to `max_coords` random coordinates
// (all coordinates when there are fewer). Relative error uses an absolute
// floor of `floor` in the denominator.
template <typename Build>
GradCheckResult grad_check(const std::vector<Tensor<double>*>& params, Build build, double eps = 1e-5,
                           std::size_t max_coords = 200, std::uint64_t seed = 1, double floor = 1e-6) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    Var loss = build(tape);
    tape.backward(loss);
  }
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t i = 0; i < params[p]->size(); ++i) coords.emplace_back(p, i);
  if (coords.size() > max_coords) {
    Rng rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
  }
  auto eval = [&] {
    Tape<double> tape(false);
    return tape.value(build(tape))[0];
  };
  GradCheckResult res;
  for (auto [p, i] : coords) {
    double& x = params[p]->values[i];
    const double saved = x;
    x = saved + eps;
    const double fp = eval();
    x = saved - eps;
    const double fm = eval();
    x = saved;
    const double numeric = (fp - fm) / (2 * eps);
    const double analytic = params[p]->grad[i];
    if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(analytic))
      throw RuntimeError("grad_check: non-finite value at parameter " + std::to_string(p) + " index " +
                         std::to_string(i));
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_param = p;
      res.worst_index = i;
    }
    ++res.coordinates_checked;
  }
  return res;
}

}  // namespace varbert
