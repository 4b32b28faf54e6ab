// Copyright 2026 the cvunet authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>

#include "cvunet/tensor.hpp"

namespace cvu {

// ---------------------------------------------------------------------------
// Reverse-mode autodiff over Tensor<T>. A Var is a shared handle to a graph
// node; ops build the graph eagerly and record a backward closure. backward()
// overwrites gradients (zero, then accumulate) on every reachable node.
// ---------------------------------------------------------------------------

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // materialized lazily, same shape as value
  bool requires_grad = false;
  bool grad_ready = false;
  std::vector<NodePtr<T>> parents;
  // Propagates this->grad into parents' grads.
  std::function<void(Node<T>&)> backprop;

  void ensure_grad() {
    if (!grad_ready) {
      grad = Tensor<T>::zeros(value.shape);
      grad_ready = true;
    }
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr<T> n) : node_(std::move(n)) {}

  /// Constant (no gradient tracking).
  static Var constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return Var(std::move(n));
  }
  /// Trainable leaf.
  static Var leaf(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = true;
    return Var(std::move(n));
  }
  static Var scalar(T v) { return constant(Tensor<T>::scalar(v)); }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape; }
  int64_t numel() const { return node_->value.numel(); }
  NodePtr<T> node() const { return node_; }

 private:
  NodePtr<T> node_;
};

namespace detail {

// C[M,N] = A[M,K] * B[K,N], optionally accumulating into C.
// ikj order so the inner loop runs contiguously over B and C rows.
template <typename T>
void gemm(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C,
          bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T(0));
  for (int64_t i = 0; i < M; ++i) {
    const T* a = A + i * K;
    T* c = C + i * N;
    for (int64_t k = 0; k < K; ++k) {
      const T av = a[k];
      if (av == T(0)) continue;
      const T* b = B + k * N;
      for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A^T[K,M] * B[K,N]  (A stored K-major: A[K,M])
template <typename T>
void gemm_at(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C,
             bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T(0));
  for (int64_t k = 0; k < K; ++k) {
    const T* a = A + k * M;
    const T* b = B + k * N;
    for (int64_t i = 0; i < M; ++i) {
      const T av = a[i];
      if (av == T(0)) continue;
      T* c = C + i * N;
      for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] = A[M,K] * B^T[N,K]
template <typename T>
void gemm_bt(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C,
             bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T(0));
  for (int64_t i = 0; i < M; ++i) {
    const T* a = A + i * K;
    T* c = C + i * N;
    for (int64_t j = 0; j < N; ++j) {
      const T* b = B + j * K;
      T acc = 0;
      for (int64_t k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] += acc;
    }
  }
}

template <typename T>
NodePtr<T> make_node(Tensor<T> value, std::vector<NodePtr<T>> parents,
                     std::function<void(Node<T>&)> backprop) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (auto& p : parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

// Strides of `s` viewed through broadcast shape `out` (0 where broadcast).
inline Shape bcast_strides(const Shape& s, const Shape& out) {
  Shape st = strides_of(s);
  Shape r(out.size(), 0);
  size_t off = out.size() - s.size();
  for (size_t i = 0; i < s.size(); ++i) r[off + i] = (s[i] == 1) ? 0 : st[i];
  return r;
}

// Reduce `g` (broadcast shape) back onto `target` shape by summation.
template <typename T>
Tensor<T> reduce_to(const Tensor<T>& g, const Shape& target) {
  if (g.shape == target) return g;
  Tensor<T> out = Tensor<T>::zeros(target);
  const Shape ost = bcast_strides(target, g.shape);
  const size_t r = g.shape.size();
  Shape idx(r, 0);
  const T* gp = g.data.data();
  T* op = out.data.data();
  int64_t ooff = 0;
  for (int64_t lin = 0; lin < g.numel(); ++lin) {
    op[ooff] += gp[lin];
    for (size_t d = r; d-- > 0;) {
      idx[d]++;
      ooff += ost[d];
      if (idx[d] < g.shape[d]) break;
      idx[d] = 0;
      ooff -= ost[d] * g.shape[d];
    }
  }
  return out;
}

template <typename T, typename F>
Tensor<T> ew_binary_value(const Tensor<T>& a, const Tensor<T>& b, F f) {
  if (a.shape == b.shape) {
    Tensor<T> out(a.shape);
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  Shape os = broadcast_shape(a.shape, b.shape);
  Tensor<T> out(os);
  const Shape sa = bcast_strides(a.shape, os), sb = bcast_strides(b.shape, os);
  const size_t r = os.size();
  Shape idx(r, 0);
  int64_t ai = 0, bi = 0;
  for (int64_t lin = 0; lin < out.numel(); ++lin) {
    out[lin] = f(a[ai], b[bi]);
    for (size_t d = r; d-- > 0;) {
      idx[d]++;
      ai += sa[d];
      bi += sb[d];
      if (idx[d] < os[d]) break;
      idx[d] = 0;
      ai -= sa[d] * os[d];
      bi -= sb[d] * os[d];
    }
  }
  return out;
}

// Evaluates f(a_i, b_i, g_i) over the broadcast extent and accumulates into
// shape `target` — the workhorse for binary-op backward passes.
template <typename T, typename F>
Tensor<T> ew_binary_grad(const Tensor<T>& a, const Tensor<T>& b,
                         const Tensor<T>& g, const Shape& target, F f) {
  Tensor<T> out = Tensor<T>::zeros(target);
  const Shape& os = g.shape;
  const Shape sa = bcast_strides(a.shape, os), sb = bcast_strides(b.shape, os),
              st = bcast_strides(target, os);
  const size_t r = os.size();
  Shape idx(r, 0);
  int64_t ai = 0, bi = 0, ti = 0;
  for (int64_t lin = 0; lin < g.numel(); ++lin) {
    out[ti] += f(a[ai], b[bi], g[lin]);
    for (size_t d = r; d-- > 0;) {
      idx[d]++;
      ai += sa[d];
      bi += sb[d];
      ti += st[d];
      if (idx[d] < os[d]) break;
      idx[d] = 0;
      ai -= sa[d] * os[d];
      bi -= sb[d] * os[d];
      ti -= st[d] * os[d];
    }
  }
  return out;
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  for (int64_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

}  // namespace detail

// --- elementwise binary -----------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tensor<T> v = detail::ew_binary_value(a.value(), b.value(),
                                        [](T x, T y) { return x + y; });
  auto an = a.node(), bn = b.node();
  return Var<T>(detail::make_node<T>(
      std::move(v), {an, bn}, [an, bn](Node<T>& n) {
        if (an->requires_grad) {
          an->ensure_grad();
          detail::accumulate(an->grad, detail::reduce_to(n.grad, an->value.shape));
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          detail::accumulate(bn->grad, detail::reduce_to(n.grad, bn->value.shape));
        }
      }));
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  Tensor<T> v = detail::ew_binary_value(a.value(), b.value(),
                                        [](T x, T y) { return x - y; });
  auto an = a.node(), bn = b.node();
  return Var<T>(detail::make_node<T>(
      std::move(v), {an, bn}, [an, bn](Node<T>& n) {
        if (an->requires_grad) {
          an->ensure_grad();
          detail::accumulate(an->grad, detail::reduce_to(n.grad, an->value.shape));
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          Tensor<T> g = n.grad;
          for (auto& x : g.data) x = -x;
          detail::accumulate(bn->grad, detail::reduce_to(g, bn->value.shape));
        }
      }));
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tensor<T> v = detail::ew_binary_value(a.value(), b.value(),
                                        [](T x, T y) { return x * y; });
  auto an = a.node(), bn = b.node();
  return Var<T>(detail::make_node<T>(
      std::move(v), {an, bn}, [an, bn](Node<T>& n) {
        if (an->requires_grad) {
          an->ensure_grad();
          detail::accumulate(
              an->grad,
              detail::ew_binary_grad(an->value, bn->value, n.grad, an->value.shape,
                                     [](T, T y, T g) { return g * y; }));
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          detail::accumulate(
              bn->grad,
              detail::ew_binary_grad(an->value, bn->value, n.grad, bn->value.shape,
                                     [](T x, T, T g) { return g * x; }));
        }
      }));
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  Tensor<T> v = detail::ew_binary_value(a.value(), b.value(),
                                        [](T x, T y) { return x / y; });
  auto an = a.node(), bn = b.node();
  return Var<T>(detail::make_node<T>(
      std::move(v), {an, bn}, [an, bn](Node<T>& n) {
        if (an->requires_grad) {
          an->ensure_grad();
          detail::accumulate(
              an->grad,
              detail::ew_binary_grad(an->value, bn->value, n.grad, an->value.shape,
                                     [](T, T y, T g) { return g / y; }));
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          detail::accumulate(
              bn->grad,
              detail::ew_binary_grad(an->value, bn->value, n.grad, bn->value.shape,
                                     [](T x, T y, T g) { return -g * x / (y * y); }));
        }
      }));
}

template <typename T> Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T> Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T> Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <typename T> Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }
template <typename T> Var<T> operator*(const Var<T>& a, T s) { return mul(a, Var<T>::scalar(s)); }
template <typename T> Var<T> operator*(T s, const Var<T>& a) { return mul(a, Var<T>::scalar(s)); }
template <typename T> Var<T> operator+(const Var<T>& a, T s) { return add(a, Var<T>::scalar(s)); }
template <typename T> Var<T> operator-(const Var<T>& a, T s) { return sub(a, Var<T>::scalar(s)); }

// --- elementwise unary -------------------------------------------------------

namespace detail {
template <typename T, typename FV, typename FG>
Var<T> ew_unary(const Var<T>& a, FV fv, FG fg) {
  Tensor<T> v(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) v[i] = fv(a.value()[i]);
  auto an = a.node();
  return Var<T>(detail::make_node<T>(std::move(v), {an}, [an, fg](Node<T>& n) {
    an->ensure_grad();
    for (int64_t i = 0; i < n.value.numel(); ++i)
      an->grad[i] += n.grad[i] * fg(an->value[i], n.value[i]);
  }));
}
}  // namespace detail

template <typename T> Var<T> neg(const Var<T>& a) {
  return detail::ew_unary(a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}
template <typename T> Var<T> operator-(const Var<T>& a) { return neg(a); }
template <typename T> Var<T> exp(const Var<T>& a) {
  return detail::ew_unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}
template <typename T> Var<T> log(const Var<T>& a) {
  return detail::ew_unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}
template <typename T> Var<T> sqrt(const Var<T>& a) {
  return detail::ew_unary(a, [](T x) { return std::sqrt(x); },
                          [](T, T y) { return T(0.5) / y; });
}
template <typename T> Var<T> sin(const Var<T>& a) {
  return detail::ew_unary(a, [](T x) { return std::sin(x); }, [](T x, T) { return std::cos(x); });
}
template <typename T> Var<T> cos(const Var<T>& a) {
  return detail::ew_unary(a, [](T x) { return std::cos(x); }, [](T x, T) { return -std::sin(x); });
}
template <typename T> Var<T> relu(const Var<T>& a) {
  return detail::ew_unary(a, [](T x) { return x > T(0) ? x : T(0); },
                          [](T x, T) { return x > T(0) ? T(1) : T(0); });
}
template <typename T> Var<T> square(const Var<T>& a) {
  return detail::ew_unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}
/// Clamp with zero gradient outside (lo, hi).
template <typename T> Var<T> clamp(const Var<T>& a, T lo, T hi) {
  return detail::ew_unary(
      a, [lo, hi](T x) { return std::min(hi, std::max(lo, x)); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

// --- reductions ---------------------------------------------------------------

/// Sum over the given axes (keepdims). Empty axes = sum everything to a scalar.
template <typename T>
Var<T> sum(const Var<T>& a, std::vector<int64_t> axes = {}, bool keepdims = false) {
  const Shape& in = a.shape();
  std::vector<bool> red(in.size(), false);
  if (axes.empty()) {
    red.assign(in.size(), true);
  } else {
    for (int64_t ax : axes) red[static_cast<size_t>(ax)] = true;
  }
  Shape kshape(in.size());
  for (size_t i = 0; i < in.size(); ++i) kshape[i] = red[i] ? 1 : in[i];

  Tensor<T> v = detail::reduce_to(a.value(), kshape);
  Shape oshape;
  if (keepdims) {
    oshape = kshape;
  } else {
    for (size_t i = 0; i < in.size(); ++i)
      if (!red[i]) oshape.push_back(in[i]);
    if (oshape.empty()) oshape.push_back(1);
  }
  v = v.reshaped(oshape);
  auto an = a.node();
  return Var<T>(detail::make_node<T>(std::move(v), {an}, [an, kshape](Node<T>& n) {
    an->ensure_grad();
    // broadcast grad (kshape) back over the input extent
    Tensor<T> g = n.grad.reshaped(kshape);
    const Shape st = detail::bcast_strides(kshape, an->value.shape);
    const size_t r = an->value.shape.size();
    Shape idx(r, 0);
    int64_t gi = 0;
    for (int64_t lin = 0; lin < an->value.numel(); ++lin) {
      an->grad[lin] += g[gi];
      for (size_t d = r; d-- > 0;) {
        idx[d]++;
        gi += st[d];
        if (idx[d] < an->value.shape[d]) break;
        idx[d] = 0;
        gi -= st[d] * an->value.shape[d];
      }
    }
  }));
}

template <typename T>
Var<T> mean(const Var<T>& a, std::vector<int64_t> axes = {}, bool keepdims = false) {
  int64_t n = 1;
  if (axes.empty()) {
    n = a.numel();
  } else {
    for (int64_t ax : axes) n *= a.shape()[static_cast<size_t>(ax)];
  }
  return sum(a, axes, keepdims) * (T(1) / static_cast<T>(n));
}

// --- linear algebra ------------------------------------------------------------

/// 2-D matrix product [M,K]x[K,N] -> [M,N].
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    throw ConfigError("matmul shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  Tensor<T> v(Shape{M, N});
  detail::gemm(M, N, K, a.value().data.data(), b.value().data.data(), v.data.data(), false);
  auto an = a.node(), bn = b.node();
  return Var<T>(detail::make_node<T>(std::move(v), {an, bn}, [an, bn, M, K, N](Node<T>& n) {
    if (an->requires_grad) {
      an->ensure_grad();
      // dA = G * B^T
      detail::gemm_bt(M, K, N, n.grad.data.data(), bn->value.data.data(),
                      an->grad.data.data(), true);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      // dB = A^T * G
      detail::gemm_at(K, N, M, an->value.data.data(), n.grad.data.data(),
                      bn->grad.data.data(), true);
    }
  }));
}

template <typename T>
Var<T> transpose2d(const Var<T>& a) {
  if (a.shape().size() != 2) throw ConfigError("transpose2d expects rank 2");
  const int64_t R = a.shape()[0], C = a.shape()[1];
  Tensor<T> v(Shape{C, R});
  for (int64_t i = 0; i < R; ++i)
    for (int64_t j = 0; j < C; ++j) v[j * R + i] = a.value()[i * C + j];
  auto an = a.node();
  return Var<T>(detail::make_node<T>(std::move(v), {an}, [an, R, C](Node<T>& n) {
    an->ensure_grad();
    for (int64_t i = 0; i < R; ++i)
      for (int64_t j = 0; j < C; ++j) an->grad[i * C + j] += n.grad[j * R + i];
  }));
}

/// out = x * W^T + b, x:[N,Din], W:[Dout,Din], b:[Dout]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || x.shape()[1] != w.shape()[1])
    throw ConfigError("linear shapes " + shape_str(x.shape()) + " , " + shape_str(w.shape()));
  const int64_t N = x.shape()[0], Din = x.shape()[1], Dout = w.shape()[0];
  Tensor<T> v(Shape{N, Dout});
  detail::gemm_bt(N, Dout, Din, x.value().data.data(), w.value().data.data(),
                  v.data.data(), true);
  auto xn = x.node(), wn = w.node();
  Var<T> y(detail::make_node<T>(std::move(v), {xn, wn}, [xn, wn, N, Din, Dout](Node<T>& n) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      // dX = G * W
      detail::gemm(N, Din, Dout, n.grad.data.data(), wn->value.data.data(),
                   xn->grad.data.data(), true);
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      // dW = G^T * X
      detail::gemm_at(Dout, Din, N, n.grad.data.data(), xn->value.data.data(),
                      wn->grad.data.data(), true);
    }
  }));
  return b.defined() ? add(y, b) : y;
}

// --- shape ops -------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, Shape s) {
  Tensor<T> v = a.value().reshaped(s);
  auto an = a.node();
  return Var<T>(detail::make_node<T>(std::move(v), {an}, [an](Node<T>& n) {
    an->ensure_grad();
    for (int64_t i = 0; i < n.value.numel(); ++i) an->grad[i] += n.grad[i];
  }));
}

/// Concatenate along `axis`; backward slices grads apart. Bit-exact inverse of slice.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int64_t axis) {
  if (parts.empty()) throw ConfigError("concat of nothing");
  Shape os = parts[0].shape();
  int64_t total = 0;
  for (auto& p : parts) {
    if (static_cast<int64_t>(p.shape().size()) != static_cast<int64_t>(os.size()))
      throw ConfigError("concat rank mismatch");
    total += p.shape()[static_cast<size_t>(axis)];
  }
  os[static_cast<size_t>(axis)] = total;
  Tensor<T> v(os);
  // outer = product of dims before axis, inner = product after
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= os[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < os.size(); ++i) inner *= os[i];
  int64_t off = 0;
  for (auto& p : parts) {
    const int64_t len = p.shape()[static_cast<size_t>(axis)] * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(p.value().data.data() + o * len, len,
                  v.data.data() + o * total * inner + off);
    off += len;
  }
  std::vector<NodePtr<T>> pn;
  for (auto& p : parts) pn.push_back(p.node());
  return Var<T>(detail::make_node<T>(
      std::move(v), pn, [pn, axis, outer, inner, total](Node<T>& n) {
        int64_t off = 0;
        for (auto& p : pn) {
          const int64_t len = p->value.shape[static_cast<size_t>(axis)] * inner;
          if (p->requires_grad) {
            p->ensure_grad();
            for (int64_t o = 0; o < outer; ++o)
              for (int64_t i = 0; i < len; ++i)
                p->grad[o * len + i] += n.grad[o * total * inner + off + i];
          }
          off += len;
        }
      }));
}

template <typename T>
Var<T> slice(const Var<T>& a, int64_t axis, int64_t start, int64_t len) {
  const Shape& in = a.shape();
  if (start < 0 || start + len > in[static_cast<size_t>(axis)])
    throw ConfigError("slice out of range");
  Shape os = in;
  os[static_cast<size_t>(axis)] = len;
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= in[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < in.size(); ++i) inner *= in[i];
  const int64_t in_ax = in[static_cast<size_t>(axis)];
  Tensor<T> v(os);
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(a.value().data.data() + (o * in_ax + start) * inner, len * inner,
                v.data.data() + o * len * inner);
  auto an = a.node();
  return Var<T>(detail::make_node<T>(
      std::move(v), {an}, [an, outer, inner, in_ax, start, len](Node<T>& n) {
        an->ensure_grad();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < len * inner; ++i)
            an->grad[(o * in_ax + start) * inner + i] += n.grad[o * len * inner + i];
      }));
}

// --- softmax ---------------------------------------------------------------------

/// Row softmax over the last dimension of a rank-2 tensor.
template <typename T>
Var<T> softmax_rows(const Var<T>& a) {
  if (a.shape().size() != 2) throw ConfigError("softmax_rows expects rank 2");
  const int64_t R = a.shape()[0], C = a.shape()[1];
  Tensor<T> v(a.shape());
  for (int64_t i = 0; i < R; ++i) {
    const T* x = a.value().data.data() + i * C;
    T* y = v.data.data() + i * C;
    T mx = x[0];
    for (int64_t j = 1; j < C; ++j) mx = std::max(mx, x[j]);
    T s = 0;
    for (int64_t j = 0; j < C; ++j) s += (y[j] = std::exp(x[j] - mx));
    for (int64_t j = 0; j < C; ++j) y[j] /= s;
  }
  auto an = a.node();
  return Var<T>(detail::make_node<T>(std::move(v), {an}, [an, R, C](Node<T>& n) {
    an->ensure_grad();
    for (int64_t i = 0; i < R; ++i) {
      const T* y = n.value.data.data() + i * C;
      const T* g = n.grad.data.data() + i * C;
      T dot = 0;
      for (int64_t j = 0; j < C; ++j) dot += y[j] * g[j];
      for (int64_t j = 0; j < C; ++j) an->grad[i * C + j] += y[j] * (g[j] - dot);
    }
  }));
}

// --- backward ----------------------------------------------------------------------

/// Reverse-mode sweep from a scalar root. Gradients of every reachable node are
/// overwritten (zeroed, then accumulated) — one backward per graph.
template <typename T>
void backward(const Var<T>& root) {
  if (root.numel() != 1) throw ConfigError("backward: root must be scalar");
  // iterative topological order
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.push_back({root.node().get(), 0});
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order) {
    n->grad = Tensor<T>::zeros(n->value.shape);
    n->grad_ready = true;
  }
  root.node()->grad.data[0] = T(1);
  for (size_t i = order.size(); i-- > 0;) {
    Node<T>* n = order[i];
    if (n->backprop) n->backprop(*n);
  }
}

}  // namespace cvu
