#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stam/errors.hpp"
#include "stam/graph.hpp"
#include "stam/tensor.hpp"

namespace stam {

inline constexpr double kLayerNormEps = 1e-6;

namespace kernels {

// y[M, Dout] (+)= x[M, Din] * W[Dout, Din]^T. The inner loop runs over Dout
// with a transposed copy of W so it stays contiguous.
template <typename T>
void matmul_nt(const T* x, const T* w, T* y, std::size_t m, std::size_t din,
               std::size_t dout) {
  std::vector<T> wt(din * dout);
  for (std::size_t j = 0; j < dout; ++j)
    for (std::size_t k = 0; k < din; ++k) wt[k * dout + j] = w[j * din + k];
  for (std::size_t i = 0; i < m; ++i) {
    T* yi = y + i * dout;
    const T* xi = x + i * din;
    for (std::size_t k = 0; k < din; ++k) {
      const T a = xi[k];
      const T* wk = wt.data() + k * dout;
      for (std::size_t j = 0; j < dout; ++j) yi[j] += a * wk[j];
    }
  }
}

// dx[M, Din] += dy[M, Dout] * W[Dout, Din]
template <typename T>
void matmul_nn_acc(const T* dy, const T* w, T* dx, std::size_t m,
                   std::size_t din, std::size_t dout) {
  for (std::size_t i = 0; i < m; ++i) {
    T* dxi = dx + i * din;
    const T* dyi = dy + i * dout;
    for (std::size_t j = 0; j < dout; ++j) {
      const T a = dyi[j];
      const T* wj = w + j * din;
      for (std::size_t k = 0; k < din; ++k) dxi[k] += a * wj[k];
    }
  }
}

// dW[Dout, Din] += dy[M, Dout]^T * x[M, Din]
template <typename T>
void matmul_tn_acc(const T* dy, const T* x, T* dw, std::size_t m,
                   std::size_t din, std::size_t dout) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* xi = x + i * din;
    const T* dyi = dy + i * dout;
    for (std::size_t j = 0; j < dout; ++j) {
      const T a = dyi[j];
      T* dwj = dw + j * din;
      for (std::size_t k = 0; k < din; ++k) dwj[k] += a * xi[k];
    }
  }
}

template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T s{0};
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
void softmax_row(const T* x, T* y, std::size_t k) {
  T mx = x[0];
  for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x[j]);
  T sum{0};
  for (std::size_t j = 0; j < k; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  const T inv = T{1} / sum;
  for (std::size_t j = 0; j < k; ++j) y[j] *= inv;
}

}  // namespace kernels

// y = x W^T + b over the last axis of x.
template <typename T>
Var linear(Graph<T>& g, Var x, Var w, std::optional<Var> b = std::nullopt) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& wv = g.value(w);
  if (wv.rank() != 2 || xv.rank() == 0 || xv.last_dim() != wv.dim(1)) {
    throw DimensionError("linear: input shape " + shape_str(xv.shape()) +
                         " does not match weight shape " + shape_str(wv.shape()));
  }
  const std::size_t din = wv.dim(1), dout = wv.dim(0), m = xv.rows();
  if (b && (g.value(*b).rank() != 1 || g.value(*b).dim(0) != dout)) {
    throw DimensionError("linear: bias shape " + shape_str(g.value(*b).shape()) +
                         " does not match weight shape " + shape_str(wv.shape()));
  }
  Shape out_shape = xv.shape();
  out_shape.back() = dout;
  Tensor<T> y(out_shape);
  if (b) {
    const T* bp = g.value(*b).ptr();
    for (std::size_t i = 0; i < m; ++i)
      std::copy(bp, bp + dout, y.ptr() + i * dout);
  }
  kernels::matmul_nt(xv.ptr(), wv.ptr(), y.ptr(), m, din, dout);
  std::vector<Var> inputs{x, w};
  if (b) inputs.push_back(*b);
  return g.record(std::move(y), inputs, [=](Graph<T>& g, const Tensor<T>&, std::span<const T> dy) {
    if (g.requires_grad(x)) {
      kernels::matmul_nn_acc(dy.data(), g.value(w).ptr(), g.grad(x).data(), m, din, dout);
    }
    if (g.requires_grad(w)) {
      kernels::matmul_tn_acc(dy.data(), g.value(x).ptr(), g.grad(w).data(), m, din, dout);
    }
    if (b && g.requires_grad(*b)) {
      auto db = g.grad(*b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < dout; ++j) db[j] += dy[i * dout + j];
    }
  });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  if (av.shape() != bv.shape()) {
    throw DimensionError("add: shapes " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()) + " differ");
  }
  Tensor<T> y(av.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = av[i] + bv[i];
  return g.record(std::move(y), {a, b}, [=](Graph<T>& g, const Tensor<T>&, std::span<const T> dy) {
    for (Var v : {a, b}) {
      if (!g.requires_grad(v)) continue;
      auto d = g.grad(v);
      for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
    }
  });
}

template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  if (av.shape() != bv.shape()) {
    throw DimensionError("mul: shapes " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()) + " differ");
  }
  Tensor<T> y(av.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = av[i] * bv[i];
  return g.record(std::move(y), {a, b}, [=](Graph<T>& g, const Tensor<T>&, std::span<const T> dy) {
    const Tensor<T>& av = g.value(a);
    const Tensor<T>& bv = g.value(b);
    if (g.requires_grad(a)) {
      auto d = g.grad(a);
      for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i] * bv[i];
    }
    if (g.requires_grad(b)) {
      auto d = g.grad(b);
      for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i] * av[i];
    }
  });
}

template <typename T>
Var sum(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  T s{0};
  for (T v : xv.data()) s += v;
  return g.record(Tensor<T>::scalar(s), {x}, [=](Graph<T>& g, const Tensor<T>&, std::span<const T> dy) {
    auto d = g.grad(x);
    for (auto& v : d) v += dy[0];
  });
}

template <typename T>
Var reshape(Graph<T>& g, Var x, Shape shape) {
  Tensor<T> y = g.value(x).reshaped(std::move(shape));
  return g.record(std::move(y), {x}, [=](Graph<T>& g, const Tensor<T>&, std::span<const T> dy) {
    auto d = g.grad(x);
    for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
  });
}

// Mean over every axis but the last: [..., D] -> [D].
template <typename T>
Var mean_rows(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  const std::size_t d = xv.last_dim(), r = xv.rows();
  Tensor<T> y(Shape{d});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < d; ++j) y[j] += xv[i * d + j];
  const T inv = T{1} / static_cast<T>(r);
  for (std::size_t j = 0; j < d; ++j) y[j] *= inv;
  return g.record(std::move(y), {x}, [=](Graph<T>& g, const Tensor<T>&, std::span<const T> dy) {
    auto dx = g.grad(x);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < d; ++j) dx[i * d + j] += dy[j] * inv;
  });
}

// Row-wise softmax over the last axis, with max subtraction.
template <typename T>
Var softmax(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  if (xv.rank() == 0) throw DimensionError("softmax: empty last axis");
  const std::size_t k = xv.last_dim(), r = xv.rows();
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < r; ++i)
    kernels::softmax_row(xv.ptr() + i * k, y.ptr() + i * k, k);
  return g.record(std::move(y), {x}, [=](Graph<T>& g, const Tensor<T>& y,
                                         std::span<const T> dy) {
    auto dx = g.grad(x);
    for (std::size_t i = 0; i < r; ++i) {
      const T* yi = y.ptr() + i * k;
      const T* dyi = dy.data() + i * k;
      T s{0};
      for (std::size_t j = 0; j < k; ++j) s += dyi[j] * yi[j];
      for (std::size_t j = 0; j < k; ++j) dx[i * k + j] += yi[j] * (dyi[j] - s);
    }
  });
}

// Per-row normalization over the last axis (population variance), followed
// by the affine map gamma * xhat + beta.
template <typename T>
Var layer_norm(Graph<T>& g, Var x, Var gamma, Var beta, T eps = T(kLayerNormEps)) {
  const Tensor<T>& xv = g.value(x);
  const std::size_t d = xv.last_dim(), r = xv.rows();
  if (xv.rank() == 0 || g.value(gamma).shape() != Shape{d} ||
      g.value(beta).shape() != Shape{d}) {
    throw DimensionError("layer_norm: input shape " + shape_str(xv.shape()) +
                         " does not match gamma " + shape_str(g.value(gamma).shape()) +
                         " / beta " + shape_str(g.value(beta).shape()));
  }
  const T* gp = g.value(gamma).ptr();
  const T* bp = g.value(beta).ptr();
  Tensor<T> y(xv.shape());
  std::vector<T> xhat(xv.numel());
  std::vector<T> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* xi = xv.ptr() + i * d;
    T mean{0};
    for (std::size_t j = 0; j < d; ++j) mean += xi[j];
    mean /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<T>(d);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xi[j] - mean) * is;
      xhat[i * d + j] = h;
      y[i * d + j] = gp[j] * h + bp[j];
    }
  }
  return g.record(std::move(y), {x, gamma, beta},
                  [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Graph<T>& g, const Tensor<T>&, std::span<const T> dy) {
    const T* gp = g.value(gamma).ptr();
    if (g.requires_grad(gamma)) {
      auto dg = g.grad(gamma);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) dg[j] += dy[i * d + j] * xhat[i * d + j];
    }
    if (g.requires_grad(beta)) {
      auto db = g.grad(beta);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) db[j] += dy[i * d + j];
    }
    if (g.requires_grad(x)) {
      auto dx = g.grad(x);
      const T invd = T{1} / static_cast<T>(d);
      for (std::size_t i = 0; i < r; ++i) {
        T mean_dh{0}, mean_dh_h{0};
        for (std::size_t j = 0; j < d; ++j) {
          const T dh = dy[i * d + j] * gp[j];
          mean_dh += dh;
          mean_dh_h += dh * xhat[i * d + j];
        }
        mean_dh *= invd;
        mean_dh_h *= invd;
        for (std::size_t j = 0; j < d; ++j) {
          const T dh = dy[i * d + j] * gp[j];
          dx[i * d + j] += inv_std[i] * (dh - mean_dh - xhat[i * d + j] * mean_dh_h);
        }
      }
    }
  });
}

// Exact GeLU: x * Phi(x).
template <typename T>
Var gelu(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  Tensor<T> y(xv.shape());
  const T inv_sqrt2 = T{1} / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < y.numel(); ++i)
    y[i] = xv[i] * T(0.5) * (T{1} + std::erf(xv[i] * inv_sqrt2));
  return g.record(std::move(y), {x}, [=](Graph<T>& g, const Tensor<T>&, std::span<const T> dy) {
    const Tensor<T>& xv = g.value(x);
    auto dx = g.grad(x);
    const T inv_sqrt_2pi = T{1} / std::sqrt(T{2} * std::numbers::pi_v<T>);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const T v = xv[i];
      const T cdf = T(0.5) * (T{1} + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      dx[i] += dy[i] * (cdf + v * pdf);
    }
  });
}

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Var cross_entropy(Graph<T>& g, Var logits, std::span<const std::size_t> labels) {
  const Tensor<T>& lv = g.value(logits);
  if (lv.rank() != 2 || lv.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits shape " + shape_str(lv.shape()) +
                         " does not match " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t b = lv.dim(0), c = lv.dim(1);
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= c) {
      throw LabelError("cross_entropy: label " + std::to_string(labels[i]) +
                           " at index " + std::to_string(i) + " is outside [0, " +
                           std::to_string(c) + ")",
                       i);
    }
  }
  std::vector<T> probs(b * c);
  T loss{0};
  for (std::size_t i = 0; i < b; ++i) {
    const T* li = lv.ptr() + i * c;
    kernels::softmax_row(li, probs.data() + i * c, c);
    T mx = li[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, li[j]);
    T s{0};
    for (std::size_t j = 0; j < c; ++j) s += std::exp(li[j] - mx);
    loss += std::log(s) + mx - li[labels[i]];
  }
  loss /= static_cast<T>(b);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return g.record(Tensor<T>::scalar(loss), {logits},
                  [=, probs = std::move(probs), lab = std::move(lab)](
                      Graph<T>& g, const Tensor<T>&, std::span<const T> dy) {
    auto dl = g.grad(logits);
    const T s = dy[0] / static_cast<T>(b);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < c; ++j)
        dl[i * c + j] += s * (probs[i * c + j] - (j == lab[i] ? T{1} : T{0}));
  });
}

// [G, S, D] with a token [D] -> [G, S + 1, D], the token placed first in
// every group.
template <typename T>
Var prepend_token(Graph<T>& g, Var x, Var token) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& tv = g.value(token);
  if (xv.rank() != 3 || tv.shape() != Shape{xv.dim(2)}) {
    throw DimensionError("prepend_token: sequence shape " + shape_str(xv.shape()) +
                         " does not match token shape " + shape_str(tv.shape()));
  }
  const std::size_t groups = xv.dim(0), s = xv.dim(1), d = xv.dim(2);
  Tensor<T> y(Shape{groups, s + 1, d});
  for (std::size_t gi = 0; gi < groups; ++gi) {
    T* out = y.ptr() + gi * (s + 1) * d;
    std::copy(tv.ptr(), tv.ptr() + d, out);
    std::copy(xv.ptr() + gi * s * d, xv.ptr() + (gi + 1) * s * d, out + d);
  }
  return g.record(std::move(y), {x, token}, [=](Graph<T>& g, const Tensor<T>&, std::span<const T> dy) {
    if (g.requires_grad(token)) {
      auto dt = g.grad(token);
      for (std::size_t gi = 0; gi < groups; ++gi)
        for (std::size_t j = 0; j < d; ++j) dt[j] += dy[gi * (s + 1) * d + j];
    }
    if (g.requires_grad(x)) {
      auto dx = g.grad(x);
      for (std::size_t gi = 0; gi < groups; ++gi)
        for (std::size_t i = 0; i < s * d; ++i)
          dx[gi * s * d + i] += dy[gi * (s + 1) * d + d + i];
    }
  });
}

// [G, S, D] -> [G, D]: token `index` of every group.
template <typename T>
Var select_token(Graph<T>& g, Var x, std::size_t index) {
  const Tensor<T>& xv = g.value(x);
  if (xv.rank() != 3 || index >= xv.dim(1)) {
    throw DimensionError("select_token: index " + std::to_string(index) +
                         " invalid for shape " + shape_str(xv.shape()));
  }
  const std::size_t groups = xv.dim(0), s = xv.dim(1), d = xv.dim(2);
  Tensor<T> y(Shape{groups, d});
  for (std::size_t gi = 0; gi < groups; ++gi)
    std::copy_n(xv.ptr() + (gi * s + index) * d, d, y.ptr() + gi * d);
  return g.record(std::move(y), {x}, [=](Graph<T>& g, const Tensor<T>&, std::span<const T> dy) {
    auto dx = g.grad(x);
    for (std::size_t gi = 0; gi < groups; ++gi)
      for (std::size_t j = 0; j < d; ++j) dx[(gi * s + index) * d + j] += dy[gi * d + j];
  });
}

// Stacks equally shaped tensors along a new leading axis.
template <typename T>
Var stack(Graph<T>& g, const std::vector<Var>& xs) {
  if (xs.empty()) throw DimensionError("stack: no inputs");
  const Shape inner = g.value(xs[0]).shape();
  const std::size_t n = shape_numel(inner);
  Shape out_shape{xs.size()};
  out_shape.insert(out_shape.end(), inner.begin(), inner.end());
  Tensor<T> y(out_shape);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (g.value(xs[i]).shape() != inner) {
      throw DimensionError("stack: shape " + shape_str(g.value(xs[i]).shape()) +
                           " differs from " + shape_str(inner));
    }
    std::copy_n(g.value(xs[i]).ptr(), n, y.ptr() + i * n);
  }
  return g.record(std::move(y), xs, [=](Graph<T>& g, const Tensor<T>&, std::span<const T> dy) {
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (!g.requires_grad(xs[i])) continue;
      auto dx = g.grad(xs[i]);
      for (std::size_t j = 0; j < n; ++j) dx[j] += dy[i * n + j];
    }
  });
}

// Rows [begin, end) of a matrix.
template <typename T>
Var slice_rows(Graph<T>& g, Var x, std::size_t begin, std::size_t end) {
  const Tensor<T>& xv = g.value(x);
  if (xv.rank() != 2 || begin >= end || end > xv.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for shape " +
                         shape_str(xv.shape()));
  }
  const std::size_t c = xv.dim(1);
  Tensor<T> y(Shape{end - begin, c},
              std::vector<T>(xv.ptr() + begin * c, xv.ptr() + end * c));
  return g.record(std::move(y), {x}, [=](Graph<T>& g, const Tensor<T>&, std::span<const T> dy) {
    auto dx = g.grad(x);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[begin * c + i] += dy[i];
  });
}

}  // namespace stam
