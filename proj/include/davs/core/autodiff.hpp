// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode autodiff on dense tensors. A dynamic tape is built as
// ops execute; Var::backward() walks it once in reverse topological order.
// Templated on the scalar type: float for training (so checkpoints hold the
// exact master weights), double for finite-difference gradient validation.

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "davs/core/error.hpp"
#include "davs/core/tensor.hpp"

namespace davs::core {

// Thread-local gradient mode. When disabled, ops run forward-only and build
// no graph (used for evaluation and for classifier steps on constant
// features).
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward;

  Tensor<T>& grad_buf() {
    if (grad.numel() != value.numel()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;

  explicit Var(Tensor<T> v, bool requires_grad = false)
      : n_(std::make_shared<Node<T>>()) {
    n_->value = std::move(v);
    n_->requires_grad = requires_grad;
  }

  bool defined() const { return n_ != nullptr; }

  const Tensor<T>& value() const { return n_->value; }
  Tensor<T>& mutable_value() { return n_->value; }
  const Shape& shape() const { return n_->value.shape(); }
  long numel() const { return n_->value.numel(); }

  bool requires_grad() const { return n_ && n_->requires_grad; }
  void set_requires_grad(bool rg) {
    DAVS_CHECK(n_ != nullptr, "set_requires_grad on undefined Var");
    DAVS_CHECK(!n_->backward || rg,
               "cannot clear requires_grad on a non-leaf Var");
    n_->requires_grad = rg;
  }

  bool has_grad() const { return n_ && n_->grad.numel() == n_->value.numel(); }

  // Gradient of the last backward() that reached this Var. Zeros if none did.
  Tensor<T> grad() const {
    if (has_grad()) return n_->grad;
    return Tensor<T>(n_->value.shape());
  }

  void zero_grad() {
    if (n_) n_->grad = Tensor<T>();
  }

  T item() const {
    DAVS_CHECK(numel() == 1, "item() requires a one-element tensor");
    return n_->value[0];
  }

  // Same value, cut from the graph. Never requires grad.
  Var detach() const {
    DAVS_CHECK(n_ != nullptr, "detach on undefined Var");
    return Var(n_->value, false);
  }

  std::shared_ptr<Node<T>> node() const { return n_; }

  // Builds an op-result Var. Graph edges and the backward closure are only
  // kept when grad mode is on and some parent participates in gradients; the
  // pruning makes detach() and NoGradGuard structurally exact (untouched
  // parameters hold no grad buffer at all).
  static Var from_op(Tensor<T> value, std::vector<Var> parents,
                     std::function<void(Node<T>&)> backward) {
    Var out(std::move(value), false);
    bool rg = false;
    if (grad_mode()) {
      for (const auto& p : parents) rg = rg || p.requires_grad();
    }
    if (rg) {
      out.n_->requires_grad = true;
      out.n_->backward = std::move(backward);
      out.n_->parents.reserve(parents.size());
      for (auto& p : parents) out.n_->parents.push_back(p.node());
    }
    return out;
  }

  // Reverse pass from a scalar root. Accumulates into .grad of every
  // requires_grad Var reachable through the tape.
  void backward() {
    DAVS_CHECK(n_ != nullptr, "backward on undefined Var");
    DAVS_CHECK(numel() == 1, "backward requires a scalar root");
    if (!n_->requires_grad) return;

    std::vector<Node<T>*> topo;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    visited.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node<T>* p = node->parents[idx++].get();
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        topo.push_back(node);
        stack.pop_back();
      }
    }

    n_->grad_buf().fill(T(0));
    n_->grad[0] = T(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      if ((*it)->backward) (*it)->backward(**it);
    }
  }

 private:
  std::shared_ptr<Node<T>> n_;
};

namespace detail {

// Accumulates g into p's grad buffer if p wants gradients.
template <typename T>
void acc(const std::shared_ptr<Node<T>>& p, const T* g, long n) {
  if (!p->requires_grad) return;
  T* buf = p->grad_buf().data();
  for (long i = 0; i < n; ++i) buf[i] += g[i];
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T, typename F, typename DF>
Var<T> ew_unary(const Var<T>& x, F f, DF df) {
  const Tensor<T>& xv = x.value();
  Tensor<T> y(xv.shape());
  const long n = xv.numel();
  for (long i = 0; i < n; ++i) y[i] = f(xv[i]);
  auto xn = x.node();
  return Var<T>::from_op(std::move(y), {x}, [xn, df, n](Node<T>& self) {
    if (!xn->requires_grad) return;
    T* gx = xn->grad_buf().data();
    const T* gy = self.grad.data();
    const T* xd = xn->value.data();
    const T* yd = self.value.data();
    for (long i = 0; i < n; ++i) gx[i] += gy[i] * df(xd[i], yd[i]);
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  DAVS_CHECK(a.value().same_shape(b.value()), "add: shape mismatch");
  Tensor<T> y(a.shape());
  const long n = y.numel();
  for (long i = 0; i < n; ++i) y[i] = a.value()[i] + b.value()[i];
  auto an = a.node(), bn = b.node();
  return Var<T>::from_op(std::move(y), {a, b}, [an, bn, n](Node<T>& self) {
    detail::acc(an, self.grad.data(), n);
    detail::acc(bn, self.grad.data(), n);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  DAVS_CHECK(a.value().same_shape(b.value()), "sub: shape mismatch");
  Tensor<T> y(a.shape());
  const long n = y.numel();
  for (long i = 0; i < n; ++i) y[i] = a.value()[i] - b.value()[i];
  auto an = a.node(), bn = b.node();
  return Var<T>::from_op(std::move(y), {a, b}, [an, bn, n](Node<T>& self) {
    detail::acc(an, self.grad.data(), n);
    if (bn->requires_grad) {
      T* gb = bn->grad_buf().data();
      const T* g = self.grad.data();
      for (long i = 0; i < n; ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  DAVS_CHECK(a.value().same_shape(b.value()), "mul: shape mismatch");
  Tensor<T> y(a.shape());
  const long n = y.numel();
  for (long i = 0; i < n; ++i) y[i] = a.value()[i] * b.value()[i];
  auto an = a.node(), bn = b.node();
  return Var<T>::from_op(std::move(y), {a, b}, [an, bn, n](Node<T>& self) {
    const T* g = self.grad.data();
    if (an->requires_grad) {
      T* ga = an->grad_buf().data();
      const T* bv = bn->value.data();
      for (long i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
    }
    if (bn->requires_grad) {
      T* gb = bn->grad_buf().data();
      const T* av = an->value.data();
      for (long i = 0; i < n; ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  return ew_unary(
      x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T s) {
  return ew_unary(
      x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

// s - x (used for hinge terms like 1 - d).
template <typename T>
Var<T> rsub_scalar(T s, const Var<T>& x) {
  return ew_unary(
      x, [s](T v) { return s - v; }, [](T, T) { return T(-1); });
}

template <typename T>
Var<T> neg(const Var<T>& x) {
  return scale(x, T(-1));
}

template <typename T>
Var<T> abs_val(const Var<T>& x) {
  return ew_unary(
      x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return ew_unary(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  return ew_unary(
      x, [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

// Values limited to [lo, hi]; gradient passes through the interior only.
template <typename T>
Var<T> clamp_val(const Var<T>& x, T lo, T hi) {
  DAVS_CHECK(lo < hi, "clamp_val: lo must be below hi");
  return ew_unary(
      x, [lo, hi](T v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](T v, T) { return (v < lo || v > hi) ? T(0) : T(1); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return ew_unary(
      x,
      [](T v) {
        if (v >= T(0)) {
          const T e = std::exp(-v);
          return T(1) / (T(1) + e);
        }
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh_val(const Var<T>& x) {
  return ew_unary(
      x, [](T v) { return std::tanh(v); },
      [](T, T y) { return T(1) - y * y; });
}

// Natural log. Inputs are clamped to lo before the log so adversarial score
// terms stay finite in float; gradients use the clamped argument.
template <typename T>
Var<T> log_clamped(const Var<T>& x, T lo) {
  return ew_unary(
      x, [lo](T v) { return std::log(v < lo ? lo : v); },
      [lo](T v, T) { return v < lo ? T(0) : T(1) / v; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  const long n = x.numel();
  T s = T(0);
  const T* d = x.value().data();
  for (long i = 0; i < n; ++i) s += d[i];
  auto xn = x.node();
  return Var<T>::from_op(Tensor<T>::scalar(s), {x}, [xn, n](Node<T>& self) {
    if (!xn->requires_grad) return;
    T* gx = xn->grad_buf().data();
    const T g = self.grad[0];
    for (long i = 0; i < n; ++i) gx[i] += g;
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  DAVS_CHECK(x.numel() > 0, "mean_all of empty tensor");
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> y = x.value().reshaped(std::move(shape));
  auto xn = x.node();
  const long n = x.numel();
  return Var<T>::from_op(std::move(y), {x}, [xn, n](Node<T>& self) {
    detail::acc(xn, self.grad.data(), n);
  });
}

template <typename T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  DAVS_CHECK(a.shape().size() == 2 && b.shape().size() == 2,
             "concat_cols expects rank-2 inputs");
  DAVS_CHECK(a.shape()[0] == b.shape()[0], "concat_cols: row count mismatch");
  const long n = a.shape()[0], da = a.shape()[1], db = b.shape()[1];
  Tensor<T> y({n, da + db});
  for (long i = 0; i < n; ++i) {
    std::copy_n(a.value().data() + i * da, da, y.data() + i * (da + db));
    std::copy_n(b.value().data() + i * db, db, y.data() + i * (da + db) + da);
  }
  auto an = a.node(), bn = b.node();
  return Var<T>::from_op(
      std::move(y), {a, b}, [an, bn, n, da, db](Node<T>& self) {
        const T* g = self.grad.data();
        if (an->requires_grad) {
          T* ga = an->grad_buf().data();
          for (long i = 0; i < n; ++i)
            for (long j = 0; j < da; ++j) ga[i * da + j] += g[i * (da + db) + j];
        }
        if (bn->requires_grad) {
          T* gb = bn->grad_buf().data();
          for (long i = 0; i < n; ++i)
            for (long j = 0; j < db; ++j)
              gb[i * db + j] += g[i * (da + db) + da + j];
        }
      });
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::vector<long> idx) {
  DAVS_CHECK(x.shape().size() == 2, "gather_rows expects a rank-2 input");
  const long rows = x.shape()[0], d = x.shape()[1];
  for (long i : idx)
    DAVS_CHECK(i >= 0 && i < rows, "gather_rows: index out of range");
  Tensor<T> y({static_cast<long>(idx.size()), d});
  for (size_t k = 0; k < idx.size(); ++k)
    std::copy_n(x.value().data() + idx[k] * d, d, y.data() + k * d);
  auto xn = x.node();
  return Var<T>::from_op(std::move(y), {x},
                         [xn, idx = std::move(idx), d](Node<T>& self) {
                           if (!xn->requires_grad) return;
                           T* gx = xn->grad_buf().data();
                           const T* g = self.grad.data();
                           for (size_t k = 0; k < idx.size(); ++k)
                             for (long j = 0; j < d; ++j)
                               gx[idx[k] * d + j] += g[k * d + j];
                         });
}

// ---------------------------------------------------------------------------
// Dense / matrix ops
// ---------------------------------------------------------------------------

// y = x * w^T + b with x (N,In), w (Out,In), b (Out).
//
// The forward pass runs one row at a time through fixed scratch buffers so a
// row's output bits depend only on its content, never on its position in the
// batch or on the other rows (batched GEMM kernels round SIMD-panel tails
// differently by position).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  DAVS_CHECK(x.shape().size() == 2 && w.shape().size() == 2,
             "linear expects rank-2 x and w");
  const long n = x.shape()[0], in = x.shape()[1], out = w.shape()[0];
  DAVS_CHECK(w.shape()[1] == in, "linear: w columns must match x columns");
  DAVS_CHECK(b.numel() == out, "linear: bias size mismatch");
  Tensor<T> y({n, out});
  {
    detail::CMapMat<T> wm(w.value().data(), out, in);
    std::vector<T> xrow(in), yrow(out);
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> xv(xrow.data(), in);
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> yv(yrow.data(), out);
    const T* bias = b.value().data();
    for (long i = 0; i < n; ++i) {
      std::copy_n(x.value().data() + i * in, in, xrow.data());
      yv.noalias() = wm * xv;
      T* dst = y.data() + i * out;
      for (long j = 0; j < out; ++j) dst[j] = yrow[j] + bias[j];
    }
  }
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return Var<T>::from_op(
      std::move(y), {x, w, b}, [xn, wn, bn, n, in, out](Node<T>& self) {
        detail::CMapMat<T> gy(self.grad.data(), n, out);
        if (xn->requires_grad) {
          detail::MapMat<T> gx(xn->grad_buf().data(), n, in);
          detail::CMapMat<T> wm(wn->value.data(), out, in);
          gx.noalias() += gy * wm;
        }
        if (wn->requires_grad) {
          detail::MapMat<T> gw(wn->grad_buf().data(), out, in);
          detail::CMapMat<T> xm(xn->value.data(), n, in);
          gw.noalias() += gy.transpose() * xm;
        }
        if (bn->requires_grad) {
          T* gb = bn->grad_buf().data();
          for (long i = 0; i < n; ++i)
            for (long j = 0; j < out; ++j) gb[j] += gy(i, j);
        }
      });
}

namespace detail {

struct ConvDims {
  long n, c, h, w, co, kh, kw, stride, pad, ho, wo;
};

template <typename T>
ConvDims conv_dims(const Tensor<T>& x, const Tensor<T>& w, long stride,
                   long pad) {
  DAVS_CHECK(x.ndim() == 4, "conv2d expects x of shape (N,C,H,W)");
  DAVS_CHECK(w.ndim() == 4, "conv2d expects w of shape (Co,C,kh,kw)");
  DAVS_CHECK(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  ConvDims d;
  d.n = x.dim(0);
  d.c = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.co = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  DAVS_CHECK(w.dim(1) == d.c, "conv2d: channel mismatch");
  d.stride = stride;
  d.pad = pad;
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  DAVS_CHECK(d.ho >= 1 && d.wo >= 1, "conv2d: kernel larger than padded input");
  return d;
}

// Unfolds images [n0, n1) into cols with layout (C*kh*kw, chunk*Ho*Wo).
template <typename T>
void im2col(const T* x, const ConvDims& d, long n0, long n1, T* cols) {
  const long chunk = n1 - n0;
  const long cols_w = chunk * d.ho * d.wo;
  const long hw = d.h * d.w;
  for (long c = 0; c < d.c; ++c) {
    for (long ki = 0; ki < d.kh; ++ki) {
      for (long kj = 0; kj < d.kw; ++kj) {
        T* row = cols + ((c * d.kh + ki) * d.kw + kj) * cols_w;
        for (long n = n0; n < n1; ++n) {
          const T* img = x + (n * d.c + c) * hw;
          T* dst = row + (n - n0) * d.ho * d.wo;
          for (long i = 0; i < d.ho; ++i) {
            const long si = i * d.stride + ki - d.pad;
            T* drow = dst + i * d.wo;
            if (si < 0 || si >= d.h) {
              std::fill_n(drow, d.wo, T(0));
              continue;
            }
            const T* srow = img + si * d.w;
            for (long j = 0; j < d.wo; ++j) {
              const long sj = j * d.stride + kj - d.pad;
              drow[j] = (sj >= 0 && sj < d.w) ? srow[sj] : T(0);
            }
          }
        }
      }
    }
  }
}

// Transpose of im2col: scatter-adds cols back into the image gradient.
template <typename T>
void col2im_add(const T* cols, const ConvDims& d, long n0, long n1, T* gx) {
  const long chunk = n1 - n0;
  const long cols_w = chunk * d.ho * d.wo;
  const long hw = d.h * d.w;
  for (long c = 0; c < d.c; ++c) {
    for (long ki = 0; ki < d.kh; ++ki) {
      for (long kj = 0; kj < d.kw; ++kj) {
        const T* row = cols + ((c * d.kh + ki) * d.kw + kj) * cols_w;
        for (long n = n0; n < n1; ++n) {
          T* img = gx + (n * d.c + c) * hw;
          const T* src = row + (n - n0) * d.ho * d.wo;
          for (long i = 0; i < d.ho; ++i) {
            const long si = i * d.stride + ki - d.pad;
            if (si < 0 || si >= d.h) continue;
            const T* srow = src + i * d.wo;
            T* drow = img + si * d.w;
            for (long j = 0; j < d.wo; ++j) {
              const long sj = j * d.stride + kj - d.pad;
              if (sj >= 0 && sj < d.w) drow[sj] += srow[j];
            }
          }
        }
      }
    }
  }
}

// Images per im2col chunk, capped so the cols buffer stays modest.
inline long conv_chunk(const ConvDims& d) {
  const long per_image = d.c * d.kh * d.kw * d.ho * d.wo;
  const long budget = 4L * 1024 * 1024;
  long chunk = std::max<long>(1, budget / std::max<long>(1, per_image));
  return std::min(chunk, d.n);
}

}  // namespace detail

// 2D convolution over NCHW with zero padding. Backward recomputes the im2col
// buffer instead of storing it, trading a little compute for memory.
//
// The forward pass runs one image at a time through fixed scratch buffers so
// an image's output bits depend only on its content, never on its batch
// position (batched GEMM kernels round SIMD-panel tails differently by
// position).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, long stride,
              long pad) {
  const auto d = detail::conv_dims(x.value(), w.value(), stride, pad);
  DAVS_CHECK(b.numel() == d.co, "conv2d: bias size mismatch");
  Tensor<T> y({d.n, d.co, d.ho, d.wo});
  const long ckk = d.c * d.kh * d.kw;
  const long owh = d.ho * d.wo;
  std::vector<T> cols(static_cast<size_t>(ckk) * owh);
  std::vector<T> ybuf(static_cast<size_t>(d.co) * owh);
  for (long n = 0; n < d.n; ++n) {
    detail::im2col(x.value().data(), d, n, n + 1, cols.data());
    detail::CMapMat<T> wm(w.value().data(), d.co, ckk);
    detail::CMapMat<T> cm(cols.data(), ckk, owh);
    detail::MapMat<T> ym(ybuf.data(), d.co, owh);
    ym.noalias() = wm * cm;
    for (long co = 0; co < d.co; ++co) {
      const T* src = ybuf.data() + co * owh;
      T* dst = y.data() + (n * d.co + co) * owh;
      const T bias = b.value()[co];
      for (long i = 0; i < owh; ++i) dst[i] = src[i] + bias;
    }
  }
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return Var<T>::from_op(std::move(y), {x, w, b}, [xn, wn, bn, d](Node<T>& self) {
    const long ckk = d.c * d.kh * d.kw;
    const long owh = d.ho * d.wo;
    const long chunk = detail::conv_chunk(d);
    const bool need_x = xn->requires_grad;
    const bool need_w = wn->requires_grad;
    std::vector<T> cols(static_cast<size_t>(ckk) * chunk * owh);
    std::vector<T> gybuf(static_cast<size_t>(d.co) * chunk * owh);
    std::vector<T> gcols(need_x ? cols.size() : 0);
    for (long n0 = 0; n0 < d.n; n0 += chunk) {
      const long n1 = std::min(d.n, n0 + chunk);
      const long cw = (n1 - n0) * owh;
      for (long n = n0; n < n1; ++n)
        for (long co = 0; co < d.co; ++co)
          std::copy_n(self.grad.data() + (n * d.co + co) * owh, owh,
                      gybuf.data() + co * cw + (n - n0) * owh);
      detail::CMapMat<T> gym(gybuf.data(), d.co, cw);
      if (need_w) {
        detail::im2col(xn->value.data(), d, n0, n1, cols.data());
        detail::CMapMat<T> cm(cols.data(), ckk, cw);
        detail::MapMat<T> gw(wn->grad_buf().data(), d.co, ckk);
        gw.noalias() += gym * cm.transpose();
      }
      if (need_x) {
        detail::CMapMat<T> wm(wn->value.data(), d.co, ckk);
        detail::MapMat<T> gc(gcols.data(), ckk, cw);
        gc.noalias() = wm.transpose() * gym;
        detail::col2im_add(gcols.data(), d, n0, n1, xn->grad_buf().data());
      }
    }
    if (bn->requires_grad) {
      T* gb = bn->grad_buf().data();
      for (long n = 0; n < d.n; ++n)
        for (long co = 0; co < d.co; ++co) {
          const T* g = self.grad.data() + (n * d.co + co) * owh;
          T s = T(0);
          for (long i = 0; i < owh; ++i) s += g[i];
          gb[co] += s;
        }
    }
  });
}

namespace detail {

// One bilinear x2 pass along a logical axis of length len, applied to outer
// major blocks and inner minor stride. Half-pixel sampling with edge clamp:
// out[2k]   = 0.25*in[k-1] + 0.75*in[k]
// out[2k+1] = 0.75*in[k]   + 0.25*in[k+1]
template <typename T>
void up2x_axis(const T* src, T* dst, long outer, long len, long inner) {
  for (long o = 0; o < outer; ++o) {
    const T* s = src + o * len * inner;
    T* d = dst + o * 2 * len * inner;
    for (long k = 0; k < len; ++k) {
      const long km = std::max<long>(0, k - 1);
      const long kp = std::min(len - 1, k + 1);
      const T* sk = s + k * inner;
      const T* skm = s + km * inner;
      const T* skp = s + kp * inner;
      T* d0 = d + (2 * k) * inner;
      T* d1 = d + (2 * k + 1) * inner;
      for (long i = 0; i < inner; ++i) {
        d0[i] = T(0.25) * skm[i] + T(0.75) * sk[i];
        d1[i] = T(0.75) * sk[i] + T(0.25) * skp[i];
      }
    }
  }
}

template <typename T>
void up2x_axis_bwd(const T* gdst, T* gsrc, long outer, long len, long inner) {
  for (long o = 0; o < outer; ++o) {
    const T* g = gdst + o * 2 * len * inner;
    T* gs = gsrc + o * len * inner;
    for (long k = 0; k < len; ++k) {
      const long km = std::max<long>(0, k - 1);
      const long kp = std::min(len - 1, k + 1);
      const T* g0 = g + (2 * k) * inner;
      const T* g1 = g + (2 * k + 1) * inner;
      for (long i = 0; i < inner; ++i) {
        gs[km * inner + i] += T(0.25) * g0[i];
        gs[k * inner + i] += T(0.75) * g0[i] + T(0.75) * g1[i];
        gs[kp * inner + i] += T(0.25) * g1[i];
      }
    }
  }
}

}  // namespace detail

// Bilinear x2 upsampling of NCHW maps (half-pixel centers, edges clamped).
template <typename T>
Var<T> bilinear_upsample2x(const Var<T>& x) {
  DAVS_CHECK(x.shape().size() == 4, "bilinear_upsample2x expects (N,C,H,W)");
  const long n = x.shape()[0], c = x.shape()[1], h = x.shape()[2],
             w = x.shape()[3];
  Tensor<T> mid({n, c, h, 2 * w});
  detail::up2x_axis(x.value().data(), mid.data(), n * c * h, w, 1);
  Tensor<T> y({n, c, 2 * h, 2 * w});
  detail::up2x_axis(mid.data(), y.data(), n * c, h, 2 * w);
  auto xn = x.node();
  return Var<T>::from_op(std::move(y), {x}, [xn, n, c, h, w](Node<T>& self) {
    if (!xn->requires_grad) return;
    Tensor<T> gmid({n, c, h, 2 * w});
    detail::up2x_axis_bwd(self.grad.data(), gmid.data(), n * c, h, 2 * w);
    detail::up2x_axis_bwd(gmid.data(), xn->grad_buf().data(), n * c * h, w, 1);
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  DAVS_CHECK(x.shape().size() == 4, "global_avg_pool expects (N,C,H,W)");
  const long n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  DAVS_CHECK(hw > 0, "global_avg_pool of empty map");
  Tensor<T> y({n, c});
  for (long i = 0; i < n * c; ++i) {
    const T* src = x.value().data() + i * hw;
    T s = T(0);
    for (long k = 0; k < hw; ++k) s += src[k];
    y[i] = s / static_cast<T>(hw);
  }
  auto xn = x.node();
  return Var<T>::from_op(std::move(y), {x}, [xn, n, c, hw](Node<T>& self) {
    if (!xn->requires_grad) return;
    T* gx = xn->grad_buf().data();
    for (long i = 0; i < n * c; ++i) {
      const T g = self.grad[i] / static_cast<T>(hw);
      T* dst = gx + i * hw;
      for (long k = 0; k < hw; ++k) dst[k] += g;
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

template <typename T>
Var<T> log_softmax_rows(const Var<T>& x) {
  DAVS_CHECK(x.shape().size() == 2, "log_softmax_rows expects (N,C)");
  const long n = x.shape()[0], c = x.shape()[1];
  Tensor<T> y({n, c});
  for (long i = 0; i < n; ++i) {
    const T* row = x.value().data() + i * c;
    T m = row[0];
    for (long j = 1; j < c; ++j) m = std::max(m, row[j]);
    T s = T(0);
    for (long j = 0; j < c; ++j) s += std::exp(row[j] - m);
    const T lse = m + std::log(s);
    for (long j = 0; j < c; ++j) y[i * c + j] = row[j] - lse;
  }
  auto xn = x.node();
  return Var<T>::from_op(std::move(y), {x}, [xn, n, c](Node<T>& self) {
    if (!xn->requires_grad) return;
    T* gx = xn->grad_buf().data();
    for (long i = 0; i < n; ++i) {
      const T* gy = self.grad.data() + i * c;
      const T* ly = self.value.data() + i * c;
      T gs = T(0);
      for (long j = 0; j < c; ++j) gs += gy[j];
      for (long j = 0; j < c; ++j)
        gx[i * c + j] += gy[j] - std::exp(ly[j]) * gs;
    }
  });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
  DAVS_CHECK(x.shape().size() == 2, "softmax_rows expects (N,C)");
  const long n = x.shape()[0], c = x.shape()[1];
  Tensor<T> y({n, c});
  for (long i = 0; i < n; ++i) {
    const T* row = x.value().data() + i * c;
    T m = row[0];
    for (long j = 1; j < c; ++j) m = std::max(m, row[j]);
    T s = T(0);
    for (long j = 0; j < c; ++j) {
      y[i * c + j] = std::exp(row[j] - m);
      s += y[i * c + j];
    }
    for (long j = 0; j < c; ++j) y[i * c + j] /= s;
  }
  auto xn = x.node();
  return Var<T>::from_op(std::move(y), {x}, [xn, n, c](Node<T>& self) {
    if (!xn->requires_grad) return;
    T* gx = xn->grad_buf().data();
    for (long i = 0; i < n; ++i) {
      const T* gy = self.grad.data() + i * c;
      const T* yv = self.value.data() + i * c;
      T dot = T(0);
      for (long j = 0; j < c; ++j) dot += gy[j] * yv[j];
      for (long j = 0; j < c; ++j) gx[i * c + j] += yv[j] * (gy[j] - dot);
    }
  });
}

// Mean negative log-likelihood of per-row log-probabilities at the labels.
template <typename T>
Var<T> nll_mean(const Var<T>& logp, std::vector<long> labels) {
  DAVS_CHECK(logp.shape().size() == 2, "nll_mean expects (N,C) log-probs");
  const long n = logp.shape()[0], c = logp.shape()[1];
  DAVS_CHECK(static_cast<long>(labels.size()) == n,
             "nll_mean: label count must match rows");
  T s = T(0);
  for (long i = 0; i < n; ++i) {
    DAVS_CHECK(labels[i] >= 0 && labels[i] < c, "nll_mean: label out of range");
    s -= logp.value()[i * c + labels[i]];
  }
  s /= static_cast<T>(n);
  auto xn = logp.node();
  return Var<T>::from_op(Tensor<T>::scalar(s), {logp},
                         [xn, labels = std::move(labels), c](Node<T>& self) {
                           if (!xn->requires_grad) return;
                           T* gx = xn->grad_buf().data();
                           const T g = self.grad[0];
                           const long n = static_cast<long>(labels.size());
                           for (long i = 0; i < n; ++i)
                             gx[i * c + labels[i]] -= g / static_cast<T>(n);
                         });
}

// Means of consecutive row groups: (G*g, D) -> (G, D), y_i = mean of rows
// [i*g, (i+1)*g). Used for mean temporal aggregation of per-frame features.
template <typename T>
Var<T> mean_rows_grouped(const Var<T>& x, long group_size) {
  DAVS_CHECK(x.shape().size() == 2, "mean_rows_grouped expects (R,D)");
  const long r = x.shape()[0], d = x.shape()[1];
  DAVS_CHECK(group_size >= 1 && r % group_size == 0,
             "mean_rows_grouped: rows not divisible by group size");
  const long g = r / group_size;
  Tensor<T> y({g, d});
  const T inv = T(1) / static_cast<T>(group_size);
  for (long i = 0; i < g; ++i)
    for (long k = 0; k < group_size; ++k) {
      const T* row = x.value().data() + (i * group_size + k) * d;
      for (long j = 0; j < d; ++j) y[i * d + j] += row[j] * inv;
    }
  auto xn = x.node();
  return Var<T>::from_op(std::move(y), {x},
                         [xn, g, d, group_size, inv](Node<T>& self) {
                           if (!xn->requires_grad) return;
                           T* gx = xn->grad_buf().data();
                           for (long i = 0; i < g; ++i)
                             for (long k = 0; k < group_size; ++k) {
                               T* row = gx + (i * group_size + k) * d;
                               const T* gy = self.grad.data() + i * d;
                               for (long j = 0; j < d; ++j)
                                 row[j] += gy[j] * inv;
                             }
                         });
}

// Reinterprets per-frame feature rows as a one-row image per clip:
// (N*T, F) -> (N, F, 1, T), so temporal structure becomes the width axis of
// a convolution.
template <typename T>
Var<T> rows_to_temporal(const Var<T>& x, long clips) {
  DAVS_CHECK(x.shape().size() == 2, "rows_to_temporal expects (N*T,F)");
  const long r = x.shape()[0], f = x.shape()[1];
  DAVS_CHECK(clips >= 1 && r % clips == 0,
             "rows_to_temporal: rows not divisible by clip count");
  const long t = r / clips;
  Tensor<T> y({clips, f, 1, t});
  for (long n = 0; n < clips; ++n)
    for (long j = 0; j < t; ++j) {
      const T* row = x.value().data() + (n * t + j) * f;
      for (long c = 0; c < f; ++c) y[(n * f + c) * t + j] = row[c];
    }
  auto xn = x.node();
  return Var<T>::from_op(std::move(y), {x},
                         [xn, clips, f, t](Node<T>& self) {
                           if (!xn->requires_grad) return;
                           T* gx = xn->grad_buf().data();
                           for (long n = 0; n < clips; ++n)
                             for (long j = 0; j < t; ++j)
                               for (long c = 0; c < f; ++c)
                                 gx[(n * t + j) * f + c] +=
                                     self.grad[(n * f + c) * t + j];
                         });
}

// ---------------------------------------------------------------------------
// Geometry ops used by the contrastive loss
// ---------------------------------------------------------------------------

// Rows scaled to unit L2 norm (tiny epsilon under the square root keeps the
// all-zero row finite).
template <typename T>
Var<T> rows_l2_normalize(const Var<T>& x) {
  DAVS_CHECK(x.shape().size() == 2, "rows_l2_normalize expects (N,D)");
  const long n = x.shape()[0], d = x.shape()[1];
  Tensor<T> y({n, d});
  std::vector<T> norms(n);
  for (long i = 0; i < n; ++i) {
    const T* row = x.value().data() + i * d;
    // Accumulate in double so long rows stay within contract tolerance of
    // unit length even when T is float.
    double s = 0.0;
    for (long j = 0; j < d; ++j) s += double(row[j]) * double(row[j]);
    norms[i] = T(std::sqrt(s + 1e-24));
    for (long j = 0; j < d; ++j) y[i * d + j] = row[j] / norms[i];
  }
  auto xn = x.node();
  return Var<T>::from_op(std::move(y), {x},
                         [xn, norms = std::move(norms), n, d](Node<T>& self) {
                           if (!xn->requires_grad) return;
                           T* gx = xn->grad_buf().data();
                           for (long i = 0; i < n; ++i) {
                             const T* gy = self.grad.data() + i * d;
                             const T* yv = self.value.data() + i * d;
                             T dot = T(0);
                             for (long j = 0; j < d; ++j) dot += gy[j] * yv[j];
                             for (long j = 0; j < d; ++j)
                               gx[i * d + j] += (gy[j] - yv[j] * dot) / norms[i];
                           }
                         });
}

// Pairwise Euclidean distances d_ij = |v_i - a_j| between row sets.
template <typename T>
Var<T> pair_l2_dist(const Var<T>& v, const Var<T>& a) {
  DAVS_CHECK(v.shape().size() == 2 && a.shape().size() == 2,
             "pair_l2_dist expects rank-2 inputs");
  DAVS_CHECK(v.shape()[1] == a.shape()[1], "pair_l2_dist: dim mismatch");
  const long n = v.shape()[0], m = a.shape()[0], d = v.shape()[1];
  Tensor<T> y({n, m});
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < m; ++j) {
      const T* vi = v.value().data() + i * d;
      const T* aj = a.value().data() + j * d;
      T s = T(0);
      for (long k = 0; k < d; ++k) {
        const T diff = vi[k] - aj[k];
        s += diff * diff;
      }
      y[i * m + j] = std::sqrt(s + T(1e-24));
    }
  auto vn = v.node(), an = a.node();
  return Var<T>::from_op(
      std::move(y), {v, a}, [vn, an, n, m, d](Node<T>& self) {
        const T* vv = vn->value.data();
        const T* av = an->value.data();
        T* gv = vn->requires_grad ? vn->grad_buf().data() : nullptr;
        T* ga = an->requires_grad ? an->grad_buf().data() : nullptr;
        if (!gv && !ga) return;
        for (long i = 0; i < n; ++i)
          for (long j = 0; j < m; ++j) {
            const T g = self.grad[i * m + j];
            if (g == T(0)) continue;
            const T dist = self.value[i * m + j];
            const T inv = g / dist;
            for (long k = 0; k < d; ++k) {
              const T diff = (vv[i * d + k] - av[j * d + k]) * inv;
              if (gv) gv[i * d + k] += diff;
              if (ga) ga[j * d + k] -= diff;
            }
          }
      });
}

}  // namespace davs::core
