// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode autodiff tape and the layer operations needed to train small
// CNNs: convolution, fully-connected, batch-norm, ReLU, pooling, global
// average pooling, elementwise add/mul, sum and softmax cross-entropy.
//
// A TapeT records one forward pass; backward() walks the nodes in reverse
// recording order, which fixes the gradient accumulation order and makes
// gradients bit-deterministic for identical inputs. Parameter leaves flush
// their accumulated gradient into ParamT::grad when backward reaches them.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "hfp/error.hpp"
#include "hfp/tensor.hpp"

namespace hfp {

enum class BnMode { Train, Inference };

/// Per-channel batch-norm state: learnable scale/shift plus running statistics.
template <typename T>
struct BatchNormStateT {
  ParamT<T> gamma;
  ParamT<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T epsilon = T(1e-5);
  T momentum = T(0.1);

  BatchNormStateT() = default;
  BatchNormStateT(const std::string& prefix, int channels)
      : gamma(prefix + ".gamma", {channels}), beta(prefix + ".beta", {channels}) {
    std::fill(gamma.value.begin(), gamma.value.end(), T(1));
    running_mean.assign(static_cast<size_t>(channels), T(0));
    running_var.assign(static_cast<size_t>(channels), T(1));
  }

  int channels() const { return static_cast<int>(running_mean.size()); }
};

using BatchNormState = BatchNormStateT<float>;

template <typename T>
class TapeT;

/// Handle to a tape node.
template <typename T>
struct ValueT {
  TapeT<T>* tape = nullptr;
  int node = -1;
};

template <typename T>
class TapeT {
public:
  struct Node {
    Shape shape;
    std::vector<T> val;
    std::vector<T> grad;
    std::function<void()> back;  // may be empty for leaves without sources
    ParamT<T>* src = nullptr;    // parameter to flush gradients into
  };

  ValueT<T> input(Shape shape, const T* data) {
    Node n;
    n.shape = std::move(shape);
    n.val.assign(data, data + numel(n.shape));
    return push(std::move(n));
  }

  ValueT<T> input(const TensorT<T>& t) { return input(t.shape, t.data.data()); }

  ValueT<T> param(ParamT<T>& p) {
    Node n;
    n.shape = p.shape;
    n.val = p.value;
    n.src = &p;
    return push(std::move(n));
  }

  Node& node(int i) { return nodes_[static_cast<size_t>(i)]; }
  const Node& node(int i) const { return nodes_[static_cast<size_t>(i)]; }
  Node& node(ValueT<T> v) { return nodes_[static_cast<size_t>(v.node)]; }

  const std::vector<T>& value(ValueT<T> v) const { return nodes_[static_cast<size_t>(v.node)].val; }
  const std::vector<T>& grad(ValueT<T> v) const { return nodes_[static_cast<size_t>(v.node)].grad; }
  const Shape& shape(ValueT<T> v) const { return nodes_[static_cast<size_t>(v.node)].shape; }

  ValueT<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return ValueT<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Populates gradients of every node up to `loss` and flushes parameter
  /// leaves additively into ParamT::grad.
  void backward(ValueT<T> loss) {
    require(loss.tape == this, "backward: value belongs to a different tape");
    Node& top = node(loss);
    require(numel(top.shape) == 1, "backward requires a scalar loss, got shape ", shape_str(top.shape));
    for (int i = 0; i <= loss.node; ++i) {
      Node& n = node(i);
      n.grad.assign(n.val.size(), T(0));
    }
    top.grad[0] = T(1);
    for (int i = loss.node; i >= 0; --i) {
      Node& n = node(i);
      if (n.back) n.back();
      if (n.src) {
        ParamT<T>& p = *n.src;
        for (size_t k = 0; k < n.grad.size(); ++k) p.grad[k] += n.grad[k];
        p.has_grad = true;
      }
    }
  }

  void clear() { nodes_.clear(); }
  size_t size() const { return nodes_.size(); }

private:
  std::deque<Node> nodes_;  // deque: node references stay valid as the tape grows
};

using Tape = TapeT<float>;
using Value = ValueT<float>;

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// 2D cross-correlation. input [N,Cin,H,W], weight [Cout,Cin,k,k], optional
/// bias [Cout]; output [N,Cout,H',W'] with H' = (H + 2*pad - k)/stride + 1.
template <typename T>
ValueT<T> conv2d_impl(ValueT<T> x, ValueT<T> w, std::optional<ValueT<T>> bias, int stride,
                      int padding) {
  TapeT<T>& tape = *x.tape;
  const Shape& xs = tape.shape(x);
  const Shape& ws = tape.shape(w);
  require(xs.size() == 4, "conv2d: input must be 4D, got ", shape_str(xs));
  require(ws.size() == 4, "conv2d: weight must be 4D, got ", shape_str(ws));
  require(ws[2] == ws[3], "conv2d: only square kernels supported, got ", shape_str(ws));
  require(xs[1] == ws[1], "conv2d: input channels ", xs[1], " do not match weight channels ", ws[1]);
  require(stride >= 1, "conv2d: stride must be >= 1, got ", stride);
  require(padding >= 0, "conv2d: padding must be >= 0, got ", padding);
  const int n = xs[0], cin = xs[1], h = xs[2], wd = xs[3];
  const int cout = ws[0], k = ws[2];
  const int oh = (h + 2 * padding - k) / stride + 1;
  const int ow = (wd + 2 * padding - k) / stride + 1;
  require(oh >= 1 && ow >= 1, "conv2d: kernel ", k, " does not fit input ", shape_str(xs),
          " with padding ", padding);
  if (bias) {
    const Shape& bs = tape.shape(*bias);
    require(numel(bs) == cout, "conv2d: bias length ", numel(bs), " does not match out channels ", cout);
  }

  typename TapeT<T>::Node out;
  out.shape = {n, cout, oh, ow};
  out.val.assign(static_cast<size_t>(numel(out.shape)), T(0));

  // im2col layout: one row of length oh*ow per (ci,ky,kx) tap, per sample.
  // All hot loops then run over the full output plane.
  const int64_t plane = static_cast<int64_t>(oh) * ow;
  const int taps = cin * k * k;
  const auto fill_cols = [&](const T* xp, T* cols) {
    for (int ci = 0; ci < cin; ++ci) {
      const T* xc = xp + static_cast<int64_t>(ci) * h * wd;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          T* row = cols + (static_cast<int64_t>((ci * k + ky) * k + kx)) * plane;
          for (int y = 0; y < oh; ++y) {
            const int iy = y * stride - padding + ky;
            T* dst = row + static_cast<int64_t>(y) * ow;
            if (iy < 0 || iy >= h) {
              for (int xo = 0; xo < ow; ++xo) dst[xo] = T(0);
              continue;
            }
            const T* src = xc + static_cast<int64_t>(iy) * wd;
            for (int xo = 0; xo < ow; ++xo) {
              const int ix = xo * stride - padding + kx;
              dst[xo] = (ix >= 0 && ix < wd) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  };

  const std::vector<T>& xv = tape.value(x);
  const std::vector<T>& wv = tape.value(w);
  const T* bv = bias ? tape.value(*bias).data() : nullptr;

  // cols are kept for the backward pass
  std::vector<T> cols(static_cast<size_t>(n) * taps * plane);
  for (int in = 0; in < n; ++in) {
    T* sample_cols = cols.data() + static_cast<int64_t>(in) * taps * plane;
    fill_cols(xv.data() + static_cast<int64_t>(in) * cin * h * wd, sample_cols);
    for (int co = 0; co < cout; ++co) {
      T* __restrict op = out.val.data() + (static_cast<int64_t>(in) * cout + co) * plane;
      const T b = bv ? bv[co] : T(0);
      for (int64_t i = 0; i < plane; ++i) op[i] = b;
      const T* wp = wv.data() + static_cast<int64_t>(co) * taps;
      for (int r = 0; r < taps; ++r) {
        const T wval = wp[r];
        if (wval == T(0)) continue;
        const T* __restrict col = sample_cols + static_cast<int64_t>(r) * plane;
        for (int64_t i = 0; i < plane; ++i) op[i] += wval * col[i];
      }
    }
  }

  ValueT<T> result = tape.push(std::move(out));
  const int xi = x.node, wi = w.node, bi = bias ? bias->node : -1, oi = result.node;
  TapeT<T>* tp = &tape;
  tape.node(result).back = [tp, xi, wi, bi, oi, n, cin, cout, h, wd, k, oh, ow, stride, padding,
                            plane, taps, cols = std::move(cols)]() {
    auto& xn = tp->node(xi);
    auto& wn = tp->node(wi);
    auto& on = tp->node(oi);
    std::vector<T> dcols(static_cast<size_t>(taps) * plane);
    for (int in = 0; in < n; ++in) {
      const T* sample_cols = cols.data() + static_cast<int64_t>(in) * taps * plane;
      std::fill(dcols.begin(), dcols.end(), T(0));
      for (int co = 0; co < cout; ++co) {
        const T* __restrict gp = on.grad.data() + (static_cast<int64_t>(in) * cout + co) * plane;
        if (bi >= 0) {
          T gb = T(0);
          for (int64_t i = 0; i < plane; ++i) gb += gp[i];
          tp->node(bi).grad[static_cast<size_t>(co)] += gb;
        }
        const T* wp = wn.val.data() + static_cast<int64_t>(co) * taps;
        T* gwp = wn.grad.data() + static_cast<int64_t>(co) * taps;
        for (int r = 0; r < taps; ++r) {
          const T* __restrict col = sample_cols + static_cast<int64_t>(r) * plane;
          T* __restrict dcol = dcols.data() + static_cast<int64_t>(r) * plane;
          T gw = T(0);
#pragma omp simd reduction(+ : gw)
          for (int64_t i = 0; i < plane; ++i) gw += gp[i] * col[i];
          gwp[r] += gw;
          const T wval = wp[r];
          for (int64_t i = 0; i < plane; ++i) dcol[i] += wval * gp[i];
        }
      }
      // col2im scatter-add into the input gradient
      T* gxp = xn.grad.data() + static_cast<int64_t>(in) * cin * h * wd;
      for (int ci = 0; ci < cin; ++ci) {
        T* gxc = gxp + static_cast<int64_t>(ci) * h * wd;
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const T* row = dcols.data() + (static_cast<int64_t>((ci * k + ky) * k + kx)) * plane;
            for (int y = 0; y < oh; ++y) {
              const int iy = y * stride - padding + ky;
              if (iy < 0 || iy >= h) continue;
              const T* src = row + static_cast<int64_t>(y) * ow;
              T* dst = gxc + static_cast<int64_t>(iy) * wd;
              for (int xo = 0; xo < ow; ++xo) {
                const int ix = xo * stride - padding + kx;
                if (ix >= 0 && ix < wd) dst[ix] += src[xo];
              }
            }
          }
        }
      }
    }
  };
  return result;
}

template <typename T>
ValueT<T> conv2d(ValueT<T> x, ValueT<T> w, ValueT<T> bias, int stride, int padding) {
  return conv2d_impl(x, w, std::optional<ValueT<T>>(bias), stride, padding);
}

template <typename T>
ValueT<T> conv2d(ValueT<T> x, ValueT<T> w, int stride, int padding) {
  return conv2d_impl(x, w, std::optional<ValueT<T>>(), stride, padding);
}

/// Affine map: input [N,F], weight [G,F], optional bias [G] -> [N,G].
template <typename T>
ValueT<T> linear_impl(ValueT<T> x, ValueT<T> w, std::optional<ValueT<T>> bias) {
  TapeT<T>& tape = *x.tape;
  const Shape& xs = tape.shape(x);
  const Shape& ws = tape.shape(w);
  require(xs.size() == 2, "linear: input must be 2D, got ", shape_str(xs));
  require(ws.size() == 2, "linear: weight must be 2D, got ", shape_str(ws));
  require(xs[1] == ws[1], "linear: input features ", xs[1], " do not match weight features ", ws[1]);
  const int n = xs[0], f = xs[1], g = ws[0];
  if (bias) {
    require(numel(tape.shape(*bias)) == g, "linear: bias length ", numel(tape.shape(*bias)),
            " does not match out features ", g);
  }

  typename TapeT<T>::Node out;
  out.shape = {n, g};
  out.val.assign(static_cast<size_t>(n) * g, T(0));
  const std::vector<T>& xv = tape.value(x);
  const std::vector<T>& wv = tape.value(w);
  const T* bv = bias ? tape.value(*bias).data() : nullptr;
  for (int in = 0; in < n; ++in) {
    const T* xp = xv.data() + static_cast<int64_t>(in) * f;
    for (int og = 0; og < g; ++og) {
      const T* wp = wv.data() + static_cast<int64_t>(og) * f;
      T acc = bv ? bv[og] : T(0);
      for (int i = 0; i < f; ++i) acc += xp[i] * wp[i];
      out.val[static_cast<size_t>(in) * g + og] = acc;
    }
  }

  ValueT<T> result = tape.push(std::move(out));
  const int xi = x.node, wi = w.node, bi = bias ? bias->node : -1, oi = result.node;
  TapeT<T>* tp = &tape;
  tape.node(result).back = [tp, xi, wi, bi, oi, n, f, g]() {
    auto& xn = tp->node(xi);
    auto& wn = tp->node(wi);
    auto& on = tp->node(oi);
    for (int in = 0; in < n; ++in) {
      const T* xp = xn.val.data() + static_cast<int64_t>(in) * f;
      T* gxp = xn.grad.data() + static_cast<int64_t>(in) * f;
      const T* gp = on.grad.data() + static_cast<int64_t>(in) * g;
      for (int og = 0; og < g; ++og) {
        const T go = gp[og];
        if (bi >= 0) tp->node(bi).grad[static_cast<size_t>(og)] += go;
        const T* wp = wn.val.data() + static_cast<int64_t>(og) * f;
        T* gwp = wn.grad.data() + static_cast<int64_t>(og) * f;
        for (int i = 0; i < f; ++i) {
          gwp[i] += go * xp[i];
          gxp[i] += go * wp[i];
        }
      }
    }
  };
  return result;
}

template <typename T>
ValueT<T> linear(ValueT<T> x, ValueT<T> w, ValueT<T> bias) {
  return linear_impl(x, w, std::optional<ValueT<T>>(bias));
}

template <typename T>
ValueT<T> linear(ValueT<T> x, ValueT<T> w) {
  return linear_impl(x, w, std::optional<ValueT<T>>());
}

/// Batch normalization over [N,C,H,W] or [N,C]. Train mode normalizes with
/// the mini-batch mean and population variance and updates the running
/// statistics by EMA; inference mode uses the running statistics.
template <typename T>
ValueT<T> batchnorm(ValueT<T> x, ValueT<T> gamma, ValueT<T> beta, BatchNormStateT<T>& state,
                    BnMode mode) {
  TapeT<T>& tape = *x.tape;
  const Shape& xs = tape.shape(x);
  require(xs.size() == 2 || xs.size() == 4, "batchnorm: input must be 2D or 4D, got ", shape_str(xs));
  const int n = xs[0], c = xs[1];
  const int spatial = xs.size() == 4 ? xs[2] * xs[3] : 1;
  require(c == state.channels(), "batchnorm: input channels ", c, " do not match state channels ",
          state.channels());
  require(numel(tape.shape(gamma)) == c && numel(tape.shape(beta)) == c,
          "batchnorm: gamma/beta length does not match channel count ", c);
  const int64_t m = static_cast<int64_t>(n) * spatial;  // samples per channel
  if (mode == BnMode::Train) {
    require(m >= 2, "batchnorm: train mode needs >= 2 samples per channel, got ", m);
  }

  const std::vector<T>& xv = tape.value(x);
  const std::vector<T>& gv = tape.value(gamma);
  const std::vector<T>& bv = tape.value(beta);

  std::vector<T> mean(static_cast<size_t>(c)), invstd(static_cast<size_t>(c));
  if (mode == BnMode::Train) {
    for (int ch = 0; ch < c; ++ch) {
      T mu = T(0);
      for (int in = 0; in < n; ++in) {
        const T* xp = xv.data() + (static_cast<int64_t>(in) * c + ch) * spatial;
        for (int s = 0; s < spatial; ++s) mu += xp[s];
      }
      mu /= static_cast<T>(m);
      T var = T(0);
      for (int in = 0; in < n; ++in) {
        const T* xp = xv.data() + (static_cast<int64_t>(in) * c + ch) * spatial;
        for (int s = 0; s < spatial; ++s) {
          const T d = xp[s] - mu;
          var += d * d;
        }
      }
      var /= static_cast<T>(m);
      mean[static_cast<size_t>(ch)] = mu;
      invstd[static_cast<size_t>(ch)] = T(1) / std::sqrt(var + state.epsilon);
      state.running_mean[static_cast<size_t>(ch)] =
          (T(1) - state.momentum) * state.running_mean[static_cast<size_t>(ch)] + state.momentum * mu;
      state.running_var[static_cast<size_t>(ch)] =
          (T(1) - state.momentum) * state.running_var[static_cast<size_t>(ch)] + state.momentum * var;
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      require(state.running_var[static_cast<size_t>(ch)] >= T(0),
              "batchnorm: negative running variance in channel ", ch);
      mean[static_cast<size_t>(ch)] = state.running_mean[static_cast<size_t>(ch)];
      invstd[static_cast<size_t>(ch)] =
          T(1) / std::sqrt(state.running_var[static_cast<size_t>(ch)] + state.epsilon);
    }
  }

  typename TapeT<T>::Node out;
  out.shape = xs;
  out.val.resize(xv.size());
  std::vector<T> xhat(xv.size());
  for (int in = 0; in < n; ++in) {
    for (int ch = 0; ch < c; ++ch) {
      const int64_t base = (static_cast<int64_t>(in) * c + ch) * spatial;
      const T mu = mean[static_cast<size_t>(ch)];
      const T is = invstd[static_cast<size_t>(ch)];
      const T ga = gv[static_cast<size_t>(ch)];
      const T be = bv[static_cast<size_t>(ch)];
      for (int s = 0; s < spatial; ++s) {
        const T xh = (xv[static_cast<size_t>(base + s)] - mu) * is;
        xhat[static_cast<size_t>(base + s)] = xh;
        out.val[static_cast<size_t>(base + s)] = ga * xh + be;
      }
    }
  }

  ValueT<T> result = tape.push(std::move(out));
  const int xi = x.node, gi = gamma.node, bi = beta.node, oi = result.node;
  TapeT<T>* tp = &tape;
  const bool train = mode == BnMode::Train;
  tape.node(result).back = [tp, xi, gi, bi, oi, n, c, spatial, m, train, xhat = std::move(xhat),
                            invstd = std::move(invstd)]() {
    auto& xn = tp->node(xi);
    auto& gn = tp->node(gi);
    auto& bn = tp->node(bi);
    auto& on = tp->node(oi);
    for (int ch = 0; ch < c; ++ch) {
      const T ga = gn.val[static_cast<size_t>(ch)];
      const T is = invstd[static_cast<size_t>(ch)];
      T sum_dy = T(0), sum_dy_xhat = T(0);
      for (int in = 0; in < n; ++in) {
        const int64_t base = (static_cast<int64_t>(in) * c + ch) * spatial;
        for (int s = 0; s < spatial; ++s) {
          const T dy = on.grad[static_cast<size_t>(base + s)];
          sum_dy += dy;
          sum_dy_xhat += dy * xhat[static_cast<size_t>(base + s)];
        }
      }
      gn.grad[static_cast<size_t>(ch)] += sum_dy_xhat;
      bn.grad[static_cast<size_t>(ch)] += sum_dy;
      if (train) {
        // dL/dx via the batch statistics: dx = (g/m) * is * (m*dy - sum_dy - xhat*sum_dy_xhat)
        const T scale = ga * is / static_cast<T>(m);
        for (int in = 0; in < n; ++in) {
          const int64_t base = (static_cast<int64_t>(in) * c + ch) * spatial;
          for (int s = 0; s < spatial; ++s) {
            const T dy = on.grad[static_cast<size_t>(base + s)];
            xn.grad[static_cast<size_t>(base + s)] +=
                scale * (static_cast<T>(m) * dy - sum_dy - xhat[static_cast<size_t>(base + s)] * sum_dy_xhat);
          }
        }
      } else {
        const T scale = ga * is;
        for (int in = 0; in < n; ++in) {
          const int64_t base = (static_cast<int64_t>(in) * c + ch) * spatial;
          for (int s = 0; s < spatial; ++s) {
            xn.grad[static_cast<size_t>(base + s)] += scale * on.grad[static_cast<size_t>(base + s)];
          }
        }
      }
    }
  };
  return result;
}

template <typename T>
ValueT<T> relu(ValueT<T> x) {
  TapeT<T>& tape = *x.tape;
  typename TapeT<T>::Node out;
  out.shape = tape.shape(x);
  const std::vector<T>& xv = tape.value(x);
  out.val.resize(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out.val[i] = xv[i] > T(0) ? xv[i] : T(0);
  ValueT<T> result = tape.push(std::move(out));
  const int xi = x.node, oi = result.node;
  TapeT<T>* tp = &tape;
  tape.node(result).back = [tp, xi, oi]() {
    auto& xn = tp->node(xi);
    auto& on = tp->node(oi);
    for (size_t i = 0; i < xn.val.size(); ++i) {
      if (xn.val[i] > T(0)) xn.grad[i] += on.grad[i];
    }
  };
  return result;
}

/// Max pooling over [N,C,H,W]; out-of-range positions (padding) are skipped.
template <typename T>
ValueT<T> max_pool2d(ValueT<T> x, int kernel, int stride, int padding) {
  TapeT<T>& tape = *x.tape;
  const Shape& xs = tape.shape(x);
  require(xs.size() == 4, "max_pool2d: input must be 4D, got ", shape_str(xs));
  require(kernel >= 1 && stride >= 1 && padding >= 0 && padding < kernel,
          "max_pool2d: invalid kernel/stride/padding ", kernel, "/", stride, "/", padding);
  const int n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  const int oh = (h + 2 * padding - kernel) / stride + 1;
  const int ow = (w + 2 * padding - kernel) / stride + 1;
  require(oh >= 1 && ow >= 1, "max_pool2d: window does not fit input ", shape_str(xs));

  typename TapeT<T>::Node out;
  out.shape = {n, c, oh, ow};
  out.val.resize(static_cast<size_t>(numel(out.shape)));
  std::vector<int> argmax(out.val.size());
  const std::vector<T>& xv = tape.value(x);
  for (int in = 0; in < n; ++in) {
    for (int ch = 0; ch < c; ++ch) {
      const T* xp = xv.data() + (static_cast<int64_t>(in) * c + ch) * h * w;
      const int64_t obase = (static_cast<int64_t>(in) * c + ch) * oh * ow;
      for (int y = 0; y < oh; ++y) {
        for (int xo = 0; xo < ow; ++xo) {
          T best = -std::numeric_limits<T>::infinity();
          int best_idx = -1;
          for (int ky = 0; ky < kernel; ++ky) {
            const int iy = y * stride - padding + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              const int ix = xo * stride - padding + kx;
              if (ix < 0 || ix >= w) continue;
              const T v = xp[iy * w + ix];
              if (v > best) {
                best = v;
                best_idx = iy * w + ix;
              }
            }
          }
          out.val[static_cast<size_t>(obase + y * ow + xo)] = best;
          argmax[static_cast<size_t>(obase + y * ow + xo)] = best_idx;
        }
      }
    }
  }

  ValueT<T> result = tape.push(std::move(out));
  const int xi = x.node, oi = result.node;
  TapeT<T>* tp = &tape;
  const int64_t plane = static_cast<int64_t>(h) * w;
  const int64_t oplane = static_cast<int64_t>(oh) * ow;
  const int64_t planes = static_cast<int64_t>(n) * c;
  tape.node(result).back = [tp, xi, oi, argmax = std::move(argmax), plane, oplane, planes]() {
    auto& xn = tp->node(xi);
    auto& on = tp->node(oi);
    for (int64_t p = 0; p < planes; ++p) {
      for (int64_t i = 0; i < oplane; ++i) {
        const int idx = argmax[static_cast<size_t>(p * oplane + i)];
        if (idx >= 0) xn.grad[static_cast<size_t>(p * plane + idx)] += on.grad[static_cast<size_t>(p * oplane + i)];
      }
    }
  };
  return result;
}

/// Global average pooling: [N,C,H,W] -> [N,C].
template <typename T>
ValueT<T> global_avg_pool(ValueT<T> x) {
  TapeT<T>& tape = *x.tape;
  const Shape& xs = tape.shape(x);
  require(xs.size() == 4, "global_avg_pool: input must be 4D, got ", shape_str(xs));
  const int n = xs[0], c = xs[1];
  const int64_t spatial = static_cast<int64_t>(xs[2]) * xs[3];
  typename TapeT<T>::Node out;
  out.shape = {n, c};
  out.val.resize(static_cast<size_t>(n) * c);
  const std::vector<T>& xv = tape.value(x);
  for (int64_t p = 0; p < static_cast<int64_t>(n) * c; ++p) {
    T acc = T(0);
    const T* xp = xv.data() + p * spatial;
    for (int64_t s = 0; s < spatial; ++s) acc += xp[s];
    out.val[static_cast<size_t>(p)] = acc / static_cast<T>(spatial);
  }
  ValueT<T> result = tape.push(std::move(out));
  const int xi = x.node, oi = result.node;
  TapeT<T>* tp = &tape;
  const int64_t planes = static_cast<int64_t>(n) * c;
  tape.node(result).back = [tp, xi, oi, spatial, planes]() {
    auto& xn = tp->node(xi);
    auto& on = tp->node(oi);
    for (int64_t p = 0; p < planes; ++p) {
      const T g = on.grad[static_cast<size_t>(p)] / static_cast<T>(spatial);
      T* gp = xn.grad.data() + p * spatial;
      for (int64_t s = 0; s < spatial; ++s) gp[s] += g;
    }
  };
  return result;
}

/// View with a new shape of identical element count.
template <typename T>
ValueT<T> reshape(ValueT<T> x, Shape shape) {
  TapeT<T>& tape = *x.tape;
  require(numel(shape) == numel(tape.shape(x)), "reshape: cannot view ", shape_str(tape.shape(x)),
          " as ", shape_str(shape));
  typename TapeT<T>::Node out;
  out.shape = std::move(shape);
  out.val = tape.value(x);
  ValueT<T> result = tape.push(std::move(out));
  const int xi = x.node, oi = result.node;
  TapeT<T>* tp = &tape;
  tape.node(result).back = [tp, xi, oi]() {
    auto& xn = tp->node(xi);
    auto& on = tp->node(oi);
    for (size_t i = 0; i < on.grad.size(); ++i) xn.grad[i] += on.grad[i];
  };
  return result;
}

/// Elementwise sum of two or more same-shaped tensors.
template <typename T>
ValueT<T> add(const std::vector<ValueT<T>>& xs) {
  require(xs.size() >= 2, "add: needs at least two inputs, got ", xs.size());
  TapeT<T>& tape = *xs[0].tape;
  const Shape& s0 = tape.shape(xs[0]);
  for (const auto& v : xs) {
    require(tape.shape(v) == s0, "add: shape mismatch ", shape_str(tape.shape(v)), " vs ",
            shape_str(s0));
  }
  typename TapeT<T>::Node out;
  out.shape = s0;
  out.val = tape.value(xs[0]);
  for (size_t j = 1; j < xs.size(); ++j) {
    const std::vector<T>& v = tape.value(xs[j]);
    for (size_t i = 0; i < out.val.size(); ++i) out.val[i] += v[i];
  }
  ValueT<T> result = tape.push(std::move(out));
  std::vector<int> in_idx;
  for (const auto& v : xs) in_idx.push_back(v.node);
  const int oi = result.node;
  TapeT<T>* tp = &tape;
  tape.node(result).back = [tp, in_idx = std::move(in_idx), oi]() {
    auto& on = tp->node(oi);
    for (int idx : in_idx) {
      auto& xn = tp->node(idx);
      for (size_t i = 0; i < on.grad.size(); ++i) xn.grad[i] += on.grad[i];
    }
  };
  return result;
}

template <typename T>
ValueT<T> add(ValueT<T> a, ValueT<T> b) {
  return add(std::vector<ValueT<T>>{a, b});
}

/// Elementwise product of two same-shaped tensors.
template <typename T>
ValueT<T> mul(ValueT<T> a, ValueT<T> b) {
  TapeT<T>& tape = *a.tape;
  require(tape.shape(a) == tape.shape(b), "mul: shape mismatch ", shape_str(tape.shape(a)), " vs ",
          shape_str(tape.shape(b)));
  typename TapeT<T>::Node out;
  out.shape = tape.shape(a);
  const std::vector<T>& av = tape.value(a);
  const std::vector<T>& bv = tape.value(b);
  out.val.resize(av.size());
  for (size_t i = 0; i < av.size(); ++i) out.val[i] = av[i] * bv[i];
  ValueT<T> result = tape.push(std::move(out));
  const int ai = a.node, bi = b.node, oi = result.node;
  TapeT<T>* tp = &tape;
  tape.node(result).back = [tp, ai, bi, oi]() {
    auto& an = tp->node(ai);
    auto& bn = tp->node(bi);
    auto& on = tp->node(oi);
    for (size_t i = 0; i < on.grad.size(); ++i) {
      an.grad[i] += on.grad[i] * bn.val[i];
      bn.grad[i] += on.grad[i] * an.val[i];
    }
  };
  return result;
}

/// Sum of all elements -> scalar [1].
template <typename T>
ValueT<T> sum(ValueT<T> x) {
  TapeT<T>& tape = *x.tape;
  typename TapeT<T>::Node out;
  out.shape = {1};
  T acc = T(0);
  for (const T v : tape.value(x)) acc += v;
  out.val = {acc};
  ValueT<T> result = tape.push(std::move(out));
  const int xi = x.node, oi = result.node;
  TapeT<T>* tp = &tape;
  tape.node(result).back = [tp, xi, oi]() {
    auto& xn = tp->node(xi);
    const T g = tp->node(oi).grad[0];
    for (size_t i = 0; i < xn.grad.size(); ++i) xn.grad[i] += g;
  };
  return result;
}

/// Mean negative log-likelihood of the softmax over logits [N,K].
template <typename T>
ValueT<T> softmax_cross_entropy(ValueT<T> logits, const std::vector<int>& labels) {
  TapeT<T>& tape = *logits.tape;
  const Shape& ls = tape.shape(logits);
  require(ls.size() == 2, "softmax_cross_entropy: logits must be 2D, got ", shape_str(ls));
  const int n = ls[0], k = ls[1];
  require(static_cast<int>(labels.size()) == n, "softmax_cross_entropy: got ", labels.size(),
          " labels for batch of ", n);
  for (int i = 0; i < n; ++i) {
    require(labels[i] >= 0 && labels[i] < k, "softmax_cross_entropy: label ", labels[i],
            " out of range [0,", k, ") at row ", i);
  }

  const std::vector<T>& lv = tape.value(logits);
  std::vector<T> probs(lv.size());
  T loss = T(0);
  for (int i = 0; i < n; ++i) {
    const T* row = lv.data() + static_cast<int64_t>(i) * k;
    T* prow = probs.data() + static_cast<int64_t>(i) * k;
    T mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T z = T(0);
    for (int j = 0; j < k; ++j) {
      prow[j] = std::exp(row[j] - mx);
      z += prow[j];
    }
    for (int j = 0; j < k; ++j) prow[j] /= z;
    loss -= std::log(prow[labels[static_cast<size_t>(i)]] + std::numeric_limits<T>::min());
  }
  loss /= static_cast<T>(n);

  typename TapeT<T>::Node out;
  out.shape = {1};
  out.val = {loss};
  ValueT<T> result = tape.push(std::move(out));
  const int li = logits.node, oi = result.node;
  TapeT<T>* tp = &tape;
  tape.node(result).back = [tp, li, oi, labels, probs = std::move(probs), n, k]() {
    auto& ln = tp->node(li);
    const T g = tp->node(oi).grad[0] / static_cast<T>(n);
    for (int i = 0; i < n; ++i) {
      T* grow = ln.grad.data() + static_cast<int64_t>(i) * k;
      const T* prow = probs.data() + static_cast<int64_t>(i) * k;
      for (int j = 0; j < k; ++j) {
        const T y = j == labels[static_cast<size_t>(i)] ? T(1) : T(0);
        grow[j] += g * (prow[j] - y);
      }
    }
  };
  return result;
}

}  // namespace hfp
