// Copyright 2026 the cvunet authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include "cvunet/autodiff.hpp"

namespace cvu {

/// Convolution hyperparameters. Padding is explicit per side so strided
/// dilated blocks can hit exactly-halved output sizes.
struct ConvGeom {
  int64_t stride_h = 1, stride_w = 1;
  int64_t dil_h = 1, dil_w = 1;
  int64_t pad_t = 0, pad_b = 0, pad_l = 0, pad_r = 0;
};

namespace detail {

struct ConvDims {
  int64_t N, Cin, H, W, Cout, kh, kw, Hout, Wout;
};

inline ConvDims conv_dims(const Shape& x, const Shape& k, const ConvGeom& g) {
  if (x.size() != 4) throw ConfigError("conv2d input must be NCHW, got " + shape_str(x));
  if (k.size() != 4) throw ConfigError("conv2d kernel must be rank 4, got " + shape_str(k));
  if (x[1] != k[1])
    throw ConfigError("conv2d channel mismatch: input C=" + std::to_string(x[1]) +
                      ", kernel Cin=" + std::to_string(k[1]));
  ConvDims d{x[0], x[1], x[2], x[3], k[0], k[2], k[3], 0, 0};
  const int64_t eff_h = (d.kh - 1) * g.dil_h + 1, eff_w = (d.kw - 1) * g.dil_w + 1;
  const int64_t ph = d.H + g.pad_t + g.pad_b, pw = d.W + g.pad_l + g.pad_r;
  if (ph < eff_h || pw < eff_w)
    throw ConfigError("conv2d: padded extent smaller than effective kernel");
  d.Hout = (ph - eff_h) / g.stride_h + 1;
  d.Wout = (pw - eff_w) / g.stride_w + 1;
  return d;
}

// col[Cin*kh*kw, Hout*Wout] from one sample x[Cin,H,W].
template <typename T>
void im2col(const T* x, const ConvDims& d, const ConvGeom& g, T* col) {
  const int64_t L = d.Hout * d.Wout;
  int64_t row = 0;
  for (int64_t c = 0; c < d.Cin; ++c) {
    const T* xc = x + c * d.H * d.W;
    for (int64_t i = 0; i < d.kh; ++i) {
      for (int64_t j = 0; j < d.kw; ++j, ++row) {
        T* cr = col + row * L;
        for (int64_t oh = 0; oh < d.Hout; ++oh) {
          const int64_t ih = oh * g.stride_h + i * g.dil_h - g.pad_t;
          if (ih < 0 || ih >= d.H) {
            std::fill(cr + oh * d.Wout, cr + (oh + 1) * d.Wout, T(0));
            continue;
          }
          const T* xr = xc + ih * d.W;
          for (int64_t ow = 0; ow < d.Wout; ++ow) {
            const int64_t iw = ow * g.stride_w + j * g.dil_w - g.pad_l;
            cr[oh * d.Wout + ow] = (iw >= 0 && iw < d.W) ? xr[iw] : T(0);
          }
        }
      }
    }
  }
}

// scatter-add adjoint of im2col
template <typename T>
void col2im(const T* col, const ConvDims& d, const ConvGeom& g, T* x) {
  const int64_t L = d.Hout * d.Wout;
  int64_t row = 0;
  for (int64_t c = 0; c < d.Cin; ++c) {
    T* xc = x + c * d.H * d.W;
    for (int64_t i = 0; i < d.kh; ++i) {
      for (int64_t j = 0; j < d.kw; ++j, ++row) {
        const T* cr = col + row * L;
        for (int64_t oh = 0; oh < d.Hout; ++oh) {
          const int64_t ih = oh * g.stride_h + i * g.dil_h - g.pad_t;
          if (ih < 0 || ih >= d.H) continue;
          T* xr = xc + ih * d.W;
          for (int64_t ow = 0; ow < d.Wout; ++ow) {
            const int64_t iw = ow * g.stride_w + j * g.dil_w - g.pad_l;
            if (iw >= 0 && iw < d.W) xr[iw] += cr[oh * d.Wout + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation (no kernel flip). x:[N,Cin,H,W], k:[Cout,Cin,kh,kw].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& k, const ConvGeom& g) {
  const detail::ConvDims d = detail::conv_dims(x.shape(), k.shape(), g);
  const int64_t ckk = d.Cin * d.kh * d.kw, L = d.Hout * d.Wout;
  Tensor<T> v(Shape{d.N, d.Cout, d.Hout, d.Wout});
  std::vector<T> col(static_cast<size_t>(ckk * L));
  for (int64_t n = 0; n < d.N; ++n) {
    detail::im2col(x.value().data.data() + n * d.Cin * d.H * d.W, d, g, col.data());
    detail::gemm(d.Cout, L, ckk, k.value().data.data(), col.data(),
                 v.data.data() + n * d.Cout * L, false);
  }
  auto xn = x.node(), kn = k.node();
  return Var<T>(detail::make_node<T>(std::move(v), {xn, kn}, [xn, kn, d, g](Node<T>& node) {
    const int64_t ckk = d.Cin * d.kh * d.kw, L = d.Hout * d.Wout;
    std::vector<T> col(static_cast<size_t>(ckk * L));
    std::vector<T> gcol(static_cast<size_t>(ckk * L));
    if (xn->requires_grad) xn->ensure_grad();
    if (kn->requires_grad) kn->ensure_grad();
    for (int64_t n = 0; n < d.N; ++n) {
      const T* gy = node.grad.data.data() + n * d.Cout * L;
      if (kn->requires_grad) {
        detail::im2col(xn->value.data.data() + n * d.Cin * d.H * d.W, d, g, col.data());
        // dK += gY * col^T
        detail::gemm_bt(d.Cout, ckk, L, gy, col.data(), kn->grad.data.data(), true);
      }
      if (xn->requires_grad) {
        // gcol = K^T * gY, then scatter back
        detail::gemm_at(ckk, L, d.Cout, kn->value.data.data(), gy, gcol.data(), false);
        detail::col2im(gcol.data(), d, g, xn->grad.data.data() + n * d.Cin * d.H * d.W);
      }
    }
  }));
}

/// Fractionally strided convolution: the exact adjoint of conv2d with the same
/// kernel and geometry. x:[N,C,H,W], k:[C,Cout,kh,kw] (conv kernel mapping
/// Cout -> C). Output spatial size: (in-1)*stride - padTotal + k.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& k, const ConvGeom& g) {
  const Shape& xs = x.shape();
  const Shape& ks = k.shape();
  if (xs.size() != 4 || ks.size() != 4)
    throw ConfigError("conv_transpose2d expects NCHW input and rank-4 kernel");
  if (xs[1] != ks[0])
    throw ConfigError("conv_transpose2d channel mismatch: input C=" + std::to_string(xs[1]) +
                      ", kernel dim0=" + std::to_string(ks[0]));
  if (g.stride_h < 1 || g.stride_w < 1) throw ConfigError("conv_transpose2d: stride >= 1");
  const int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int64_t Cout = ks[1], kh = ks[2], kw = ks[3];
  const int64_t Hout = (H - 1) * g.stride_h - (g.pad_t + g.pad_b) + (kh - 1) * g.dil_h + 1;
  const int64_t Wout = (W - 1) * g.stride_w - (g.pad_l + g.pad_r) + (kw - 1) * g.dil_w + 1;
  if (Hout < 1 || Wout < 1) throw ConfigError("conv_transpose2d: empty output");
  // Geometry of the *forward* conv this op is the adjoint of: input = our
  // output, output = our input.
  detail::ConvDims d{N, Cout, Hout, Wout, C, kh, kw, H, W};
  const int64_t ckk = Cout * kh * kw, L = H * W;
  Tensor<T> v(Shape{N, Cout, Hout, Wout});
  std::vector<T> col(static_cast<size_t>(ckk * L));
  for (int64_t n = 0; n < N; ++n) {
    // col = K^T * x_mat, scattered into the enlarged output
    detail::gemm_at(ckk, L, C, k.value().data.data(),
                    x.value().data.data() + n * C * L, col.data(), false);
    detail::col2im(col.data(), d, g, v.data.data() + n * Cout * Hout * Wout);
  }
  auto xn = x.node(), kn = k.node();
  return Var<T>(detail::make_node<T>(std::move(v), {xn, kn}, [xn, kn, d, g](Node<T>& node) {
    const int64_t C = d.Cout, Cout = d.Cin, L = d.Hout * d.Wout;  // d is conv-view
    const int64_t ckk = Cout * d.kh * d.kw;
    std::vector<T> col(static_cast<size_t>(ckk * L));
    if (xn->requires_grad) xn->ensure_grad();
    if (kn->requires_grad) kn->ensure_grad();
    for (int64_t n = 0; n < d.N; ++n) {
      detail::im2col(node.grad.data.data() + n * Cout * d.H * d.W, d, g, col.data());
      if (xn->requires_grad)
        // dX = K * im2col(gY)  (the forward conv applied to the output grad)
        detail::gemm(C, L, ckk, kn->value.data.data(), col.data(),
                     xn->grad.data.data() + n * C * L, true);
      if (kn->requires_grad)
        // dK = x_mat * im2col(gY)^T
        detail::gemm_bt(C, ckk, L, xn->value.data.data() + n * C * L, col.data(),
                        kn->grad.data.data(), true);
    }
  }));
}

/// Per-side padding that makes a stride-2 kernel-4 dilated conv halve the
/// spatial extent exactly: total pad = 3*d - 1, split floor/ceil.
inline std::pair<int64_t, int64_t> halving_pad(int64_t dilation) {
  const int64_t total = 3 * dilation - 1;
  return {total / 2, total - total / 2};
}

}  // namespace cvu
