// Copyright 2026 the cvunet authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include "cvunet/conv.hpp"

namespace cvu {

/// Activations of a complex-valued layer: two equally shaped real planes.
template <typename T>
struct ComplexTensor {
  Var<T> re, im;

  const Shape& shape() const { return re.shape(); }
};

template <typename T>
using ParamList = std::vector<std::pair<std::string, Var<T>>>;
template <typename T>
using BufferList = std::vector<std::pair<std::string, Tensor<T>*>>;

enum class BnMode { whiten, split };

inline const char* bn_mode_name(BnMode m) { return m == BnMode::whiten ? "whiten" : "split"; }
inline BnMode bn_mode_from_name(const std::string& s) {
  if (s == "whiten") return BnMode::whiten;
  if (s == "split") return BnMode::split;
  throw ConfigError("unknown bn_mode '" + s + "'");
}

// ---------------------------------------------------------------------------
// Complex convolution: two real-valued convolutions over the channel-
// concatenated planes; one produces the real, the other the imaginary part.
// ---------------------------------------------------------------------------

template <typename T>
struct ComplexConv {
  Var<T> kernel_re, kernel_im;  // [Cout, 2*Cin, kh, kw]
  ConvGeom geom;

  template <typename Rng>
  static ComplexConv init(int64_t c_in, int64_t c_out, int64_t kh, int64_t kw,
                          ConvGeom geom, Rng& rng) {
    ComplexConv c;
    c.geom = geom;
    const int64_t fan_in = 2 * c_in * kh * kw;
    Tensor<T> kr(Shape{c_out, 2 * c_in, kh, kw}), ki(kr.shape);
    he_uniform_(kr, fan_in, rng);
    he_uniform_(ki, fan_in, rng);
    c.kernel_re = Var<T>::leaf(std::move(kr));
    c.kernel_im = Var<T>::leaf(std::move(ki));
    return c;
  }

  ComplexTensor<T> forward(const ComplexTensor<T>& x) const {
    Var<T> cat = concat<T>({x.re, x.im}, 1);
    return {conv2d(cat, kernel_re, geom), conv2d(cat, kernel_im, geom)};
  }

  void params(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".kernel_re", kernel_re});
    out.push_back({prefix + ".kernel_im", kernel_im});
  }
};

template <typename T>
struct ComplexConvTranspose {
  Var<T> kernel_re, kernel_im;  // [2*Cin, Cout, kh, kw]
  ConvGeom geom;

  template <typename Rng>
  static ComplexConvTranspose init(int64_t c_in, int64_t c_out, int64_t kh, int64_t kw,
                                   ConvGeom geom, Rng& rng) {
    ComplexConvTranspose c;
    c.geom = geom;
    const int64_t fan_in = 2 * c_in * kh * kw;
    Tensor<T> kr(Shape{2 * c_in, c_out, kh, kw}), ki(kr.shape);
    he_uniform_(kr, fan_in, rng);
    he_uniform_(ki, fan_in, rng);
    c.kernel_re = Var<T>::leaf(std::move(kr));
    c.kernel_im = Var<T>::leaf(std::move(ki));
    return c;
  }

  ComplexTensor<T> forward(const ComplexTensor<T>& x) const {
    Var<T> cat = concat<T>({x.re, x.im}, 1);
    return {conv_transpose2d(cat, kernel_re, geom), conv_transpose2d(cat, kernel_im, geom)};
  }

  void params(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".kernel_re", kernel_re});
    out.push_back({prefix + ".kernel_im", kernel_im});
  }
};

// ---------------------------------------------------------------------------
// Complex batch normalization. Default mode whitens each channel's joint
// (re, im) distribution by the inverse square root of its 2x2 covariance;
// `split` mode normalizes the planes independently (ablation).
// ---------------------------------------------------------------------------

template <typename T>
struct ComplexBatchNorm {
  // learnable 2x2 scale and 2-vector shift, per channel
  Var<T> g_rr, g_ri, g_ir, g_ii, b_re, b_im;  // each [C]
  // running statistics (buffers, not trained)
  Tensor<T> run_mean_re, run_mean_im, run_vrr, run_vii, run_vri;  // each [C]
  T momentum = T(0.1);
  T eps = T(1e-5);
  BnMode mode = BnMode::whiten;
  int64_t channels = 0;

  static ComplexBatchNorm init(int64_t c, BnMode mode) {
    ComplexBatchNorm bn;
    bn.channels = c;
    bn.mode = mode;
    bn.g_rr = Var<T>::leaf(Tensor<T>::full(Shape{c}, T(1)));
    bn.g_ri = Var<T>::leaf(Tensor<T>::zeros(Shape{c}));
    bn.g_ir = Var<T>::leaf(Tensor<T>::zeros(Shape{c}));
    bn.g_ii = Var<T>::leaf(Tensor<T>::full(Shape{c}, T(1)));
    bn.b_re = Var<T>::leaf(Tensor<T>::zeros(Shape{c}));
    bn.b_im = Var<T>::leaf(Tensor<T>::zeros(Shape{c}));
    bn.run_mean_re = Tensor<T>::zeros(Shape{c});
    bn.run_mean_im = Tensor<T>::zeros(Shape{c});
    bn.run_vrr = Tensor<T>::full(Shape{c}, T(1));
    bn.run_vii = Tensor<T>::full(Shape{c}, T(1));
    bn.run_vri = Tensor<T>::zeros(Shape{c});
    return bn;
  }

  ComplexTensor<T> forward(const ComplexTensor<T>& x, bool training) {
    if (x.re.shape().size() != 4) throw ConfigError("batchnorm expects NCHW");
    if (x.re.shape()[1] != channels)
      throw ConfigError("batchnorm channel mismatch: got " + std::to_string(x.re.shape()[1]) +
                        ", expected " + std::to_string(channels));
    const Shape cs{1, channels, 1, 1};
    Var<T> mu_re, mu_im, vrr, vii, vri;
    Var<T> xr, xi;
    if (training) {
      mu_re = mean(x.re, {0, 2, 3}, true);
      mu_im = mean(x.im, {0, 2, 3}, true);
      xr = sub(x.re, mu_re);
      xi = sub(x.im, mu_im);
      vrr = mean(mul(xr, xr), {0, 2, 3}, true);
      vii = mean(mul(xi, xi), {0, 2, 3}, true);
      vri = mean(mul(xr, xi), {0, 2, 3}, true);
      update_running(mu_re.value(), mu_im.value(), vrr.value(), vii.value(), vri.value());
    } else {
      mu_re = Var<T>::constant(run_mean_re.reshaped(cs));
      mu_im = Var<T>::constant(run_mean_im.reshaped(cs));
      vrr = Var<T>::constant(run_vrr.reshaped(cs));
      vii = Var<T>::constant(run_vii.reshaped(cs));
      vri = Var<T>::constant(run_vri.reshaped(cs));
      xr = sub(x.re, mu_re);
      xi = sub(x.im, mu_im);
    }
    vrr = add(vrr, Var<T>::scalar(eps));
    vii = add(vii, Var<T>::scalar(eps));

    Var<T> yr, yi;
    if (mode == BnMode::whiten) {
      // closed-form inverse square root of the per-channel 2x2 covariance
      Var<T> s = sqrt(sub(mul(vrr, vii), mul(vri, vri)));
      Var<T> t = sqrt(add(add(vrr, vii), T(2) * s));
      Var<T> denom = mul(s, t);
      Var<T> wrr = div(add(vii, s), denom);
      Var<T> wii = div(add(vrr, s), denom);
      Var<T> wri = div(neg(vri), denom);
      yr = add(mul(wrr, xr), mul(wri, xi));
      yi = add(mul(wri, xr), mul(wii, xi));
    } else {
      yr = div(xr, sqrt(vrr));
      yi = div(xi, sqrt(vii));
    }

    auto ch = [&](const Var<T>& p) { return reshape(p, cs); };
    Var<T> zr = add(add(mul(ch(g_rr), yr), mul(ch(g_ri), yi)), ch(b_re));
    Var<T> zi = add(add(mul(ch(g_ir), yr), mul(ch(g_ii), yi)), ch(b_im));
    return {zr, zi};
  }

  void params(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".g_rr", g_rr});
    out.push_back({prefix + ".g_ri", g_ri});
    out.push_back({prefix + ".g_ir", g_ir});
    out.push_back({prefix + ".g_ii", g_ii});
    out.push_back({prefix + ".b_re", b_re});
    out.push_back({prefix + ".b_im", b_im});
  }
  void buffers(BufferList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".run_mean_re", &run_mean_re});
    out.push_back({prefix + ".run_mean_im", &run_mean_im});
    out.push_back({prefix + ".run_vrr", &run_vrr});
    out.push_back({prefix + ".run_vii", &run_vii});
    out.push_back({prefix + ".run_vri", &run_vri});
  }

 private:
  void update_running(const Tensor<T>& mr, const Tensor<T>& mi, const Tensor<T>& rr,
                      const Tensor<T>& ii, const Tensor<T>& ri) {
    for (int64_t c = 0; c < channels; ++c) {
      run_mean_re[c] = (T(1) - momentum) * run_mean_re[c] + momentum * mr[c];
      run_mean_im[c] = (T(1) - momentum) * run_mean_im[c] + momentum * mi[c];
      run_vrr[c] = (T(1) - momentum) * run_vrr[c] + momentum * rr[c];
      run_vii[c] = (T(1) - momentum) * run_vii[c] + momentum * ii[c];
      run_vri[c] = (T(1) - momentum) * run_vri[c] + momentum * ri[c];
    }
  }
};

// ---------------------------------------------------------------------------
// cPReLU: PReLU applied per plane with per-channel learnable slopes.
// ---------------------------------------------------------------------------

template <typename T>
struct CPrelu {
  Var<T> slope_re, slope_im;  // [C], init 0.25

  static CPrelu init(int64_t c) {
    CPrelu p;
    p.slope_re = Var<T>::leaf(Tensor<T>::full(Shape{c}, T(0.25)));
    p.slope_im = Var<T>::leaf(Tensor<T>::full(Shape{c}, T(0.25)));
    return p;
  }

  static Var<T> prelu(const Var<T>& x, const Var<T>& slope) {
    const Shape cs{1, slope.shape()[0], 1, 1};
    Var<T> pos = relu(x);
    return add(pos, mul(reshape(slope, cs), sub(x, pos)));
  }

  ComplexTensor<T> forward(const ComplexTensor<T>& x) const {
    return {prelu(x.re, slope_re), prelu(x.im, slope_im)};
  }

  void params(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".slope_re", slope_re});
    out.push_back({prefix + ".slope_im", slope_im});
  }
};

// ---------------------------------------------------------------------------
// Self-attention over spatial positions, computed independently per plane.
// Single head, C/8 query/key bottleneck, residual with zero-initialized gain.
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionPlane {
  Var<T> wq, wk;  // [C8, C]
  Var<T> wv;      // [C, C]
  Var<T> gamma;   // [1], init 0

  template <typename Rng>
  static AttentionPlane init(int64_t c, Rng& rng) {
    AttentionPlane a;
    const int64_t c8 = std::max<int64_t>(1, c / 8);
    Tensor<T> q(Shape{c8, c}), k(Shape{c8, c}), v(Shape{c, c});
    he_uniform_(q, c, rng);
    he_uniform_(k, c, rng);
    he_uniform_(v, c, rng);
    a.wq = Var<T>::leaf(std::move(q));
    a.wk = Var<T>::leaf(std::move(k));
    a.wv = Var<T>::leaf(std::move(v));
    a.gamma = Var<T>::leaf(Tensor<T>::zeros(Shape{1}));
    return a;
  }

  Var<T> forward(const Var<T>& x) const {
    const Shape& s = x.shape();
    const int64_t N = s[0], C = s[1], H = s[2], W = s[3];
    const int64_t c8 = wq.shape()[0];
    const T scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(c8)));
    std::vector<Var<T>> outs;
    outs.reserve(static_cast<size_t>(N));
    for (int64_t n = 0; n < N; ++n) {
      Var<T> xs = reshape(slice(x, 0, n, 1), Shape{C, H * W});
      Var<T> q = matmul(wq, xs);
      Var<T> k = matmul(wk, xs);
      Var<T> v = matmul(wv, xs);
      Var<T> scores = mul(matmul(transpose2d(q), k), Var<T>::scalar(scale));
      Var<T> attn = softmax_rows(scores);  // rows sum to 1
      Var<T> ctx = matmul(v, transpose2d(attn));
      Var<T> y = add(xs, mul(gamma, ctx));
      outs.push_back(reshape(y, Shape{1, C, H, W}));
    }
    return outs.size() == 1 ? outs[0] : concat(outs, 0);
  }

  void params(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".wq", wq});
    out.push_back({prefix + ".wk", wk});
    out.push_back({prefix + ".wv", wv});
    out.push_back({prefix + ".gamma", gamma});
  }
};

template <typename T>
struct ComplexSelfAttention {
  AttentionPlane<T> plane_re, plane_im;

  template <typename Rng>
  static ComplexSelfAttention init(int64_t c, Rng& rng) {
    return {AttentionPlane<T>::init(c, rng), AttentionPlane<T>::init(c, rng)};
  }

  ComplexTensor<T> forward(const ComplexTensor<T>& x) const {
    return {plane_re.forward(x.re), plane_im.forward(x.im)};
  }

  void params(ParamList<T>& out, const std::string& prefix) const {
    plane_re.params(out, prefix + ".re");
    plane_im.params(out, prefix + ".im");
  }
};

}  // namespace cvu
