// Copyright 2026 the cvunet authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include "cvunet/dsp.hpp"
#include "cvunet/model.hpp"

namespace cvu {

enum class MagLossScale { linear, log };

struct LossWeights {
  double w_mag = 1.0, w_real = 1.0, w_imag = 1.0, w_sisdr = 1.0;
  double beta = 10.0;
  MagLossScale mag_loss_scale = MagLossScale::linear;

  void validate() const {
    if (w_mag < 0 || w_real < 0 || w_imag < 0 || w_sisdr < 0 || beta < 0)
      throw ConfigError("loss weights must be >= 0");
  }
};

struct LossBreakdown {
  double mse_mag = 0, mse_real = 0, mse_imag = 0, kl = 0, sisdr_db = 0, total = 0;
};

constexpr double kSiSdrCapDb = 100.0;

/// Mean squared error, (1/N) * sum (y - y_hat)^2.
template <typename T>
Var<T> mse(const Var<T>& y_hat, const Var<T>& y) {
  if (y_hat.shape() != y.shape())
    throw ConfigError("mse shape mismatch: " + shape_str(y_hat.shape()) + " vs " +
                      shape_str(y.shape()));
  return mean(square(sub(y_hat, y)));
}

/// Mean over the two planes of KL(N(mu, diag sigma^2) || N(0, I)), averaged
/// over the batch rows.
template <typename T>
Var<T> kl_divergence(const LatentGaussianPair<T>& g) {
  auto plane = [](const Var<T>& mu, const Var<T>& logvar) {
    const T n = static_cast<T>(mu.shape()[0]);
    Var<T> terms = add(mul(mu, mu), sub(sub(exp(logvar), logvar), Var<T>::scalar(T(1))));
    return mul(sum(terms), Var<T>::scalar(T(0.5) / n));
  };
  Var<T> kl_re = plane(g.mu_re, g.logvar_re);
  Var<T> kl_im = plane(g.mu_im, g.logvar_im);
  return mul(add(kl_re, kl_im), Var<T>::scalar(T(0.5)));
}

/// Scale-invariant SDR in dB, capped to [-100, +100] (zero gradient at the
/// caps; exact reconstruction hits +100). `y` is the reference.
template <typename T>
Var<T> si_sdr_db(const Var<T>& y_hat, const Tensor<T>& y) {
  if (y_hat.shape() != y.shape) throw ConfigError("si_sdr: length mismatch");
  double y_energy = 0;
  for (T v : y.data) y_energy += static_cast<double>(v) * static_cast<double>(v);
  if (y_energy <= 0) throw ConfigError("si_sdr: reference signal has zero energy");

  const T tiny = T(1e-12);
  Var<T> yc = Var<T>::constant(y);
  Var<T> alpha = mul(sum(mul(y_hat, yc)), Var<T>::scalar(static_cast<T>(1.0 / y_energy)));
  Var<T> target = mul(alpha, yc);  // [1] x [L] broadcast
  Var<T> err = sub(target, y_hat);
  Var<T> num = add(sum(mul(target, target)), Var<T>::scalar(tiny));
  Var<T> den = add(sum(mul(err, err)), Var<T>::scalar(tiny));
  Var<T> db = mul(log(div(num, den)), Var<T>::scalar(static_cast<T>(10.0 / std::log(10.0))));
  return clamp(db, static_cast<T>(-kSiSdrCapDb), static_cast<T>(kSiSdrCapDb));
}

/// Metric-side SI-SDR on raw sample buffers.
inline double si_sdr_metric(const std::vector<float>& y_hat, const std::vector<float>& y) {
  if (y_hat.size() != y.size()) throw ConfigError("si_sdr: length mismatch");
  double dot = 0, y_energy = 0;
  for (size_t i = 0; i < y.size(); ++i) {
    dot += static_cast<double>(y_hat[i]) * y[i];
    y_energy += static_cast<double>(y[i]) * y[i];
  }
  if (y_energy <= 0) throw ConfigError("si_sdr: reference signal has zero energy");
  const double alpha = dot / y_energy;
  double num = 0, den = 0;
  for (size_t i = 0; i < y.size(); ++i) {
    const double s = alpha * y[i];
    const double e = s - y_hat[i];
    num += s * s;
    den += e * e;
  }
  const double db = 10.0 * std::log10((num + 1e-12) / (den + 1e-12));
  return std::min(kSiSdrCapDb, std::max(-kSiSdrCapDb, db));
}

template <typename T>
struct CompositeLoss {
  Var<T> total;
  LossBreakdown breakdown;
};

/// The full training objective: three spectral MSE terms, the KL regularizer
/// (beta-weighted, zero for the deterministic ablation), minus SI-SDR computed
/// on the synthesized waveform. Differentiable w.r.t. the network output and
/// the latent parameters.
///
/// `out` is the network output as planes [N,1,T,F] in `encoding`;
/// `target_re/im` the clean complex spectrogram, `target_wave` [N, seg_len].
template <typename T>
CompositeLoss<T> composite_loss(const ComplexTensor<T>& out, Encoding encoding,
                                const Tensor<T>& target_re, const Tensor<T>& target_im,
                                const Tensor<T>& target_wave,
                                const std::optional<LatentGaussianPair<T>>& g,
                                const LossWeights& w, const StftPlan<T>& plan) {
  w.validate();
  SpectroPair<T> dec = decode_encoded(out.re, out.im, encoding);
  Var<T> t_re = Var<T>::constant(target_re);
  Var<T> t_im = Var<T>::constant(target_im);

  Var<T> l_real = mse(dec.re, t_re);
  Var<T> l_imag = mse(dec.im, t_im);

  const T tiny = T(1e-12);
  Var<T> mag_hat = sqrt(add(add(mul(dec.re, dec.re), mul(dec.im, dec.im)), Var<T>::scalar(tiny)));
  Var<T> mag_ref = sqrt(add(add(mul(t_re, t_re), mul(t_im, t_im)), Var<T>::scalar(tiny)));
  if (w.mag_loss_scale == MagLossScale::log) {
    mag_hat = log(add(mag_hat, Var<T>::scalar(static_cast<T>(kMagEps))));
    mag_ref = log(add(mag_ref, Var<T>::scalar(static_cast<T>(kMagEps))));
  }
  Var<T> l_mag = mse(mag_hat, mag_ref);

  // SI-SDR on the synthesized waveform, per batch row
  const int64_t N = out.re.shape()[0];
  Var<T> sisdr_sum = Var<T>::scalar(T(0));
  for (int64_t n = 0; n < N; ++n) {
    SpectroPair<T> s{reshape(slice(dec.re, 0, n, 1), Shape{plan.frames, plan.bins}),
                     reshape(slice(dec.im, 0, n, 1), Shape{plan.frames, plan.bins})};
    Var<T> wave = istft(s, plan);
    Tensor<T> ref(Shape{plan.seg_len});
    std::copy_n(target_wave.data.data() + n * plan.seg_len, plan.seg_len, ref.data.data());
    sisdr_sum = add(sisdr_sum, si_sdr_db(reshape(wave, Shape{plan.seg_len}), ref));
  }
  Var<T> l_sisdr = mul(sisdr_sum, Var<T>::scalar(T(1) / static_cast<T>(N)));

  Var<T> l_kl = g ? kl_divergence(*g) : Var<T>::scalar(T(0));

  Var<T> total = add(
      add(add(mul(l_mag, Var<T>::scalar(static_cast<T>(w.w_mag))),
              mul(l_real, Var<T>::scalar(static_cast<T>(w.w_real)))),
          add(mul(l_imag, Var<T>::scalar(static_cast<T>(w.w_imag))),
              mul(l_kl, Var<T>::scalar(static_cast<T>(w.beta))))),
      mul(l_sisdr, Var<T>::scalar(static_cast<T>(-w.w_sisdr))));

  CompositeLoss<T> r;
  r.total = total;
  r.breakdown.mse_mag = static_cast<double>(l_mag.value()[0]);
  r.breakdown.mse_real = static_cast<double>(l_real.value()[0]);
  r.breakdown.mse_imag = static_cast<double>(l_imag.value()[0]);
  r.breakdown.kl = static_cast<double>(l_kl.value()[0]);
  r.breakdown.sisdr_db = static_cast<double>(l_sisdr.value()[0]);
  r.breakdown.total = static_cast<double>(total.value()[0]);
  return r;
}

}  // namespace cvu
