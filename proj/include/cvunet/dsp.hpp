// Copyright 2026 the cvunet authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include "cvunet/autodiff.hpp"

namespace cvu {

/// Waveform at the toolkit's fixed 16 kHz rate.
struct Waveform {
  std::vector<float> samples;
  int sample_rate = 16000;
};

constexpr int kSampleRate = 16000;

enum class Encoding { ReIm, MaPh };

inline const char* encoding_name(Encoding e) { return e == Encoding::ReIm ? "ReIm" : "MaPh"; }
inline Encoding encoding_from_name(const std::string& s) {
  if (s == "ReIm") return Encoding::ReIm;
  if (s == "MaPh") return Encoding::MaPh;
  throw ConfigError("unknown encoding '" + s + "' (expected ReIm or MaPh)");
}

/// Magnitude floor for the log-magnitude channel.
constexpr double kMagEps = 1e-7;

// ---------------------------------------------------------------------------
// Framed-DFT STFT/ISTFT. The DFT is realized as explicit basis-matrix
// products, so both directions are ordinary differentiable graph ops and the
// SI-SDR loss can backpropagate through synthesis.
//
// An odd DFT length (2*bins - 1) makes `bins` one-sided bins carry the frame's
// complete information (no Nyquist bin exists), so windowed overlap-add
// reconstruction is exact in the interior.
// ---------------------------------------------------------------------------

template <typename T>
struct StftPlan {
  int64_t bins = 0, frames = 0, fft = 0, hop = 0, seg_len = 0;
  Tensor<T> window;               // [fft], periodic Hann
  Tensor<T> fwd_re, fwd_im;       // [fft, bins]
  Tensor<T> inv_re, inv_im;       // [bins, fft]
  Tensor<T> ola_den;              // [seg_len]
  std::vector<int64_t> gather_idx;  // [frames * fft], reflect-padded frame map

  static StftPlan make(int64_t frames_, int64_t bins_) {
    StftPlan p;
    p.bins = bins_;
    p.frames = frames_;
    p.fft = 2 * bins_ - 1;
    p.hop = std::max<int64_t>(1, (p.fft + 1) * 100 / 512);
    p.seg_len = p.frames * p.hop;

    // Hann with a half-sample offset: strictly positive on [0, fft), so the
    // overlap-add denominator never vanishes and reconstruction is exact at
    // every covered sample.
    p.window = Tensor<T>(Shape{p.fft});
    for (int64_t n = 0; n < p.fft; ++n)
      p.window[n] = static_cast<T>(
          0.5 * (1.0 - std::cos(2.0 * M_PI * (static_cast<double>(n) + 0.5) /
                                static_cast<double>(p.fft))));

    p.fwd_re = Tensor<T>(Shape{p.fft, p.bins});
    p.fwd_im = Tensor<T>(Shape{p.fft, p.bins});
    p.inv_re = Tensor<T>(Shape{p.bins, p.fft});
    p.inv_im = Tensor<T>(Shape{p.bins, p.fft});
    for (int64_t k = 0; k < p.bins; ++k) {
      const double wknorm = (k == 0 ? 1.0 : 2.0) / static_cast<double>(p.fft);
      for (int64_t n = 0; n < p.fft; ++n) {
        const double ang = 2.0 * M_PI * static_cast<double>(k) * static_cast<double>(n) /
                           static_cast<double>(p.fft);
        p.fwd_re[n * p.bins + k] = static_cast<T>(std::cos(ang));
        p.fwd_im[n * p.bins + k] = static_cast<T>(-std::sin(ang));
        p.inv_re[k * p.fft + n] = static_cast<T>(wknorm * std::cos(ang));
        p.inv_im[k * p.fft + n] = static_cast<T>(-wknorm * std::sin(ang));
      }
    }

    // reflect-padded analysis positions
    p.gather_idx.resize(static_cast<size_t>(p.frames * p.fft));
    for (int64_t t = 0; t < p.frames; ++t)
      for (int64_t n = 0; n < p.fft; ++n) {
        int64_t pos = t * p.hop + n;
        while (pos >= p.seg_len || pos < 0) {
          if (pos >= p.seg_len) pos = 2 * p.seg_len - 2 - pos;
          if (pos < 0) pos = -pos;
        }
        p.gather_idx[static_cast<size_t>(t * p.fft + n)] = pos;
      }

    // squared-window overlap-add denominator
    p.ola_den = Tensor<T>(Shape{p.seg_len});
    for (int64_t t = 0; t < p.frames; ++t)
      for (int64_t n = 0; n < p.fft; ++n) {
        const int64_t pos = t * p.hop + n;
        if (pos < p.seg_len) p.ola_den[pos] += p.window[n] * p.window[n];
      }
    T den_min = std::numeric_limits<T>::max();
    for (int64_t n = 0; n < p.seg_len; ++n) den_min = std::min(den_min, p.ola_den[n]);
    if (!(den_min > T(0)))
      throw ConfigError("invalid window/hop pair: overlap-add denominator vanishes");
    return p;
  }

  /// The 1.6 s / 16 kHz configuration: 256 frames x 256 bins.
  static StftPlan standard() { return make(256, 256); }
};

namespace detail {

template <typename T>
Var<T> frame_signal(const Var<T>& wave, const StftPlan<T>& plan) {
  if (wave.shape().size() != 1 || wave.shape()[0] != plan.seg_len)
    throw ConfigError("stft: segment must have exactly " + std::to_string(plan.seg_len) +
                      " samples, got " + shape_str(wave.shape()));
  Tensor<T> v(Shape{plan.frames, plan.fft});
  const auto& idx = plan.gather_idx;
  for (size_t i = 0; i < idx.size(); ++i) v[static_cast<int64_t>(i)] = wave.value()[idx[i]];
  auto wn = wave.node();
  std::vector<int64_t> idx_copy = plan.gather_idx;
  return Var<T>(cvu::detail::make_node<T>(
      std::move(v), {wn}, [wn, idx_copy = std::move(idx_copy)](Node<T>& n) {
        wn->ensure_grad();
        for (size_t i = 0; i < idx_copy.size(); ++i)
          wn->grad[idx_copy[i]] += n.grad[static_cast<int64_t>(i)];
      }));
}

template <typename T>
Var<T> overlap_add(const Var<T>& frames, int64_t hop, int64_t out_len) {
  const int64_t Tn = frames.shape()[0], F = frames.shape()[1];
  Tensor<T> v(Shape{out_len});
  for (int64_t t = 0; t < Tn; ++t)
    for (int64_t n = 0; n < F; ++n) {
      const int64_t pos = t * hop + n;
      if (pos < out_len) v[pos] += frames.value()[t * F + n];
    }
  auto fn = frames.node();
  return Var<T>(cvu::detail::make_node<T>(
      std::move(v), {fn}, [fn, Tn, F, hop, out_len](Node<T>& n) {
        fn->ensure_grad();
        for (int64_t t = 0; t < Tn; ++t)
          for (int64_t f = 0; f < F; ++f) {
            const int64_t pos = t * hop + f;
            if (pos < out_len) fn->grad[t * F + f] += n.grad[pos];
          }
      }));
}

}  // namespace detail

/// Complex spectrogram as a (real, imag) plane pair, each [frames x bins].
template <typename T>
struct SpectroPair {
  Var<T> re, im;
};

/// Windowed framed DFT. Differentiable w.r.t. the waveform.
template <typename T>
SpectroPair<T> stft(const Var<T>& wave, const StftPlan<T>& plan) {
  Var<T> frames = detail::frame_signal(wave, plan);
  Var<T> windowed = mul(frames, Var<T>::constant(plan.window));
  return {matmul(windowed, Var<T>::constant(plan.fwd_re)),
          matmul(windowed, Var<T>::constant(plan.fwd_im))};
}

/// Weighted overlap-add synthesis with squared-window normalization.
/// istft(stft(x)) reproduces x exactly in the interior.
template <typename T>
Var<T> istft(const SpectroPair<T>& spec, const StftPlan<T>& plan) {
  if (spec.re.shape() != Shape{plan.frames, plan.bins} || spec.im.shape() != spec.re.shape())
    throw ConfigError("istft: spectrogram shape does not match plan");
  Var<T> frames = add(matmul(spec.re, Var<T>::constant(plan.inv_re)),
                      matmul(spec.im, Var<T>::constant(plan.inv_im)));
  Var<T> synth = mul(frames, Var<T>::constant(plan.window));
  Var<T> wave = detail::overlap_add(synth, plan.hop, plan.seg_len);
  return div(wave, Var<T>::constant(plan.ola_den));
}

// --- encodings --------------------------------------------------------------

/// Encode a complex spectrogram into the 2-channel network input. Not part of
/// the gradient path (inputs and targets only).
template <typename T>
Tensor<T> encode_spectrogram(const Tensor<T>& re, const Tensor<T>& im, Encoding mode) {
  if (re.shape != im.shape) throw ConfigError("encode: plane shape mismatch");
  Shape os{2};
  for (int64_t d : re.shape) os.push_back(d);
  Tensor<T> out(os);
  const int64_t n = re.numel();
  if (mode == Encoding::ReIm) {
    std::copy(re.data.begin(), re.data.end(), out.data.begin());
    std::copy(im.data.begin(), im.data.end(), out.data.begin() + n);
  } else {
    for (int64_t i = 0; i < n; ++i) {
      const double r = re[i], m = im[i];
      const double mag = std::sqrt(r * r + m * m);
      out[i] = static_cast<T>(std::log(mag + kMagEps));
      out[n + i] = (r == 0 && m == 0) ? T(0) : static_cast<T>(std::atan2(m, r));
    }
  }
  return out;
}

/// Decode a 2-channel tensor (trailing dims = spectrogram planes) back to a
/// complex spectrogram. Differentiable: this sits between the network output
/// and every loss term.
template <typename T>
SpectroPair<T> decode_encoded(const Var<T>& re_ch, const Var<T>& im_ch, Encoding mode) {
  if (mode == Encoding::ReIm) return {re_ch, im_ch};
  // channels are (log-magnitude, phase)
  Var<T> mag = relu(sub(exp(re_ch), Var<T>::scalar(static_cast<T>(kMagEps))));
  return {mul(mag, cos(im_ch)), mul(mag, sin(im_ch))};
}

}  // namespace cvu
