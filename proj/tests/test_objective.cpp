// Copyright 2026 the cvunet authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <doctest.h>

#include "cvunet/gradcheck.hpp"
#include "cvunet/objective.hpp"

using namespace cvu;

namespace {

Tensor<double> rndt(Shape s, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data) v = d(rng);
  return t;
}

template <typename T>
LatentGaussianPair<T> gaussians(const Tensor<T>& mu_re, const Tensor<T>& lv_re,
                                const Tensor<T>& mu_im, const Tensor<T>& lv_im) {
  return {Var<T>::constant(mu_re), Var<T>::constant(lv_re), Var<T>::constant(mu_im),
          Var<T>::constant(lv_im)};
}

// Perfect-prediction fixture: targets derived from a real waveform, network
// output equal to the encoded target spectrogram.
struct PerfectCase {
  StftPlan<double> plan = StftPlan<double>::make(8, 16);
  Tensor<double> wave, t_re, t_im;
  ComplexTensor<double> out;

  explicit PerfectCase(uint64_t seed) {
    wave = rndt(Shape{1, StftPlan<double>::make(8, 16).seg_len}, seed);
    Tensor<double> seg(Shape{plan.seg_len});
    std::copy(wave.data.begin(), wave.data.end(), seg.data.begin());
    auto spec = stft(Var<double>::constant(seg), plan);
    t_re = spec.re.value().reshaped({1, 1, plan.frames, plan.bins});
    t_im = spec.im.value().reshaped({1, 1, plan.frames, plan.bins});
    out = {Var<double>::constant(t_re), Var<double>::constant(t_im)};
  }
};

}  // namespace

TEST_CASE("mse oracles") {
  Tensor<double> yh(Shape{3}, {1.0, 2.0, 3.0});
  Tensor<double> y(Shape{3}, {0.0, 2.0, 5.0});
  CHECK(mse(Var<double>::constant(yh), Var<double>::constant(y)).value()[0] ==
        doctest::Approx(5.0 / 3.0).epsilon(1e-12));
  CHECK(mse(Var<double>::constant(y), Var<double>::constant(y)).value()[0] == 0.0);
  CHECK_THROWS_AS(mse(Var<double>::constant(yh),
                      Var<double>::constant(Tensor<double>::zeros({4}))),
                  ConfigError);
}

TEST_CASE("KL oracle: standard normal posterior gives zero") {
  Tensor<double> z = Tensor<double>::zeros({1, 4});
  auto kl = kl_divergence(gaussians(z, z, z, z));
  CHECK(kl.value()[0] == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("KL oracle: unit mean in one plane, one dim, gives 0.25") {
  Tensor<double> z = Tensor<double>::zeros({1, 1});
  Tensor<double> one = Tensor<double>::full({1, 1}, 1.0);
  auto kl = kl_divergence(gaussians(one, z, z, z));
  // plane term 0.5 * mu^2 = 0.5, averaged over the two planes -> 0.25
  CHECK(kl.value()[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("KL oracle: logvar ln(2) in one plane gives ~0.076715") {
  Tensor<double> z = Tensor<double>::zeros({1, 1});
  Tensor<double> lv = Tensor<double>::full({1, 1}, std::log(2.0));
  auto kl = kl_divergence(gaussians(z, lv, z, z));
  const double expect = 0.5 * 0.5 * (2.0 - std::log(2.0) - 1.0);  // 0.0767075...
  CHECK(kl.value()[0] == doctest::Approx(expect).epsilon(1e-12));
  CHECK(kl.value()[0] == doctest::Approx(0.0767).epsilon(1e-3));
}

TEST_CASE("KL averages over batch rows") {
  Tensor<double> z1 = Tensor<double>::zeros({1, 1});
  Tensor<double> one1 = Tensor<double>::full({1, 1}, 1.0);
  const double kl1 = kl_divergence(gaussians(one1, z1, z1, z1)).value()[0];
  Tensor<double> z4 = Tensor<double>::zeros({4, 1});
  Tensor<double> one4 = Tensor<double>::full({4, 1}, 1.0);
  const double kl4 = kl_divergence(gaussians(one4, z4, z4, z4)).value()[0];
  CHECK(kl4 == doctest::Approx(kl1).epsilon(1e-12));
}

TEST_CASE("si_sdr oracle: y_hat=[1,1], y=[1,0] gives 0 dB") {
  Tensor<double> yh(Shape{2}, {1.0, 1.0});
  Tensor<double> y(Shape{2}, {1.0, 0.0});
  CHECK(si_sdr_db(Var<double>::constant(yh), y).value()[0] ==
        doctest::Approx(0.0).epsilon(1e-12));
  CHECK(si_sdr_metric({1.0f, 1.0f}, {1.0f, 0.0f}) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("si_sdr caps at +100 dB for perfect and scaled reconstruction") {
  Tensor<double> y = rndt({64}, 3);
  CHECK(si_sdr_db(Var<double>::constant(y), y).value()[0] == 100.0);
  Tensor<double> y2 = y;
  for (auto& v : y2.data) v *= 2.0;  // exact scale invariance
  CHECK(si_sdr_db(Var<double>::constant(y2), y).value()[0] == 100.0);
}

TEST_CASE("si_sdr caps at -100 dB for an orthogonal estimate") {
  Tensor<double> y(Shape{2}, {1.0, 0.0});
  Tensor<double> yh(Shape{2}, {0.0, 1.0});
  CHECK(si_sdr_db(Var<double>::constant(yh), y).value()[0] == -100.0);
}

TEST_CASE("si_sdr is invariant to rescaling the estimate") {
  std::vector<float> y(128), yh(128);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  for (size_t i = 0; i < y.size(); ++i) {
    y[i] = d(rng);
    yh[i] = y[i] + 0.3f * d(rng);
  }
  const double base = si_sdr_metric(yh, y);
  std::vector<float> yh2 = yh;
  for (auto& v : yh2) v *= 2.0f;
  CHECK(si_sdr_metric(yh2, y) == doctest::Approx(base).epsilon(1e-6));
}

TEST_CASE("si_sdr is invariant to a common permutation") {
  std::vector<float> y(64), yh(64);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  for (size_t i = 0; i < y.size(); ++i) {
    y[i] = d(rng);
    yh[i] = y[i] + 0.2f * d(rng);
  }
  const double base = si_sdr_metric(yh, y);
  std::vector<float> yp(y.rbegin(), y.rend()), yhp(yh.rbegin(), yh.rend());
  CHECK(si_sdr_metric(yhp, yp) == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("si_sdr rejects a zero-energy reference") {
  Tensor<double> y = Tensor<double>::zeros({8});
  Tensor<double> yh = Tensor<double>::full({8}, 1.0);
  CHECK_THROWS_AS(si_sdr_db(Var<double>::constant(yh), y), ConfigError);
  CHECK_THROWS_AS(si_sdr_metric(std::vector<float>(8, 1.0f), std::vector<float>(8, 0.0f)),
                  ConfigError);
}

TEST_CASE("si_sdr gradient is zero at the cap and finite-difference exact inside") {
  Tensor<double> y = rndt({32}, 7);
  // at cap: perfect reconstruction
  Var<double> at_cap = Var<double>::leaf(y);
  backward(si_sdr_db(at_cap, y));
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(at_cap.grad()[i] == 0.0);
  // inside the range
  Tensor<double> noisy = y;
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> d(-0.2, 0.2);
  for (auto& v : noisy.data) v += d(rng);
  double err = grad_check([&](Var<double> x) { return si_sdr_db(x, y); }, noisy, 1e-6);
  CHECK(err < 1e-5);
}

TEST_CASE("composite loss: perfect reconstruction scores -100 * w_sisdr") {
  PerfectCase pc(11);
  Tensor<double> mu = Tensor<double>::zeros({1, 4});
  auto g = gaussians(mu, mu, mu, mu);
  LossWeights w;  // defaults, beta = 10
  auto r = composite_loss<double>(pc.out, Encoding::ReIm, pc.t_re, pc.t_im, pc.wave,
                                  std::optional<LatentGaussianPair<double>>(g), w, pc.plan);
  CHECK(r.breakdown.mse_mag == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.breakdown.mse_real == 0.0);
  CHECK(r.breakdown.mse_imag == 0.0);
  CHECK(r.breakdown.kl == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(r.breakdown.sisdr_db == 100.0);
  CHECK(r.breakdown.total == doctest::Approx(-100.0).epsilon(1e-9));
}

TEST_CASE("composite loss recombines from its breakdown") {
  PerfectCase pc(13);
  // perturb the output so every term is active
  Tensor<double> o_re = pc.t_re, o_im = pc.t_im;
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> d(-0.1, 0.1);
  for (auto& v : o_re.data) v += d(rng);
  for (auto& v : o_im.data) v += d(rng);
  ComplexTensor<double> out{Var<double>::constant(o_re), Var<double>::constant(o_im)};
  Tensor<double> mu = rndt({1, 4}, 15, -0.5, 0.5);
  Tensor<double> lv = rndt({1, 4}, 16, -0.5, 0.5);
  auto g = gaussians(mu, lv, mu, lv);
  LossWeights w;
  w.w_mag = 0.7;
  w.w_real = 1.3;
  w.w_imag = 0.9;
  w.w_sisdr = 0.4;
  w.beta = 2.5;
  auto r = composite_loss<double>(out, Encoding::ReIm, pc.t_re, pc.t_im, pc.wave,
                                  std::optional<LatentGaussianPair<double>>(g), w, pc.plan);
  const double recomposed = w.w_mag * r.breakdown.mse_mag + w.w_real * r.breakdown.mse_real +
                            w.w_imag * r.breakdown.mse_imag + w.beta * r.breakdown.kl -
                            w.w_sisdr * r.breakdown.sisdr_db;
  CHECK(r.breakdown.total == doctest::Approx(recomposed).epsilon(1e-6));
}

TEST_CASE("doubling beta moves the total by exactly kl") {
  PerfectCase pc(17);
  Tensor<double> o_re = pc.t_re;
  for (auto& v : o_re.data) v += 0.05;
  ComplexTensor<double> out{Var<double>::constant(o_re), Var<double>::constant(pc.t_im)};
  Tensor<double> mu = rndt({1, 3}, 18, -1.0, 1.0);
  Tensor<double> lv = rndt({1, 3}, 19, -1.0, 1.0);
  auto g = gaussians(mu, lv, mu, lv);
  LossWeights w1, w2;
  w1.beta = 10.0;
  w2.beta = 20.0;
  auto opt_g = std::optional<LatentGaussianPair<double>>(g);
  auto r1 = composite_loss<double>(out, Encoding::ReIm, pc.t_re, pc.t_im, pc.wave, opt_g, w1,
                                   pc.plan);
  auto r2 = composite_loss<double>(out, Encoding::ReIm, pc.t_re, pc.t_im, pc.wave, opt_g, w2,
                                   pc.plan);
  CHECK(r2.breakdown.total - r1.breakdown.total ==
        doctest::Approx(10.0 * r1.breakdown.kl).epsilon(1e-9));
  CHECK(r1.breakdown.kl > 0.0);
}

TEST_CASE("deterministic ablation: no latent means zero KL") {
  PerfectCase pc(21);
  LossWeights w;
  auto r = composite_loss<double>(pc.out, Encoding::ReIm, pc.t_re, pc.t_im, pc.wave,
                                  std::nullopt, w, pc.plan);
  CHECK(r.breakdown.kl == 0.0);
  CHECK(r.breakdown.total == doctest::Approx(-100.0).epsilon(1e-9));
}

TEST_CASE("composite loss under MaPh encoding round-trips a perfect prediction") {
  PerfectCase pc(23);
  Tensor<double> enc = encode_spectrogram(pc.t_re, pc.t_im, Encoding::MaPh);
  const int64_t n = pc.t_re.numel();
  Tensor<double> logm(pc.t_re.shape, {enc.data.begin(), enc.data.begin() + n});
  Tensor<double> phase(pc.t_re.shape, {enc.data.begin() + n, enc.data.end()});
  ComplexTensor<double> out{Var<double>::constant(logm), Var<double>::constant(phase)};
  LossWeights w;
  auto r = composite_loss<double>(out, Encoding::MaPh, pc.t_re, pc.t_im, pc.wave,
                                  std::nullopt, w, pc.plan);
  CHECK(r.breakdown.mse_real < 1e-12);
  CHECK(r.breakdown.mse_imag < 1e-12);
  CHECK(r.breakdown.sisdr_db > 99.0);
}

TEST_CASE("log magnitude scale changes only the magnitude term") {
  PerfectCase pc(25);
  Tensor<double> o_re = pc.t_re;
  for (auto& v : o_re.data) v += 0.03;
  ComplexTensor<double> out{Var<double>::constant(o_re), Var<double>::constant(pc.t_im)};
  LossWeights lin, lg;
  lg.mag_loss_scale = MagLossScale::log;
  auto r1 = composite_loss<double>(out, Encoding::ReIm, pc.t_re, pc.t_im, pc.wave,
                                   std::nullopt, lin, pc.plan);
  auto r2 = composite_loss<double>(out, Encoding::ReIm, pc.t_re, pc.t_im, pc.wave,
                                   std::nullopt, lg, pc.plan);
  CHECK(r1.breakdown.mse_mag != r2.breakdown.mse_mag);
  CHECK(r1.breakdown.mse_real == r2.breakdown.mse_real);
  CHECK(r1.breakdown.sisdr_db == r2.breakdown.sisdr_db);
}

TEST_CASE("negative weights are rejected") {
  PerfectCase pc(27);
  LossWeights w;
  w.beta = -1.0;
  CHECK_THROWS_AS(composite_loss<double>(pc.out, Encoding::ReIm, pc.t_re, pc.t_im, pc.wave,
                                         std::nullopt, w, pc.plan),
                  ConfigError);
}

TEST_CASE("composite loss gradient matches finite differences") {
  PerfectCase pc(29);
  Tensor<double> o_re = pc.t_re, o_im = pc.t_im;
  std::mt19937_64 rng(30);
  std::uniform_real_distribution<double> d(-0.2, 0.2);
  for (auto& v : o_re.data) v += d(rng);
  for (auto& v : o_im.data) v += d(rng);
  Tensor<double> mu = rndt({1, 4}, 31, -0.5, 0.5);
  Tensor<double> lv = rndt({1, 4}, 32, -0.5, 0.5);
  LossWeights w;
  w.beta = 3.0;

  auto loss_of = [&](const Var<double>& re_in) {
    ComplexTensor<double> out{re_in, Var<double>::constant(o_im)};
    auto g = gaussians(mu, lv, mu, lv);
    return composite_loss<double>(out, Encoding::ReIm, pc.t_re, pc.t_im, pc.wave,
                                  std::optional<LatentGaussianPair<double>>(g), w, pc.plan)
        .total;
  };
  std::mt19937_64 coord_rng(33);
  double err = grad_check_sampled([&](Var<double> x) { return loss_of(x); }, o_re, 12,
                                  coord_rng, 1e-5);
  CHECK(err < 1e-3);

  // and w.r.t. the latent parameters
  auto loss_of_mu = [&](const Var<double>& mu_in) {
    ComplexTensor<double> out{Var<double>::constant(o_re), Var<double>::constant(o_im)};
    LatentGaussianPair<double> g{mu_in, Var<double>::constant(lv), Var<double>::constant(mu),
                                 Var<double>::constant(lv)};
    return composite_loss<double>(out, Encoding::ReIm, pc.t_re, pc.t_im, pc.wave,
                                  std::optional<LatentGaussianPair<double>>(g), w, pc.plan)
        .total;
  };
  err = grad_check([&](Var<double> x) { return loss_of_mu(x); }, mu, 1e-6);
  CHECK(err < 1e-5);
}
