// Copyright 2026 the cvunet authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include "cvunet/autodiff.hpp"

namespace cvu {

/// Central-difference check of a scalar-valued function against reverse-mode
/// gradients. Returns max over coordinates of
///   |analytic - numeric| / max(1, |analytic|, |numeric|).
/// `f` receives a leaf Var built from the candidate point. f64 only; finite
/// differences are not trustworthy at f32.
template <typename F>
double grad_check(F f, const Tensor<double>& point, double eps = 1e-5) {
  Var<double> x = Var<double>::leaf(point);
  Var<double> y = f(x);
  if (y.numel() != 1) throw ConfigError("grad_check: f must be scalar-valued");
  if (!std::isfinite(y.value()[0])) throw NumericError("grad_check: f not finite at point");
  backward(y);
  Tensor<double> analytic = x.grad();

  double worst = 0.0;
  for (int64_t i = 0; i < point.numel(); ++i) {
    Tensor<double> p = point;
    p[i] += eps;
    const double fp = f(Var<double>::constant(p)).value()[0];
    p[i] = point[i] - eps;
    const double fm = f(Var<double>::constant(p)).value()[0];
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("grad_check: f not finite near point");
    const double num = (fp - fm) / (2.0 * eps);
    const double ana = analytic[i];
    const double rel = std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
    worst = std::max(worst, rel);
  }
  return worst;
}

/// Same check but over a random subset of coordinates, for large parameter
/// tensors where the full sweep is too slow.
template <typename F, typename Rng>
double grad_check_sampled(F f, const Tensor<double>& point, int64_t n_coords,
                          Rng& rng, double eps = 1e-5) {
  Var<double> x = Var<double>::leaf(point);
  Var<double> y = f(x);
  if (y.numel() != 1) throw ConfigError("grad_check: f must be scalar-valued");
  backward(y);
  Tensor<double> analytic = x.grad();

  std::uniform_int_distribution<int64_t> pick(0, point.numel() - 1);
  double worst = 0.0;
  for (int64_t s = 0; s < n_coords; ++s) {
    const int64_t i = pick(rng);
    Tensor<double> p = point;
    p[i] += eps;
    const double fp = f(Var<double>::constant(p)).value()[0];
    p[i] = point[i] - eps;
    const double fm = f(Var<double>::constant(p)).value()[0];
    const double num = (fp - fm) / (2.0 * eps);
    const double ana = analytic[i];
    const double rel = std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace cvu
