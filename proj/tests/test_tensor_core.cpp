// Copyright 2026 the cvunet authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <doctest.h>

#include "cvunet/conv.hpp"
#include "cvunet/gradcheck.hpp"

using namespace cvu;

namespace {

// Independent quadruple-loop convolution oracle (cross-correlation).
template <typename T>
Tensor<T> conv_oracle(const Tensor<T>& x, const Tensor<T>& k, const ConvGeom& g) {
  const int64_t N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int64_t Cout = k.shape[0], kh = k.shape[2], kw = k.shape[3];
  const int64_t Hout = (H + g.pad_t + g.pad_b - ((kh - 1) * g.dil_h + 1)) / g.stride_h + 1;
  const int64_t Wout = (W + g.pad_l + g.pad_r - ((kw - 1) * g.dil_w + 1)) / g.stride_w + 1;
  Tensor<T> y(Shape{N, Cout, Hout, Wout});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Cout; ++co)
      for (int64_t oh = 0; oh < Hout; ++oh)
        for (int64_t ow = 0; ow < Wout; ++ow) {
          T acc = 0;
          for (int64_t ci = 0; ci < Cin; ++ci)
            for (int64_t i = 0; i < kh; ++i)
              for (int64_t j = 0; j < kw; ++j) {
                const int64_t ih = oh * g.stride_h + i * g.dil_h - g.pad_t;
                const int64_t iw = ow * g.stride_w + j * g.dil_w - g.pad_l;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x[((n * Cin + ci) * H + ih) * W + iw] *
                       k[((co * Cin + ci) * kh + i) * kw + j];
              }
          y[((n * Cout + co) * Hout + oh) * Wout + ow] = acc;
        }
  return y;
}

template <typename T>
Tensor<T> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(s));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data) v = static_cast<T>(d(rng));
  return t;
}

double dot_all(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("conv2d identity kernel reproduces input") {
  std::mt19937_64 rng(7);
  Tensor<double> x = random_tensor<double>({1, 1, 4, 4}, rng);
  Tensor<double> k(Shape{1, 1, 1, 1});
  k[0] = 1.0;
  auto y = conv2d(Var<double>::constant(x), Var<double>::constant(k), ConvGeom{});
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.value()[i] == x[i]);
}

TEST_CASE("conv2d all-ones 5x5 with 3x3 kernel gives 9s") {
  Tensor<double> x = Tensor<double>::full({1, 1, 5, 5}, 1.0);
  Tensor<double> k = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(Var<double>::constant(x), Var<double>::constant(k), ConvGeom{});
  REQUIRE(y.shape() == Shape{1, 1, 3, 3});
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.value()[i] == doctest::Approx(9.0));
}

TEST_CASE("conv2d dilation 3 on 9x9 all-ones gives 9s at 3x3") {
  Tensor<double> x = Tensor<double>::full({1, 1, 9, 9}, 1.0);
  Tensor<double> k = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  ConvGeom g;
  g.dil_h = g.dil_w = 3;
  auto y = conv2d(Var<double>::constant(x), Var<double>::constant(k), g);
  REQUIRE(y.shape() == Shape{1, 1, 3, 3});
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.value()[i] == doctest::Approx(9.0));
}

TEST_CASE("conv2d matches brute-force oracle on random cases") {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 5; ++rep) {
    Tensor<double> x = random_tensor<double>({2, 3, 7, 8}, rng);
    Tensor<double> k = random_tensor<double>({4, 3, 3, 2}, rng);
    ConvGeom g;
    g.stride_h = 1 + rep % 2;
    g.stride_w = 1;
    g.dil_h = 1;
    g.dil_w = 1 + rep % 3;
    g.pad_t = rep % 2;
    g.pad_b = 1;
    g.pad_l = 0;
    g.pad_r = rep % 3;
    auto y = conv2d(Var<double>::constant(x), Var<double>::constant(k), g);
    Tensor<double> ref = conv_oracle(x, k, g);
    REQUIRE(y.shape() == ref.shape);
    for (int64_t i = 0; i < ref.numel(); ++i)
      CHECK(y.value()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv2d rejects channel mismatch") {
  Tensor<double> x = Tensor<double>::full({1, 2, 4, 4}, 1.0);
  Tensor<double> k = Tensor<double>::full({1, 3, 3, 3}, 1.0);
  CHECK_THROWS_AS(conv2d(Var<double>::constant(x), Var<double>::constant(k), ConvGeom{}),
                  ConfigError);
}

TEST_CASE("conv_transpose2d shape contract: stride 2 kernel 4 pad 1 doubles size") {
  std::mt19937_64 rng(3);
  Tensor<double> x = random_tensor<double>({1, 1, 2, 2}, rng);
  Tensor<double> k = random_tensor<double>({1, 1, 4, 4}, rng);
  ConvGeom g;
  g.stride_h = g.stride_w = 2;
  g.pad_t = g.pad_b = g.pad_l = g.pad_r = 1;
  auto y = conv_transpose2d(Var<double>::constant(x), Var<double>::constant(k), g);
  CHECK(y.shape() == Shape{1, 1, 4, 4});
}

TEST_CASE("conv_transpose2d impulse response reproduces kernel") {
  std::mt19937_64 rng(5);
  Tensor<double> x = Tensor<double>::zeros({1, 1, 1, 1});
  x[0] = 1.0;
  Tensor<double> k = random_tensor<double>({1, 1, 3, 3}, rng);
  auto y = conv_transpose2d(Var<double>::constant(x), Var<double>::constant(k), ConvGeom{});
  REQUIRE(y.shape() == Shape{1, 1, 3, 3});
  for (int64_t i = 0; i < 9; ++i) CHECK(y.value()[i] == doctest::Approx(k[i]));
}

TEST_CASE("adjoint identity: <conv(x,k), y> == <x, convT(y,k)>") {
  std::mt19937_64 rng(13);
  for (int rep = 0; rep < 4; ++rep) {
    const bool strided = rep % 2;
    // strided geometry chosen so conv's output-size division is exact (6 -> 3 -> 6)
    const int64_t ksz = strided ? 4 : 3;
    Tensor<double> x = random_tensor<double>({1, 2, 6, 6}, rng);
    Tensor<double> k = random_tensor<double>({3, 2, ksz, ksz}, rng);
    ConvGeom g;
    g.stride_h = g.stride_w = strided ? 2 : 1;
    g.pad_t = g.pad_b = g.pad_l = g.pad_r = strided ? 1 : 0;
    auto cx = conv2d(Var<double>::constant(x), Var<double>::constant(k), g);
    Tensor<double> y = random_tensor<double>(cx.shape(), rng);
    auto aty = conv_transpose2d(Var<double>::constant(y), Var<double>::constant(k), g);
    REQUIRE(aty.shape() == x.shape);
    CHECK(dot_all(cx.value(), y) == doctest::Approx(dot_all(x, aty.value())).epsilon(1e-10));
  }
}

TEST_CASE("linear: identity weight, hand oracle, bias broadcast") {
  Tensor<double> w_id(Shape{2, 2});
  w_id[0] = 1;
  w_id[3] = 1;
  Tensor<double> x(Shape{1, 2}, {1.0, 2.0});
  Tensor<double> b0 = Tensor<double>::zeros({2});
  auto y = linear(Var<double>::constant(x), Var<double>::constant(w_id), Var<double>::constant(b0));
  CHECK(y.value()[0] == 1.0);
  CHECK(y.value()[1] == 2.0);

  Tensor<double> w(Shape{2, 2}, {1.0, 1.0, 0.0, 1.0});
  auto y2 = linear(Var<double>::constant(x), Var<double>::constant(w), Var<double>::constant(b0));
  CHECK(y2.value()[0] == 3.0);
  CHECK(y2.value()[1] == 2.0);

  Tensor<double> zeros(Shape{3, 2});
  Tensor<double> b(Shape{2}, {0.5, -1.5});
  auto y3 = linear(Var<double>::constant(zeros), Var<double>::constant(w), Var<double>::constant(b));
  for (int64_t i = 0; i < 3; ++i) {
    CHECK(y3.value()[i * 2] == 0.5);
    CHECK(y3.value()[i * 2 + 1] == -1.5);
  }

  CHECK_THROWS_AS(linear(Var<double>::constant(x),
                         Var<double>::constant(Tensor<double>::zeros({2, 3})),
                         Var<double>::constant(b0)),
                  ConfigError);
}

TEST_CASE("backward: sum(x^2) gives 2x") {
  std::mt19937_64 rng(17);
  Tensor<double> xv = random_tensor<double>({3, 4}, rng);
  Var<double> x = Var<double>::leaf(xv);
  backward(sum(square(x)));
  for (int64_t i = 0; i < xv.numel(); ++i)
    CHECK(x.grad()[i] == doctest::Approx(2.0 * xv[i]).epsilon(1e-14));
}

TEST_CASE("backward rejects non-scalar root") {
  Var<double> x = Var<double>::leaf(Tensor<double>::full({3}, 1.0));
  CHECK_THROWS_AS(backward(square(x)), ConfigError);
}

TEST_CASE("backward: conv grads match finite differences") {
  std::mt19937_64 rng(19);
  Tensor<double> xv = random_tensor<double>({1, 1, 3, 3}, rng);
  Tensor<double> kv = random_tensor<double>({1, 1, 2, 2}, rng);
  // w.r.t. input
  double err = grad_check(
      [&](Var<double> x) { return sum(conv2d(x, Var<double>::constant(kv), ConvGeom{})); }, xv);
  CHECK(err < 1e-6);
  // w.r.t. kernel
  err = grad_check(
      [&](Var<double> k) { return sum(conv2d(Var<double>::constant(xv), k, ConvGeom{})); }, kv);
  CHECK(err < 1e-6);
}

TEST_CASE("backward: constant leaf off the path gets zero grad") {
  Var<double> x = Var<double>::leaf(Tensor<double>::full({2}, 3.0));
  Var<double> unused = Var<double>::leaf(Tensor<double>::full({2}, 5.0));
  backward(sum(square(x)));
  // 'unused' never entered the graph; its grad was never materialized
  CHECK_FALSE(unused.node()->grad_ready);
}

TEST_CASE("backward overwrites gradients between calls") {
  Tensor<double> xv(Shape{2}, {1.0, 2.0});
  Var<double> x = Var<double>::leaf(xv);
  Var<double> loss = sum(square(x));
  backward(loss);
  Tensor<double> g1 = x.grad();
  backward(loss);
  for (int64_t i = 0; i < 2; ++i) CHECK(x.grad()[i] == g1[i]);
}

TEST_CASE("grad_check: quadratic is exact to roundoff") {
  std::mt19937_64 rng(23);
  Tensor<double> p = random_tensor<double>({6}, rng);
  CHECK(grad_check([](Var<double> x) { return sum(square(x)); }, p) < 1e-8);
}

TEST_CASE("grad_check: conv -> prelu -> sum composite away from kinks") {
  std::mt19937_64 rng(29);
  Tensor<double> kv = random_tensor<double>({2, 1, 3, 3}, rng);
  Tensor<double> slope = Tensor<double>::full({2}, 0.25);
  Tensor<double> xv = random_tensor<double>({1, 1, 5, 5}, rng, 0.2, 1.0);  // away from 0
  double err = grad_check(
      [&](Var<double> x) {
        auto y = conv2d(x, Var<double>::constant(kv), ConvGeom{});
        auto pos = relu(y);
        auto act = add(pos, mul(reshape(Var<double>::constant(slope), {1, 2, 1, 1}),
                                sub(y, pos)));
        return sum(act);
      },
      xv);
  CHECK(err < 1e-4);
}

TEST_CASE("grad_check flags a corrupted backward rule") {
  std::mt19937_64 rng(31);
  Tensor<double> p = random_tensor<double>({5}, rng, 0.5, 1.5);
  // op with correct forward x^2 but backward deliberately claiming d/dx = 3x
  auto bad_square = [](const Var<double>& a) {
    Tensor<double> v(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) v[i] = a.value()[i] * a.value()[i];
    auto an = a.node();
    return Var<double>(cvu::detail::make_node<double>(std::move(v), {an}, [an](Node<double>& n) {
      an->ensure_grad();
      for (int64_t i = 0; i < n.value.numel(); ++i)
        an->grad[i] += n.grad[i] * 3.0 * an->value[i];
    }));
  };
  CHECK(grad_check([&](Var<double> x) { return sum(bad_square(x)); }, p) > 1e-2);
}

TEST_CASE("grad_check rejects non-finite function values") {
  Tensor<double> p = Tensor<double>::full({2}, -1.0);
  CHECK_THROWS_AS(grad_check([](Var<double> x) { return sum(log(x)); }, p), NumericError);
}

TEST_CASE("slice/concat round-trip is bit-exact") {
  std::mt19937_64 rng(37);
  Tensor<double> av = random_tensor<double>({2, 3, 4}, rng);
  Tensor<double> bv = random_tensor<double>({2, 2, 4}, rng);
  Var<double> a = Var<double>::constant(av), b = Var<double>::constant(bv);
  auto cat = concat<double>({a, b}, 1);
  auto a2 = slice(cat, 1, 0, 3);
  auto b2 = slice(cat, 1, 3, 2);
  for (int64_t i = 0; i < av.numel(); ++i) CHECK(a2.value()[i] == av[i]);
  for (int64_t i = 0; i < bv.numel(); ++i) CHECK(b2.value()[i] == bv[i]);
}

TEST_CASE("reshape round-trip is bit-exact and grads flow") {
  std::mt19937_64 rng(41);
  Tensor<double> xv = random_tensor<double>({3, 4}, rng);
  Var<double> x = Var<double>::leaf(xv);
  auto r = reshape(reshape(x, {12}), {4, 3});
  for (int64_t i = 0; i < 12; ++i) CHECK(r.value()[i] == xv[i]);
  backward(sum(square(r)));
  for (int64_t i = 0; i < 12; ++i) CHECK(x.grad()[i] == doctest::Approx(2 * xv[i]));
}

TEST_CASE("broadcast add/mul gradients reduce correctly") {
  std::mt19937_64 rng(43);
  Tensor<double> xv = random_tensor<double>({2, 3, 4}, rng);
  Tensor<double> cv = random_tensor<double>({3, 1}, rng);
  double err = grad_check(
      [&](Var<double> c) { return sum(mul(Var<double>::constant(xv), c)); }, cv);
  CHECK(err < 1e-8);
  err = grad_check(
      [&](Var<double> c) { return sum(square(add(Var<double>::constant(xv), c))); }, cv);
  CHECK(err < 1e-6);
}

TEST_CASE("softmax rows sum to one and gradient checks") {
  std::mt19937_64 rng(47);
  Tensor<double> xv = random_tensor<double>({4, 6}, rng, -3.0, 3.0);
  auto y = softmax_rows(Var<double>::constant(xv));
  for (int64_t i = 0; i < 4; ++i) {
    double s = 0;
    for (int64_t j = 0; j < 6; ++j) s += y.value()[i * 6 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  Tensor<double> wv = random_tensor<double>({4, 6}, rng);
  double err = grad_check(
      [&](Var<double> x) {
        return sum(mul(softmax_rows(x), Var<double>::constant(wv)));
      },
      xv);
  CHECK(err < 1e-7);
}

TEST_CASE("matmul / transpose gradients") {
  std::mt19937_64 rng(53);
  Tensor<double> av = random_tensor<double>({3, 4}, rng);
  Tensor<double> bv = random_tensor<double>({4, 2}, rng);
  double err = grad_check(
      [&](Var<double> a) { return sum(square(matmul(a, Var<double>::constant(bv)))); }, av);
  CHECK(err < 1e-6);
  err = grad_check(
      [&](Var<double> b) { return sum(square(matmul(Var<double>::constant(av), b))); }, bv);
  CHECK(err < 1e-6);
  err = grad_check([&](Var<double> a) { return sum(square(transpose2d(a))); }, av);
  CHECK(err < 1e-6);
}

TEST_CASE("conv_transpose2d gradients vs finite differences") {
  std::mt19937_64 rng(59);
  Tensor<double> xv = random_tensor<double>({1, 2, 3, 3}, rng);
  Tensor<double> kv = random_tensor<double>({2, 1, 4, 4}, rng);
  ConvGeom g;
  g.stride_h = g.stride_w = 2;
  g.pad_t = g.pad_b = g.pad_l = g.pad_r = 1;
  double err = grad_check(
      [&](Var<double> x) {
        return sum(square(conv_transpose2d(x, Var<double>::constant(kv), g)));
      },
      xv);
  CHECK(err < 1e-6);
  err = grad_check(
      [&](Var<double> k) {
        return sum(square(conv_transpose2d(Var<double>::constant(xv), k, g)));
      },
      kv);
  CHECK(err < 1e-6);
}
