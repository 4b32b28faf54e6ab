// Copyright 2026 the cvunet authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cvu {

/// Error taxonomy shared across the toolkit. Exit-code mapping lives in the CLI.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

/// Dense row-major tensor of real scalars. The single data container under
/// everything: network activations, spectra, waveform segments, parameters.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(numel_of(shape), T(0)) {
    for (int64_t d : shape)
      if (d < 1) throw ConfigError("tensor dimension < 1 in " + shape_str(shape));
  }
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
      throw ConfigError("tensor shape/data mismatch: " + shape_str(shape));
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t rank() const { return static_cast<int64_t>(shape.size()); }
  int64_t dim(int64_t i) const { return shape[static_cast<size_t>(i)]; }

  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  Tensor<T> reshaped(Shape s) const {
    if (numel_of(s) != numel())
      throw ConfigError("reshape " + shape_str(shape) + " -> " + shape_str(s));
    return Tensor<T>(std::move(s), data);
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

inline Shape strides_of(const Shape& s) {
  Shape st(s.size());
  int64_t acc = 1;
  for (size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// numpy-style broadcast of two shapes (align trailing dims).
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ConfigError("broadcast mismatch " + shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

/// Fill with He-uniform values, limit sqrt(6/fan_in).
template <typename T, typename Rng>
void he_uniform_(Tensor<T>& t, int64_t fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(std::max<int64_t>(1, fan_in)));
  std::uniform_real_distribution<double> d(-limit, limit);
  for (auto& v : t.data) v = static_cast<T>(d(rng));
}

template <typename T, typename Rng>
void normal_(Tensor<T>& t, double mean, double stddev, Rng& rng) {
  std::normal_distribution<double> d(mean, stddev);
  for (auto& v : t.data) v = static_cast<T>(d(rng));
}

}  // namespace cvu
