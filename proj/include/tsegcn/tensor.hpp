#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tsegcn {

/// Base class for all library errors. Subclasses distinguish the failure
/// domain so the CLI can map them onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape/axis mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value (model config, graph spec, kernel config).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file; message carries line (and column when known).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Numerical evaluation failure (non-finite objective, divergence).
class EvalError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major tensor of 64-bit floats. The last axis is contiguous.
/// Tensors are plain values; kernels never mutate their inputs.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    std::size_t n = 1;
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("tensor axis length must be >= 1, got shape " + shape_str(shape_));
      n *= d;
    }
    data_.assign(n, fill);
    init_strides();
  }

  static Tensor from(Shape shape, std::vector<double> data) {
    Tensor t(std::move(shape));
    if (data.size() != t.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(t.shape()));
    }
    t.data_ = std::move(data);
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_[axis]; }
  std::size_t size() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i) { return data_[i]; }
  double at(std::size_t i) const { return data_[i]; }
  double& at(std::size_t i, std::size_t j) { return data_[i * strides_[0] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * strides_[0] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[i * strides_[0] + j * strides_[1] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[i * strides_[0] + j * strides_[1] + k];
  }
  double& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[i * strides_[0] + j * strides_[1] + k * strides_[2] + l];
  }
  double at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return data_[i * strides_[0] + j * strides_[1] + k * strides_[2] + l];
  }

  /// Stride (in elements) of the given axis.
  std::size_t stride(std::size_t axis) const { return axis + 1 < shape_.size() ? strides_[axis] : 1; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const {
    Tensor t = *this;
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    if (n != size())
      throw DimensionError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) + ": element count differs");
    t.shape_ = std::move(shape);
    t.init_strides();
    return t;
  }

  Tensor& operator+=(const Tensor& o) {
    if (!same_shape(o))
      throw DimensionError("tensor += shape mismatch: " + shape_str(shape_) + " vs " + shape_str(o.shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  void init_strides() {
    strides_.assign(shape_.size() > 1 ? shape_.size() - 1 : 0, 1);
    for (std::size_t a = strides_.size(); a-- > 0;) {
      strides_[a] = shape_[a + 1] * (a + 1 < strides_.size() ? strides_[a + 1] : 1);
    }
  }

  Shape shape_;
  std::vector<std::size_t> strides_;  // strides for all axes except the last (which is 1)
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw DimensionError("max_abs_diff shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Deterministic RNG. The bit-to-double mappings are spelled out here rather
/// than taken from <random> distributions so that streams are identical
/// across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t bits() { return eng_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (both variates used).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  /// Uniform integer in [0, n) by rejection; n >= 1.
  std::uint64_t uniform_int(std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = eng_();
    while (x >= limit) x = eng_();
    return x % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_int(i)]);
  }

  Tensor uniform_tensor(Shape shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = uniform(lo, hi);
    return t;
  }

  Tensor normal_tensor(Shape shape, double mean = 0.0, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = mean + stddev * normal();
    return t;
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace tsegcn
