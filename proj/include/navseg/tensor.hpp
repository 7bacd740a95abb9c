#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "navseg/error.hpp"

namespace navseg {

/// Extents of a dense NCHW tensor.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t numel() const noexcept { return n * c * h * w; }
  constexpr std::size_t plane() const noexcept { return h * w; }

  constexpr auto operator<=>(const Shape&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

/// Dense 4-D array in row-major N->C->H->W order.
///
/// A default-constructed tensor is empty (all extents 0); every other tensor has
/// all extents >= 1 and exactly n*c*h*w elements.
template <class T = float>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(checked(shape)), data_(shape.numel(), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(checked(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(shape, T{0}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[offset(n, c, h, w)];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[offset(n, c, h, w)];
  }

  // Contiguous HxW plane of (n, c).
  T* plane(std::size_t n, std::size_t c) noexcept { return data_.data() + offset(n, c, 0, 0); }
  const T* plane(std::size_t n, std::size_t c) const noexcept {
    return data_.data() + offset(n, c, 0, 0);
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const {
    if (shape.numel() != shape_.numel()) {
      throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
    }
    return Tensor(shape, data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return empty() ? Tensor<U>() : Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor&) const = default;

 private:
  static Shape checked(Shape s) {
    if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0) {
      throw ShapeError("tensor extents must be >= 1, got " + s.str());
    }
    return s;
  }

  Shape shape_{};
  std::vector<T> data_;
};

// Uniform double in [0, 1) from the top 53 bits of one engine draw. Unlike
// std::uniform_real_distribution this mapping is fixed, so seeded streams are
// reproducible across standard libraries.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

// Integer in [0, bound).
inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t bound) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(bound)) % bound;
}

template <class T = float>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(uniform(rng, lo, hi));
  return t;
}

}  // namespace navseg
