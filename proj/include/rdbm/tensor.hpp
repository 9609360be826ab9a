#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "rdbm/errors.hpp"

namespace rdbm {

// Row-major array of doubles with an explicit shape. Images are stored as
// {height, width} (or {height, width, channels}) in pixel-value units.
class TensorGrid {
 public:
  TensorGrid() = default;

  explicit TensorGrid(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  TensorGrid(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size()) {
      throw ShapeError("TensorGrid: shape product " + std::to_string(element_count(shape_)) +
                       " does not match data length " + std::to_string(data_.size()));
    }
  }

  static TensorGrid scalar(double v) { return TensorGrid({1}, std::vector<double>{v}); }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::vector<double>& raw() noexcept { return data_; }
  const std::vector<double>& raw() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  bool same_shape(const TensorGrid& other) const noexcept { return shape_ == other.shape_; }

  bool all_finite() const noexcept {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const TensorGrid&, const TensorGrid&) = default;

  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline std::string shape_string(const TensorGrid& t) {
  std::string s = "[";
  for (std::size_t i = 0; i < t.shape().size(); ++i) {
    if (i) s += "x";
    s += std::to_string(t.shape()[i]);
  }
  return s + "]";
}

inline void require_same_shape(const TensorGrid& a, const TensorGrid& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " +
                     shape_string(b));
  }
}

// Elementwise map over any number of equally shaped grids.
template <typename F, typename... Rest>
TensorGrid map_elements(const char* what, F&& f, const TensorGrid& first, const Rest&... rest) {
  (require_same_shape(first, rest, what), ...);
  TensorGrid out(first.shape());
  for (std::size_t i = 0; i < first.size(); ++i) out[i] = f(first[i], rest[i]...);
  return out;
}

}  // namespace rdbm
