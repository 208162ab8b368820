#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace stm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s);

/// Dense row-major array of doubles. The value type everything else
/// builds on; immutable by convention once handed to the tape.
struct DenseArray {
  Shape shape;
  std::vector<double> data;

  DenseArray() = default;
  DenseArray(Shape s, std::vector<double> d);
  explicit DenseArray(Shape s);  // zero-filled

  static DenseArray zeros(const Shape& s) { return DenseArray(s); }
  static DenseArray full(const Shape& s, double v);
  static DenseArray scalar(double v) { return full({}, v); }

  std::size_t size() const { return data.size(); }
  std::size_t ndim() const { return shape.size(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool all_finite() const;
};

/// Row-major strides for a shape.
std::vector<std::size_t> row_strides(const Shape& s);

/// Trailing-axis broadcast of two shapes. Throws on incompatibility,
/// naming both shapes.
Shape broadcast_shape(const Shape& a, const Shape& b);

}  // namespace stm
