#include "stm/array.hpp"

#include <cmath>
#include <sstream>

namespace stm {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

DenseArray::DenseArray(Shape s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != data.size()) {
    throw std::invalid_argument("DenseArray: shape " + shape_str(shape) +
                                " does not match data length " +
                                std::to_string(data.size()));
  }
}

DenseArray::DenseArray(Shape s) : shape(std::move(s)) {
  data.assign(shape_numel(shape), 0.0);
}

DenseArray DenseArray::full(const Shape& s, double v) {
  DenseArray a(s);
  for (auto& x : a.data) x = v;
  return a;
}

bool DenseArray::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::vector<std::size_t> row_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t n = std::max(a.size(), b.size());
  Shape out(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw std::invalid_argument("broadcast mismatch: " + shape_str(a) +
                                  " vs " + shape_str(b));
    }
    out[n - 1 - i] = std::max(da, db);
  }
  return out;
}

}  // namespace stm
