#include "stm/params.hpp"

#include <cmath>
#include <stdexcept>

namespace stm {

Tensor ParamStore::add(const std::string& name, DenseArray init) {
  for (const auto& [n, t] : items_) {
    if (n == name) throw std::logic_error("duplicate parameter name: " + name);
  }
  Tensor t = Tensor::param(std::move(init));
  items_.emplace_back(name, t);
  return t;
}

Tensor ParamStore::zeros(const std::string& name, const Shape& shape) {
  return add(name, DenseArray::zeros(shape));
}

Tensor ParamStore::dense_init(const std::string& name, const Shape& shape,
                              std::size_t fan_in, SeededRng& rng) {
  DenseArray a(shape);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : a.data) v = rng.uniform(-bound, bound);
  return add(name, std::move(a));
}

std::vector<Tensor> ParamStore::tensors() const {
  std::vector<Tensor> out;
  out.reserve(items_.size());
  for (const auto& [n, t] : items_) out.push_back(t);
  return out;
}

std::size_t ParamStore::count_values() const {
  std::size_t n = 0;
  for (const auto& [name, t] : items_) n += t.size();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& [n, t] : items_) t.zero_grad();
}

}  // namespace stm
