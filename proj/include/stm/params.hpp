#pragma once

#include <string>
#include <utility>
#include <vector>

#include "stm/rng.hpp"
#include "stm/tensor.hpp"

namespace stm {

/// Ordered registry of named learnable tensors. Registration order is
/// the checkpoint payload order.
class ParamStore {
 public:
  Tensor add(const std::string& name, DenseArray init);
  Tensor zeros(const std::string& name, const Shape& shape);
  /// Uniform in +-sqrt(1/fan_in).
  Tensor dense_init(const std::string& name, const Shape& shape,
                    std::size_t fan_in, SeededRng& rng);

  const std::vector<std::pair<std::string, Tensor>>& items() const {
    return items_;
  }
  std::vector<Tensor> tensors() const;
  std::size_t count_values() const;
  void zero_grads();

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

}  // namespace stm
