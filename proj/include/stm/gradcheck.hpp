#pragma once

#include <functional>
#include <vector>

#include "stm/tensor.hpp"

namespace stm {

/// Compares tape gradients of a scalar function against central finite
/// differences over every coordinate of every parameter. Returns the
/// worst relative error, denominator max(|a|,|b|,1e-8).
double grad_check(const std::function<Tensor()>& f,
                  std::vector<Tensor>& params, double h = 1e-5);

/// As grad_check, but every coordinate's deviation is measured against
/// the max-norm of the whole gradient (numeric or analytic, whichever
/// is larger). Robust for deep compositions where tiny components sit
/// below the central-difference roundoff floor.
double grad_check_norm(const std::function<Tensor()>& f,
                       std::vector<Tensor>& params, double h = 1e-4);

}  // namespace stm
