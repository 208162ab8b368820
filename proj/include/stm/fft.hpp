#pragma once

#include <vector>

#include "stm/array.hpp"

namespace stm {

/// |DFT| at nonnegative frequencies of a length-T real series; output
/// length floor(T/2)+1. Direct O(T^2) evaluation for T <= 64, radix-2
/// for larger powers of two. Forward-only.
std::vector<double> rfft_magnitude(const std::vector<double>& x);

/// Direct O(T^2) route, exposed so the two paths can be cross-checked.
std::vector<double> rfft_magnitude_direct(const std::vector<double>& x);

/// Radix-2 route; requires T a power of two.
std::vector<double> rfft_magnitude_radix2(const std::vector<double>& x);

/// Real/imag DFT basis matrices, each T x (floor(T/2)+1):
/// cos[t][f] = cos(2*pi*f*t/T), sin[t][f] = -sin(2*pi*f*t/T).
/// Lets spectral magnitudes be built from tape ops.
void dft_basis(std::size_t T, DenseArray& cos_mat, DenseArray& sin_mat);

}  // namespace stm
