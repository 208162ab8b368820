#include "stm/fft.hpp"

#include <cmath>
#include <complex>
#include <stdexcept>

namespace stm {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;

bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }
}  // namespace

std::vector<double> rfft_magnitude_direct(const std::vector<double>& x) {
  const std::size_t T = x.size();
  if (T < 2) throw std::invalid_argument("rfft_magnitude: need T >= 2");
  const std::size_t F = T / 2 + 1;
  std::vector<double> mag(F);
  for (std::size_t f = 0; f < F; ++f) {
    double re = 0.0, im = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      double a = kTwoPi * static_cast<double>(f) * static_cast<double>(t) /
                 static_cast<double>(T);
      re += x[t] * std::cos(a);
      im -= x[t] * std::sin(a);
    }
    mag[f] = std::hypot(re, im);
  }
  return mag;
}

std::vector<double> rfft_magnitude_radix2(const std::vector<double>& x) {
  const std::size_t T = x.size();
  if (!is_pow2(T)) {
    throw std::invalid_argument("rfft_magnitude_radix2: length must be a "
                                "power of two, got " + std::to_string(T));
  }
  std::vector<std::complex<double>> a(T);
  for (std::size_t i = 0; i < T; ++i) a[i] = x[i];
  // iterative Cooley-Tukey, bit-reversal order
  for (std::size_t i = 1, j = 0; i < T; ++i) {
    std::size_t bit = T >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= T; len <<= 1) {
    double ang = -kTwoPi / static_cast<double>(len);
    std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < T; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        auto u = a[i + j];
        auto v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  std::vector<double> mag(T / 2 + 1);
  for (std::size_t f = 0; f < mag.size(); ++f) mag[f] = std::abs(a[f]);
  return mag;
}

std::vector<double> rfft_magnitude(const std::vector<double>& x) {
  if (x.size() <= 64 || !is_pow2(x.size())) return rfft_magnitude_direct(x);
  return rfft_magnitude_radix2(x);
}

void dft_basis(std::size_t T, DenseArray& cos_mat, DenseArray& sin_mat) {
  const std::size_t F = T / 2 + 1;
  cos_mat = DenseArray({T, F});
  sin_mat = DenseArray({T, F});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t f = 0; f < F; ++f) {
      double a = kTwoPi * static_cast<double>(f) * static_cast<double>(t) /
                 static_cast<double>(T);
      cos_mat.data[t * F + f] = std::cos(a);
      sin_mat.data[t * F + f] = -std::sin(a);
    }
}

}  // namespace stm
