#include "stm/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace stm {

double grad_check(const std::function<Tensor()>& f,
                  std::vector<Tensor>& params, double h) {
  for (auto& p : params) p.zero_grad();
  Tensor out = f();
  if (!std::isfinite(out.item())) {
    throw std::domain_error("grad_check: non-finite function value");
  }
  out.backward();
  std::vector<DenseArray> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());

  double worst = 0.0;
  NoGradGuard ng;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& data = params[pi].mutable_value().data;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double x0 = data[i];
      data[i] = x0 + h;
      double fp = f().item();
      data[i] = x0 - h;
      double fm = f().item();
      data[i] = x0;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw std::domain_error("grad_check: non-finite value at probe point");
      }
      double num = (fp - fm) / (2.0 * h);
      double ana = analytic[pi].data[i];
      double denom = std::max({std::fabs(num), std::fabs(ana), 1e-8});
      worst = std::max(worst, std::fabs(num - ana) / denom);
    }
  }
  return worst;
}

double grad_check_norm(const std::function<Tensor()>& f,
                       std::vector<Tensor>& params, double h) {
  for (auto& p : params) p.zero_grad();
  Tensor out = f();
  if (!std::isfinite(out.item())) {
    throw std::domain_error("grad_check: non-finite function value");
  }
  out.backward();
  std::vector<DenseArray> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());

  NoGradGuard ng;
  std::vector<std::vector<double>> numeric(params.size());
  double scale = 1e-8;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& data = params[pi].mutable_value().data;
    numeric[pi].resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double x0 = data[i];
      data[i] = x0 + h;
      double fp = f().item();
      data[i] = x0 - h;
      double fm = f().item();
      data[i] = x0;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw std::domain_error("grad_check: non-finite value at probe point");
      }
      numeric[pi][i] = (fp - fm) / (2.0 * h);
      scale = std::max({scale, std::fabs(numeric[pi][i]),
                        std::fabs(analytic[pi].data[i])});
    }
  }
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi)
    for (std::size_t i = 0; i < numeric[pi].size(); ++i)
      worst = std::max(
          worst, std::fabs(numeric[pi][i] - analytic[pi].data[i]) / scale);
  return worst;
}

}  // namespace stm
