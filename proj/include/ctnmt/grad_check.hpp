#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "ctnmt/tensor.hpp"

namespace ctnmt {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
};

// Compares reverse-mode gradients of the scalar `fn()` against central finite differences
// (f(x+eps) - f(x-eps)) / (2 eps), perturbing every coordinate of every tensor in `inputs`.
// `fn` must rebuild its graph from the current values of `inputs` on every call.
// Runs in 64-bit arithmetic; 32-bit differences are too noisy to be informative.
template <typename Fn>
GradCheckReport grad_check_report(Fn&& fn, std::vector<Tensor<double>> inputs, double eps = 1e-3) {
  active_tape<double>().clear();
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor<double> loss = fn();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
  }

  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto values = inputs[ti].data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = fn().item();
      values[i] = saved - eps;
      const double down = fn().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[ti][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      report.max_relative_error = std::max(report.max_relative_error, std::abs(a - numeric) / denom);
      ++report.coordinates;
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return report;
}

template <typename Fn>
double grad_check(Fn&& fn, std::vector<Tensor<double>> inputs, double eps = 1e-3) {
  return grad_check_report(std::forward<Fn>(fn), std::move(inputs), eps).max_relative_error;
}

}  // namespace ctnmt
