#pragma once

#include <random>
#include <vector>

#include "ctnmt/tensor.hpp"

namespace testutil {

template <typename T>
ctnmt::Tensor<T> random_tensor(ctnmt::Shape shape, std::mt19937_64& rng, double range = 1.0) {
  std::uniform_real_distribution<double> u(-range, range);
  std::vector<T> v(ctnmt::shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return ctnmt::Tensor<T>(std::move(shape), std::move(v));
}

}  // namespace testutil
