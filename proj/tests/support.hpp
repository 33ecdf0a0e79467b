#pragma once

#include <random>
#include <vector>

#include "choir/tensor.hpp"

namespace choir::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = false,
                            double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

}  // namespace choir::testing
