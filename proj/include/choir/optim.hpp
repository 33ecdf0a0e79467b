#pragma once

#include <cstddef>
#include <vector>

#include "choir/tensor.hpp"

namespace choir {

struct AdamConfig {
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// First-order adaptive-moment optimizer with bias correction.
class Adam {
 public:
  Adam(std::vector<Tensor> parameters, AdamConfig config);

  // Applies one update from the parameters' accumulated gradients. Parameters
  // without a gradient are left untouched.
  void step();
  void zero_grad();
  std::size_t steps() const { return step_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  AdamConfig config_;
  std::size_t step_ = 0;
};

}  // namespace choir
