#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <vector>

#include "choir/tensor.hpp"

namespace choir {

struct GradcheckOptions {
  double step = 1e-5;
  // Coordinates sampled per tensor; 0 checks every coordinate.
  std::size_t coords_per_tensor = 0;
  // Denominator floor for the relative error.
  double floor = 1e-6;
  // A coordinate whose one-sided slopes disagree by more than this fraction
  // of their magnitude sits on a kink (relu, max) and is skipped.
  double kink_tolerance = 1e-3;
  // Largest |f''| expected away from kinks; one-sided slopes of a smooth
  // function differ by about step * |f''|.
  double curvature = 10.0;
};

struct GradcheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

// Compares tape gradients of the scalar `loss` with central finite
// differences taken over every tensor in `wrt`. The loss function is
// re-evaluated without a tape for the numeric side.
GradcheckResult gradcheck(const std::function<Tensor()>& loss, std::vector<Tensor> wrt,
                          const GradcheckOptions& options, std::mt19937_64& rng);

}  // namespace choir
