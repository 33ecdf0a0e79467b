#include "choir/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace choir {

GradcheckResult gradcheck(const std::function<Tensor()>& loss, std::vector<Tensor> wrt,
                          const GradcheckOptions& options, std::mt19937_64& rng) {
  for (auto& t : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor value = loss();
    tape.backward(value);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& t : wrt) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
  }

  GradcheckResult result;
  const double h = options.step;
  for (std::size_t p = 0; p < wrt.size(); ++p) {
    auto values = wrt[p].mutable_data();
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.coords_per_tensor && coords.size() > options.coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (auto i : coords) {
      const double x = values[i];
      const double f0 = loss().item();
      values[i] = x + h;
      const double fp = loss().item();
      values[i] = x - h;
      const double fm = loss().item();
      values[i] = x;
      const double forward = (fp - f0) / h;
      const double backward = (f0 - fm) / h;
      const double central = (fp - fm) / (2.0 * h);
      const double scale = std::max({std::abs(forward), std::abs(backward), options.floor});
      if (std::abs(forward - backward) > options.kink_tolerance * scale + options.curvature * h) {
        ++result.skipped;
        continue;
      }
      const double a = analytic[p][i];
      const double rel = std::abs(a - central) / std::max({std::abs(a), std::abs(central), options.floor});
      result.max_relative_error = std::max(result.max_relative_error, rel);
      ++result.checked;
    }
  }
  return result;
}

}  // namespace choir
