#include "choir/oracles.hpp"

#include <cmath>
#include <numbers>

namespace choir::oracles {

Rotation exp_so3(const Vec3& w) {
  const double theta = norm(w);
  Mat3 k;
  k.m = {0, -w[2], w[1], w[2], 0, -w[0], -w[1], w[0], 0};
  double a, b;
  if (theta < 1e-8) {
    a = 1.0 - theta * theta / 6.0;
    b = 0.5 - theta * theta / 24.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / (theta * theta);
  }
  return Rotation::unchecked(Mat3::identity() + a * k + b * (k * k));
}

double chordal_cost(std::span<const Rotation> rotations, const Rotation& candidate) {
  double cost = 0.0;
  for (const auto& r : rotations) cost += frobenius_sq(r.matrix() - candidate.matrix());
  return cost;
}

Rotation brute_force_chordal_mean(std::span<const Rotation> rotations, int restarts,
                                  std::mt19937_64& rng) {
  Mat3 sum = Mat3::zero();
  for (const auto& r : rotations) sum = sum + r.matrix();
  Rotation best;
  double best_cost = INFINITY;
  for (int s = 0; s < restarts; ++s) {
    Rotation r = so3::sample_uniform(rng);
    double step = 0.5 / static_cast<double>(rotations.size());
    double cost = chordal_cost(rotations, r);
    for (int it = 0; it < 2000; ++it) {
      // cost = const - 2 tr(R^T S); with R <- R exp(W), the descent direction
      // is the skew part of R^T S.
      const Mat3 a = r.matrix().transposed() * sum;
      const Vec3 g{a(2, 1) - a(1, 2), a(0, 2) - a(2, 0), a(1, 0) - a(0, 1)};
      if (norm(g) < 1e-14) break;
      Rotation next = r * exp_so3({step * g[0], step * g[1], step * g[2]});
      const double next_cost = chordal_cost(rotations, next);
      if (next_cost < cost) {
        r = next;
        cost = next_cost;
        step *= 1.2;
      } else {
        step *= 0.5;
        if (step < 1e-16) break;
      }
    }
    if (cost < best_cost) {
      best_cost = cost;
      best = r;
    }
  }
  return best;
}

double haar_mean_angle(int intervals) {
  const double pi = std::numbers::pi;
  auto f = [&](double t) { return t * (1.0 - std::cos(t)) / pi; };
  const double h = pi / intervals;
  double s = f(0.0) + f(pi);
  for (int i = 1; i < intervals; ++i) s += (i % 2 ? 4.0 : 2.0) * f(i * h);
  return s * h / 3.0;
}

}  // namespace choir::oracles
