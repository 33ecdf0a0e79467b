#pragma once

#include <random>
#include <span>

#include "choir/so3.hpp"

// Reference computations that avoid the code paths they are used to check.
// Shared by the unit tests and the selfcheck command.
namespace choir::oracles {

// Exponential map of the skew matrix of `w` (Rodrigues formula).
Rotation exp_so3(const Vec3& w);

// Minimizes sum_i |R_i - R|_F^2 over SO(3) by Riemannian gradient descent with
// exponential-map retraction from `restarts` Haar-random starts. Uses no SVD.
Rotation brute_force_chordal_mean(std::span<const Rotation> rotations, int restarts,
                                  std::mt19937_64& rng);

double chordal_cost(std::span<const Rotation> rotations, const Rotation& candidate);

// Mean geodesic angle of a Haar rotation from the identity, by Simpson
// quadrature of theta * (1 - cos theta) / pi over [0, pi].
double haar_mean_angle(int intervals = 2000);

}  // namespace choir::oracles
