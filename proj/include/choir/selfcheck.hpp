#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

// Diagnostic suites shared by the selfcheck command and the acceptance run.
namespace choir::selfcheck {

struct Check {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;  // passes when value < threshold
  std::string unit;
  bool passed = false;
};

struct Options {
  std::size_t trials = 100;          // clouds x rotations for the symmetry checks
  std::size_t points = 256;          // cloud size for the symmetry checks
  std::size_t gradcheck_points = 20; // random parameter draws per layer
  std::size_t mean_sets = 50;        // rotation sets for the mean oracle
  std::size_t loss_pairs = 100;
  std::uint64_t seed = 0;
};

// max angle(f(P R), f(P) R) in radians; random weights, frozen kNN, double.
Check equivariance(const Options& opts);

// max angle(g(P R), g(P)) in radians under the same setup.
Check residual_invariance(const Options& opts);

// One check per layer plus the composed pair loss; the value is the worst
// relative error over all parameter draws.
std::vector<Check> gradients(const Options& opts);

// Angle (degrees) between the SVD chordal mean and a brute-force minimizer,
// and the worst |det - 1| of the means.
std::vector<Check> rotation_mean(const Options& opts);

// |full - simplified| pair loss for an exactly equivariant model.
Check loss_forms(const Options& opts);

// |loss(f1 Q, f2 Q, r1 Q, r2 Q) - loss(f1, f2, r1, r2)|.
Check loss_gauge(const Options& opts);

std::vector<Check> run_all(const Options& opts);

void print_table(std::ostream& out, const std::vector<Check>& checks);

}  // namespace choir::selfcheck
