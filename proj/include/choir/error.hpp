#pragma once

#include <stdexcept>

namespace choir {

// Incompatible extents, bad axes, out-of-range indices.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A computation would produce a non-finite or ill-defined value.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed files, wrong magic, version mismatches, bad records.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace choir
