#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>

#include "choir/tensor.hpp"

namespace choir {

using Vec3 = std::array<double, 3>;

// Row-major 3x3 matrix.
struct Mat3 {
  std::array<double, 9> m{};

  static Mat3 identity();
  static Mat3 zero() { return {}; }
  double& operator()(int r, int c) { return m[static_cast<std::size_t>(3 * r + c)]; }
  double operator()(int r, int c) const { return m[static_cast<std::size_t>(3 * r + c)]; }

  Mat3 transposed() const;
  double det() const;
  double trace() const { return m[0] + m[4] + m[8]; }
  Vec3 row(int r) const { return {(*this)(r, 0), (*this)(r, 1), (*this)(r, 2)}; }
};

Mat3 operator*(const Mat3& a, const Mat3& b);
Mat3 operator+(const Mat3& a, const Mat3& b);
Mat3 operator-(const Mat3& a, const Mat3& b);
Mat3 operator*(double s, const Mat3& a);
double frobenius_sq(const Mat3& a);
double max_abs(const Mat3& a);

double dot(const Vec3& a, const Vec3& b);
Vec3 cross(const Vec3& a, const Vec3& b);
double norm(const Vec3& a);

// An element of SO(3). Construct through from_matrix (validated) or the
// so3 functions, which produce valid rotations by construction.
class Rotation {
 public:
  Rotation() : m_(Mat3::identity()) {}

  // Throws NumericalError unless m^T m = I and det m = +1 within `tolerance`.
  static Rotation from_matrix(const Mat3& m, double tolerance = 1e-9);
  // For matrices known to be rotations up to roundoff.
  static Rotation unchecked(const Mat3& m) { return Rotation(m); }

  const Mat3& matrix() const { return m_; }
  double operator()(int r, int c) const { return m_(r, c); }
  Rotation transposed() const { return Rotation(m_.transposed()); }
  Rotation operator*(const Rotation& other) const { return Rotation(m_ * other.m_); }

  // Orthonormality and determinant residuals.
  double orthonormality_error() const;
  double det() const { return m_.det(); }

 private:
  explicit Rotation(const Mat3& m) : m_(m) {}
  Mat3 m_;
};

namespace so3 {

struct Svd {
  Mat3 u;  // columns are left singular vectors
  Vec3 sigma;  // descending
  Mat3 v;  // columns are right singular vectors
};

// One-sided Jacobi SVD; u and v are orthogonal (possibly with det -1).
Svd svd(const Mat3& a);

// Result of an SVD projection; `degenerate` marks an ambiguous nearest
// rotation (the two smallest effective singular values coincide).
struct Projection {
  Rotation rotation;
  bool degenerate = false;
};

inline constexpr double kDegeneracyTolerance = 1e-9;

// Nearest rotation in Frobenius norm: U diag(1, 1, det(U V^T)) V^T.
Projection project_to_so3(const Mat3& m);

// Chordal L2 mean: the arithmetic mean projected onto SO(3). Throws
// std::invalid_argument on an empty set.
Projection chordal_mean(std::span<const Rotation> rotations);

// Haar-distributed rotation from a normalized 4D Gaussian quaternion.
Rotation sample_uniform(std::mt19937_64& rng);

// Geodesic angle in [0, pi]: arccos((tr(a^T b) - 1) / 2), argument clamped.
double angle_between(const Rotation& a, const Rotation& b);

inline constexpr double kFrameEpsilon = 1e-8;

// Rows e1 = u/|u|, e2 = normalized part of v orthogonal to e1, e3 = e1 x e2.
// Throws NumericalError when |u| or the orthogonal part of v is <= 1e-8.
Rotation gram_schmidt_frame(const Vec3& u, const Vec3& v);

Rotation from_axis_angle(const Vec3& axis, double radians);
Rotation rotation_z(double radians);

double degrees(double radians);

// Differentiable counterparts on tensors.
//
// `rows` is [2, 3]; the result is the [3, 3] frame with rows e1, e2, e3.
// Normalization divides by (norm + eps) so gradients stay finite; with
// `strict` a degenerate input throws a NumericalError naming both norms.
Tensor gram_schmidt_frame(const Tensor& rows, double eps = kFrameEpsilon, bool strict = false);

Tensor to_tensor(const Rotation& r);
// Projects onto SO(3) to absorb the eps-regularization residual.
Rotation from_tensor(const Tensor& t);

}  // namespace so3
}  // namespace choir
