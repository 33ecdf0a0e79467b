#include "choir/so3.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "choir/ops.hpp"

namespace choir {

Mat3 Mat3::identity() {
  Mat3 r;
  r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  return r;
}

Mat3 Mat3::transposed() const {
  Mat3 t;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) t(c, r) = (*this)(r, c);
  }
  return t;
}

double Mat3::det() const {
  const auto& a = m;
  return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
         a[2] * (a[3] * a[7] - a[4] * a[6]);
}

Mat3 operator*(const Mat3& a, const Mat3& b) {
  Mat3 r;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += a(i, k) * b(k, j);
      r(i, j) = s;
    }
  }
  return r;
}

Mat3 operator+(const Mat3& a, const Mat3& b) {
  Mat3 r;
  for (std::size_t i = 0; i < 9; ++i) r.m[i] = a.m[i] + b.m[i];
  return r;
}

Mat3 operator-(const Mat3& a, const Mat3& b) {
  Mat3 r;
  for (std::size_t i = 0; i < 9; ++i) r.m[i] = a.m[i] - b.m[i];
  return r;
}

Mat3 operator*(double s, const Mat3& a) {
  Mat3 r;
  for (std::size_t i = 0; i < 9; ++i) r.m[i] = s * a.m[i];
  return r;
}

double frobenius_sq(const Mat3& a) {
  double s = 0.0;
  for (double v : a.m) s += v * v;
  return s;
}

double max_abs(const Mat3& a) {
  double s = 0.0;
  for (double v : a.m) s = std::max(s, std::abs(v));
  return s;
}

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

Rotation Rotation::from_matrix(const Mat3& m, double tolerance) {
  Rotation r(m);
  const double ortho = r.orthonormality_error();
  const double det_err = std::abs(m.det() - 1.0);
  if (ortho > tolerance || det_err > tolerance) {
    std::ostringstream msg;
    msg << "not a rotation: |m^T m - I|_max = " << ortho << ", |det - 1| = " << det_err;
    throw NumericalError(msg.str());
  }
  return r;
}

double Rotation::orthonormality_error() const {
  return max_abs(m_.transposed() * m_ - Mat3::identity());
}

namespace so3 {

namespace {

Vec3 column(const Mat3& a, int c) { return {a(0, c), a(1, c), a(2, c)}; }

void set_column(Mat3& a, int c, const Vec3& v) {
  for (int r = 0; r < 3; ++r) a(r, c) = v[static_cast<std::size_t>(r)];
}

// Any unit vector orthogonal to unit vector `a`.
Vec3 orthogonal_to(const Vec3& a) {
  const Vec3 trial = std::abs(a[0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
  Vec3 v = cross(a, trial);
  const double n = norm(v);
  return {v[0] / n, v[1] / n, v[2] / n};
}

}  // namespace

Svd svd(const Mat3& input) {
  Mat3 a = input;
  Mat3 v = Mat3::identity();
  const double scale = std::max(max_abs(input), 1e-300);
  for (int sweep = 0; sweep < 60; ++sweep) {
    bool rotated = false;
    for (int p = 0; p < 2; ++p) {
      for (int q = p + 1; q < 3; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (int i = 0; i < 3; ++i) {
          alpha += a(i, p) * a(i, p);
          beta += a(i, q) * a(i, q);
          gamma += a(i, p) * a(i, q);
        }
        if (std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta) ||
            std::abs(gamma) <= 1e-300 * scale * scale) {
          continue;
        }
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (int i = 0; i < 3; ++i) {
          const double ap = a(i, p), aq = a(i, q);
          a(i, p) = c * ap - s * aq;
          a(i, q) = s * ap + c * aq;
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }
  std::array<double, 3> sigma{};
  for (int c = 0; c < 3; ++c) sigma[static_cast<std::size_t>(c)] = norm(column(a, c));
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
    return sigma[static_cast<std::size_t>(x)] > sigma[static_cast<std::size_t>(y)];
  });
  Svd out;
  const double tiny = 1e-14 * std::max(sigma[static_cast<std::size_t>(order[0])], 1e-300);
  int valid = 0;
  for (int j = 0; j < 3; ++j) {
    const int src = order[static_cast<std::size_t>(j)];
    const double s = sigma[static_cast<std::size_t>(src)];
    out.sigma[static_cast<std::size_t>(j)] = s;
    set_column(out.v, j, column(v, src));
    if (s > tiny) {
      Vec3 u = column(a, src);
      set_column(out.u, j, {u[0] / s, u[1] / s, u[2] / s});
      ++valid;
    }
  }
  // Complete U for rank-deficient inputs.
  if (valid == 0) {
    out.u = Mat3::identity();
  } else if (valid == 1) {
    const Vec3 u0 = column(out.u, 0);
    const Vec3 u1 = orthogonal_to(u0);
    set_column(out.u, 1, u1);
    set_column(out.u, 2, cross(u0, u1));
  } else if (valid == 2) {
    set_column(out.u, 2, cross(column(out.u, 0), column(out.u, 1)));
  }
  return out;
}

Projection project_to_so3(const Mat3& m) {
  for (double x : m.m) {
    if (!std::isfinite(x)) throw NumericalError("project_to_so3: non-finite entry");
  }
  const Svd d = svd(m);
  const double sign = (d.u * d.v.transposed()).det() < 0 ? -1.0 : 1.0;
  Mat3 diag = Mat3::identity();
  diag(2, 2) = sign;
  Mat3 r = d.u * diag * d.v.transposed();
  Projection out{Rotation::unchecked(r), false};
  // The nearest rotation is unique iff sigma2 + sign * sigma3 > 0.
  const double gap = d.sigma[1] + sign * d.sigma[2];
  out.degenerate = gap <= kDegeneracyTolerance * std::max(1.0, d.sigma[0]);
  return out;
}

Projection chordal_mean(std::span<const Rotation> rotations) {
  if (rotations.empty()) throw std::invalid_argument("chordal_mean: empty rotation set");
  Mat3 sum = Mat3::zero();
  for (const auto& r : rotations) sum = sum + r.matrix();
  return project_to_so3((1.0 / static_cast<double>(rotations.size())) * sum);
}

Rotation sample_uniform(std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  double w, x, y, z, n;
  do {
    w = normal(rng);
    x = normal(rng);
    y = normal(rng);
    z = normal(rng);
    n = std::sqrt(w * w + x * x + y * y + z * z);
  } while (n < 1e-12);
  w /= n;
  x /= n;
  y /= n;
  z /= n;
  Mat3 m;
  m.m = {1 - 2 * (y * y + z * z), 2 * (x * y - z * w),     2 * (x * z + y * w),
         2 * (x * y + z * w),     1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
         2 * (x * z - y * w),     2 * (y * z + x * w),     1 - 2 * (x * x + y * y)};
  return Rotation::unchecked(m);
}

double angle_between(const Rotation& a, const Rotation& b) {
  const Mat3 m = a.matrix().transposed() * b.matrix();
  const double c = (m.trace() - 1.0) / 2.0;
  const double sx = m(2, 1) - m(1, 2), sy = m(0, 2) - m(2, 0), sz = m(1, 0) - m(0, 1);
  const double s = 0.5 * std::sqrt(sx * sx + sy * sy + sz * sz);
  return std::atan2(s, c);
}

Rotation gram_schmidt_frame(const Vec3& u, const Vec3& v) {
  const double nu = norm(u);
  if (nu <= kFrameEpsilon) {
    throw NumericalError("gram_schmidt_frame: |u| = " + std::to_string(nu) + " is degenerate");
  }
  const Vec3 e1{u[0] / nu, u[1] / nu, u[2] / nu};
  const double proj = dot(v, e1);
  const Vec3 w{v[0] - proj * e1[0], v[1] - proj * e1[1], v[2] - proj * e1[2]};
  const double nw = norm(w);
  if (nw <= kFrameEpsilon) {
    throw NumericalError("gram_schmidt_frame: orthogonal part of v has norm " + std::to_string(nw));
  }
  const Vec3 e2{w[0] / nw, w[1] / nw, w[2] / nw};
  const Vec3 e3 = cross(e1, e2);
  Mat3 m;
  m.m = {e1[0], e1[1], e1[2], e2[0], e2[1], e2[2], e3[0], e3[1], e3[2]};
  return Rotation::unchecked(m);
}

Rotation from_axis_angle(const Vec3& axis, double radians) {
  const double n = norm(axis);
  if (n == 0.0) throw std::invalid_argument("from_axis_angle: zero axis");
  const double x = axis[0] / n, y = axis[1] / n, z = axis[2] / n;
  const double c = std::cos(radians), s = std::sin(radians), t = 1.0 - c;
  Mat3 m;
  m.m = {t * x * x + c,     t * x * y - s * z, t * x * z + s * y,
         t * x * y + s * z, t * y * y + c,     t * y * z - s * x,
         t * x * z - s * y, t * y * z + s * x, t * z * z + c};
  return Rotation::unchecked(m);
}

Rotation rotation_z(double radians) { return from_axis_angle({0, 0, 1}, radians); }

double degrees(double radians) { return radians * 180.0 / std::numbers::pi; }

Tensor gram_schmidt_frame(const Tensor& rows, double eps, bool strict) {
  if (rows.shape() != Shape{2, 3}) {
    throw ShapeError("gram_schmidt_frame: expected [2x3] rows, got " + shape_str(rows.shape()));
  }
  if (strict) {
    const auto d = rows.data();
    const Vec3 u{d[0], d[1], d[2]};
    const Vec3 v{d[3], d[4], d[5]};
    const double nu = norm(u);
    double nw = 0.0;
    if (nu > 0.0) {
      const double p = dot(u, v) / (nu * nu);
      nw = norm({v[0] - p * u[0], v[1] - p * u[1], v[2] - p * u[2]});
    }
    if (nu <= eps || nw <= eps) {
      throw NumericalError("gram_schmidt_frame: degenerate frame, |u| = " + std::to_string(nu) +
                           ", |v_perp| = " + std::to_string(nw));
    }
  }
  const Tensor u = ops::slice(rows, 0, 0, 1);
  const Tensor v = ops::slice(rows, 0, 1, 1);
  const Tensor nu = ops::sqrt(ops::sum(u * u, -1, true));
  const Tensor e1 = u / ops::clamp_min(nu, eps);
  const Tensor w = v - ops::sum(v * e1, -1, true) * e1;
  const Tensor nw = ops::sqrt(ops::sum(w * w, -1, true));
  const Tensor e2 = w / ops::clamp_min(nw, eps);
  const Tensor e3 = ops::cross(e1, e2);
  return ops::concat({e1, e2, e3}, 0);
}

Tensor to_tensor(const Rotation& r) {
  return Tensor({3, 3}, std::vector<double>(r.matrix().m.begin(), r.matrix().m.end()));
}

Rotation from_tensor(const Tensor& t) {
  if (t.shape() != Shape{3, 3}) throw ShapeError("from_tensor: expected [3x3], got " + shape_str(t.shape()));
  Mat3 m;
  std::copy(t.data().begin(), t.data().end(), m.m.begin());
  return project_to_so3(m).rotation;
}

}  // namespace so3
}  // namespace choir
