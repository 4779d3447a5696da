#pragma once

#include <array>
#include <cmath>
#include <cstddef>

#include "cosh/error.hpp"

namespace coshdit {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
};

// Row-major 3x3 matrix; rotations use column convention R * v.
struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  double& operator()(int r, int c) { return m[static_cast<std::size_t>(r * 3 + c)]; }
  double operator()(int r, int c) const { return m[static_cast<std::size_t>(r * 3 + c)]; }

  static Mat3 identity() { return {}; }

  static Mat3 rot_x(double a) {
    const double c = std::cos(a), s = std::sin(a);
    Mat3 r;
    r.m = {1, 0, 0, 0, c, -s, 0, s, c};
    return r;
  }
  static Mat3 rot_y(double a) {
    const double c = std::cos(a), s = std::sin(a);
    Mat3 r;
    r.m = {c, 0, s, 0, 1, 0, -s, 0, c};
    return r;
  }
  static Mat3 rot_z(double a) {
    const double c = std::cos(a), s = std::sin(a);
    Mat3 r;
    r.m = {c, -s, 0, s, c, 0, 0, 0, 1};
    return r;
  }

  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
        r(i, j) = s;
      }
    return r;
  }

  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }

  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }

  double det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }

  // max |R R^T - I| entry
  double orthonormality_residual() const {
    const Mat3 g = (*this) * transposed();
    double worst = 0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        worst = std::max(worst, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
    return worst;
  }
};

using Sixd = std::array<double, 6>;

// First two columns of R, column-major concatenated.
inline Sixd rotation_to_6d(const Mat3& r) {
  if (r.orthonormality_residual() > 1e-4 || r.det() < 0.0)
    throw ValidationError("rotation_to_6d: input is not a proper rotation");
  return {r(0, 0), r(1, 0), r(2, 0), r(0, 1), r(1, 1), r(2, 1)};
}

// Gram-Schmidt recovery: b1 = n(a1), b2 = n(a2 - (b1.a2) b1), b3 = b1 x b2.
inline Mat3 sixd_to_rotation(const Sixd& v) {
  Vec3 a1{v[0], v[1], v[2]};
  Vec3 a2{v[3], v[4], v[5]};
  const double n1 = a1.norm();
  if (n1 <= 1e-8) throw DegenerateInputError("sixd_to_rotation: first column near zero");
  const Vec3 b1 = a1 * (1.0 / n1);
  Vec3 r = a2 - b1 * b1.dot(a2);
  const double n2 = r.norm();
  if (n2 < 1e-8) throw DegenerateInputError("sixd_to_rotation: columns nearly parallel");
  const Vec3 b2 = r * (1.0 / n2);
  const Vec3 b3 = b1.cross(b2);
  Mat3 out;
  out.m = {b1.x, b2.x, b3.x, b1.y, b2.y, b3.y, b1.z, b2.z, b3.z};
  return out;
}

}  // namespace coshdit
