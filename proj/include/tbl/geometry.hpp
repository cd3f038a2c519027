#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <ostream>

namespace tbl {

/// Speed of light in vacuum, m/s.
inline constexpr double kSpeedOfLight = 2.99792458e8;

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  constexpr Vec3() = default;
  constexpr Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

  constexpr double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  constexpr double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }

  constexpr Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  constexpr Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  constexpr Vec3 operator-() const { return {-x, -y, -z}; }
  constexpr Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  constexpr Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  constexpr Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }
  constexpr Vec3& operator-=(const Vec3& o) {
    x -= o.x;
    y -= o.y;
    z -= o.z;
    return *this;
  }
  constexpr Vec3& operator*=(double s) {
    x *= s;
    y *= s;
    z *= s;
    return *this;
  }
  constexpr bool operator==(const Vec3&) const = default;

  bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
};

constexpr Vec3 operator*(double s, const Vec3& v) { return v * s; }
constexpr double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
constexpr Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }
inline double distance(const Vec3& a, const Vec3& b) { return norm(a - b); }
inline Vec3 normalize(const Vec3& v) { return v / norm(v); }
constexpr Vec3 cwise_min(const Vec3& a, const Vec3& b) {
  return {a.x < b.x ? a.x : b.x, a.y < b.y ? a.y : b.y, a.z < b.z ? a.z : b.z};
}
constexpr Vec3 cwise_max(const Vec3& a, const Vec3& b) {
  return {a.x > b.x ? a.x : b.x, a.y > b.y ? a.y : b.y, a.z > b.z ? a.z : b.z};
}

inline std::ostream& operator<<(std::ostream& os, const Vec3& v) {
  return os << '(' << v.x << ", " << v.y << ", " << v.z << ')';
}

/// Row-major 3x3 matrix. Used for camera orientation (columns = right, up, back).
struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 from_columns(const Vec3& c0, const Vec3& c1, const Vec3& c2) {
    Mat3 r;
    r.m = {c0.x, c1.x, c2.x, c0.y, c1.y, c2.y, c0.z, c1.z, c2.z};
    return r;
  }
  double operator()(int r, int c) const { return m[r * 3 + c]; }
  Vec3 column(int c) const { return {m[c], m[3 + c], m[6 + c]}; }
  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  double determinant() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }
  /// Max |R^T R - I| entry.
  double orthonormality_error() const {
    double err = 0.0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        const double d = dot(column(i), column(j)) - (i == j ? 1.0 : 0.0);
        err = std::max(err, std::abs(d));
      }
    return err;
  }
};

struct Ray {
  Vec3 origin;
  Vec3 direction;  // unit norm
  Vec3 at(double t) const { return origin + direction * t; }
};

struct Aabb {
  Vec3 min;
  Vec3 max;

  Vec3 extent() const { return max - min; }
  Vec3 center() const { return (min + max) * 0.5; }
  bool valid() const { return min.x < max.x && min.y < max.y && min.z < max.z; }
  bool contains(const Vec3& p, double tol = 0.0) const {
    return p.x >= min.x - tol && p.x <= max.x + tol && p.y >= min.y - tol && p.y <= max.y + tol &&
           p.z >= min.z - tol && p.z <= max.z + tol;
  }
  bool contains(const Aabb& b, double tol = 0.0) const {
    return contains(b.min, tol) && contains(b.max, tol);
  }
  Aabb dilated(double margin) const {
    const Vec3 m{margin, margin, margin};
    return {min - m, max + m};
  }
  void expand(const Vec3& p) {
    min = cwise_min(min, p);
    max = cwise_max(max, p);
  }
  static Aabb empty() {
    constexpr double inf = std::numeric_limits<double>::infinity();
    return {{inf, inf, inf}, {-inf, -inf, -inf}};
  }
};

/// Slab test. Returns the parametric interval [t0, t1] where the ray is inside the box,
/// or false when it misses.
inline bool ray_box_interval(const Ray& ray, const Aabb& box, double& t0, double& t1) {
  t0 = -std::numeric_limits<double>::infinity();
  t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double o = ray.origin[a];
    const double d = ray.direction[a];
    if (d == 0.0) {
      if (o < box.min[a] || o > box.max[a]) return false;
      continue;
    }
    const double inv = 1.0 / d;
    double ta = (box.min[a] - o) * inv;
    double tb = (box.max[a] - o) * inv;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return false;
  }
  return true;
}

}  // namespace tbl
