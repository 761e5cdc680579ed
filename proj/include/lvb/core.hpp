#pragma once
// Plane vectors, symmetric 2x2 matrices, and unit-area torus lattices.

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lvb {

inline constexpr double pi = 3.14159265358979323846;

// Malformed input or configuration (CLI exit code 2).
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Failed iteration, tripped guard, or out-of-range regime (CLI exit code 3).
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator-(Vec2 a) { return {-a.x, -a.y}; }
inline Vec2 operator*(double c, Vec2 a) { return {c * a.x, c * a.y}; }
inline Vec2 operator*(Vec2 a, double c) { return c * a; }
inline Vec2& operator+=(Vec2& a, Vec2 b) { a = a + b; return a; }
inline Vec2& operator-=(Vec2& a, Vec2 b) { a = a - b; return a; }

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm2(Vec2 a) { return dot(a, a); }
inline double norm(Vec2 a) { return std::sqrt(norm2(a)); }

struct Mat2 {
  double xx = 0.0, xy = 0.0, yx = 0.0, yy = 0.0;

  static Mat2 identity() { return {1.0, 0.0, 0.0, 1.0}; }
  static Mat2 outer(Vec2 a, Vec2 b) {
    return {a.x * b.x, a.x * b.y, a.y * b.x, a.y * b.y};
  }
  Vec2 apply(Vec2 v) const { return {xx * v.x + xy * v.y, yx * v.x + yy * v.y}; }
  double trace() const { return xx + yy; }
  double det() const { return xx * yy - xy * yx; }
};

inline Mat2 operator+(Mat2 a, Mat2 b) {
  return {a.xx + b.xx, a.xy + b.xy, a.yx + b.yx, a.yy + b.yy};
}
inline Mat2 operator-(Mat2 a, Mat2 b) {
  return {a.xx - b.xx, a.xy - b.xy, a.yx - b.yx, a.yy - b.yy};
}
inline Mat2 operator*(double c, Mat2 a) {
  return {c * a.xx, c * a.xy, c * a.yx, c * a.yy};
}
inline Mat2& operator+=(Mat2& a, Mat2 b) { a = a + b; return a; }

// Eigenvalues of a symmetric 2x2, ascending.
inline std::pair<double, double> sym_eigenvalues(const Mat2& m) {
  double mid = 0.5 * (m.xx + m.yy);
  double off = 0.5 * (m.xy + m.yx);
  double d = std::sqrt(0.25 * (m.xx - m.yy) * (m.xx - m.yy) + off * off);
  return {mid - d, mid + d};
}

// Flat torus R^2 / (Z e1 + Z e2). The constructor rescales the basis to unit
// cell area, orients it positively, and Gauss-reduces it so that the nearest
// lattice image of any point is found among the 3x3 rounding neighborhood.
struct TorusDomain {
  Vec2 e1, e2;  // reduced unit-area basis
  Vec2 d1, d2;  // dual basis, dot(e_i, d_j) = (i == j)

  TorusDomain() : TorusDomain({1.0, 0.0}, {0.0, 1.0}) {}

  TorusDomain(Vec2 a, Vec2 b) {
    double det = a.x * b.y - a.y * b.x;
    if (!(std::abs(det) > 1e-12)) throw config_error("degenerate lattice basis");
    double s = 1.0 / std::sqrt(std::abs(det));
    e1 = s * a;
    e2 = s * b;
    for (int it = 0; it < 64; ++it) {
      if (norm2(e2) < norm2(e1)) std::swap(e1, e2);
      double mu = std::round(dot(e2, e1) / norm2(e1));
      if (mu == 0.0) break;
      e2 -= mu * e1;
    }
    if (e1.x * e2.y - e1.y * e2.x < 0.0) e2 = -e2;
    d1 = {e2.y, -e2.x};
    d2 = {-e1.y, e1.x};
  }

  static TorusDomain square() { return TorusDomain({1.0, 0.0}, {0.0, 1.0}); }

  Vec2 frac(Vec2 x) const { return {dot(x, d1), dot(x, d2)}; }
  Vec2 from_frac(double f1, double f2) const { return f1 * e1 + f2 * e2; }

  // Representative of y + Lambda with minimal Euclidean norm.
  Vec2 wrap(Vec2 y) const {
    Vec2 f = frac(y);
    double r1 = std::round(f.x), r2 = std::round(f.y);
    Vec2 best = y - r1 * e1 - r2 * e2;
    double bn = norm2(best);
    for (int k1 = -1; k1 <= 1; ++k1) {
      for (int k2 = -1; k2 <= 1; ++k2) {
        if (k1 == 0 && k2 == 0) continue;
        Vec2 c = y - (r1 + k1) * e1 - (r2 + k2) * e2;
        double cn = norm2(c);
        if (cn < bn) {
          bn = cn;
          best = c;
        }
      }
    }
    return best;
  }

  double dist(Vec2 a, Vec2 b) const { return norm(wrap(a - b)); }

  // Shortest nonzero lattice vector length (basis is reduced, so it is e1).
  double spacing() const { return norm(e1); }
};

}  // namespace lvb
