#pragma once
// Green function of the Laplacian on a unit-area flat torus,
//   -Delta_x G(x,p) = delta_p - 1,  int G(.,p) = 0,
//   G(x,p) = -(1/2pi) ln|x-p| + gamma(x,p),  gamma smooth across x = p,
// evaluated by Ewald splitting. With y the nearest image of x - p,
// q_k = 2pi(k1 d1 + k2 d2) and z = eta^2 |y|^2:
//
//   gamma(x,p) = sum_{k != 0} exp(-|q_k|^2/(4 eta^2))/|q_k|^2 cos(q_k . y)
//              + sum_{R != 0} (1/4pi) E1(eta^2 |y-R|^2)
//              + f(|y|) - 1/(4 eta^2),
//
// where f(r) = (1/4pi)(E1(z) + ln z) - (1/2pi) ln eta is entire in z, so no
// small-r cancellation occurs. G subtracts (1/2pi) ln|y| from gamma. The
// result is independent of eta; tests sweep eta as an invariant.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "lvb/core.hpp"

namespace lvb {

namespace detail {

inline constexpr double euler_gamma = 0.57721566490153286061;

// Principal exponential integral E1(z), z > 0.
inline double expint_e1(double z) { return -std::expint(-z); }

// E1(z) + ln z, entire continuation through z = 0.
inline double e1_plus_log(double z) {
  if (z < 0.5) {
    double sum = 0.0, u = 1.0;
    for (int k = 1; k <= 24; ++k) {
      u *= -z / k;  // (-z)^k / k!
      double add = -u / k;
      sum += add;
      if (std::abs(add) < 1e-19) break;
    }
    return -euler_gamma + sum;
  }
  return expint_e1(z) + std::log(z);
}

}  // namespace detail

struct GreenEvaluator {
  // Real-space terms are kept while eta^2 rho^2 < z_max; E1(40) ~ 4e-20.
  static constexpr double z_max = 40.0;

  TorusDomain dom;
  double eta;

  struct DualMode {
    Vec2 q;
    double coef;  // exp(-|q|^2 / (4 eta^2)) / |q|^2
  };
  std::vector<DualMode> modes;
  std::vector<Vec2> images;  // nonzero lattice points within the E1 support
  int dual_cutoff = 0;       // largest |k_i| actually used

  explicit GreenEvaluator(TorusDomain d, double eta_ = 0.0, double tail_tol = 1e-13,
                          int min_dual = 0)
      : dom(d), eta(eta_ > 0.0 ? eta_ : std::sqrt(2.0 * pi)) {
    build_dual(tail_tol, min_dual);
    build_images();
  }

  void build_dual(double tail_tol, int min_dual = 0) {
    double inv4e2 = 0.25 / (eta * eta);
    int quiet = 0;
    for (int K = 1; K <= 4096; ++K) {
      double ring_max = 0.0;
      int ring_count = 0;
      for (int k1 = -K; k1 <= K; ++k1) {
        for (int k2 = -K; k2 <= K; ++k2) {
          if (std::max(std::abs(k1), std::abs(k2)) != K) continue;
          Vec2 q = 2.0 * pi * (double(k1) * dom.d1 + double(k2) * dom.d2);
          double q2 = norm2(q);
          double coef = std::exp(-q2 * inv4e2) / q2;
          modes.push_back({q, coef});
          ring_max = std::max(ring_max, coef);
          ++ring_count;
        }
      }
      dual_cutoff = K;
      quiet = (ring_max * ring_count < tail_tol) ? quiet + 1 : 0;
      if (quiet >= 2) return;
    }
    throw numeric_error("reciprocal-sum cutoff exceeded 4096");
  }

  void build_images() {
    // Keep R != 0 with |R| <= sqrt(z_max)/eta plus the cell covering radius,
    // so E1(eta^2 |y-R|^2) is below machine noise for every dropped R.
    double reach = std::sqrt(z_max) / eta + norm(dom.e1) + norm(dom.e2);
    int b1 = int(std::ceil(reach * norm(dom.d1))) + 1;
    int b2 = int(std::ceil(reach * norm(dom.d2))) + 1;
    for (int k1 = -b1; k1 <= b1; ++k1)
      for (int k2 = -b2; k2 <= b2; ++k2) {
        if (k1 == 0 && k2 == 0) continue;
        Vec2 R = double(k1) * dom.e1 + double(k2) * dom.e2;
        if (norm(R) <= reach) images.push_back(R);
      }
  }

  // gamma(x,p) = G(x,p) + (1/2pi) ln(dist(x,p)); smooth at coincidence.
  double regular(Vec2 x, Vec2 p) const {
    Vec2 y = dom.wrap(x - p);
    double eta2 = eta * eta;
    double acc = -0.25 / eta2;
    for (const DualMode& m : modes) acc += m.coef * std::cos(dot(m.q, y));
    for (const Vec2& R : images) {
      double zz = eta2 * norm2(y - R);
      if (zz < z_max) acc += 0.25 / pi * detail::expint_e1(zz);
    }
    acc += 0.25 / pi * detail::e1_plus_log(eta2 * norm2(y)) - 0.5 / pi * std::log(eta);
    return acc;
  }

  double robin(Vec2 p) const { return regular(p, p); }

  double eval(Vec2 x, Vec2 p) const {
    Vec2 y = dom.wrap(x - p);
    double r2 = norm2(y);
    if (r2 == 0.0) return -std::numeric_limits<double>::infinity();
    return regular(x, p) - 0.25 / pi * std::log(r2);
  }

  // grad_x G(x,p); singular like -(1/2pi) y/|y|^2 at coincidence.
  Vec2 grad(Vec2 x, Vec2 p) const {
    Vec2 y = dom.wrap(x - p);
    double eta2 = eta * eta;
    Vec2 acc{0.0, 0.0};
    for (const DualMode& m : modes) acc -= (m.coef * std::sin(dot(m.q, y))) * m.q;
    double z0 = eta2 * norm2(y);
    if (z0 < z_max && norm2(y) > 0.0)
      acc -= (0.5 / pi * std::exp(-z0) / norm2(y)) * y;
    for (const Vec2& R : images) {
      Vec2 w = y - R;
      double zz = eta2 * norm2(w);
      if (zz < z_max) acc -= (0.5 / pi * std::exp(-zz) / norm2(w)) * w;
    }
    return acc;
  }

  // grad_x gamma(x,p) = grad_x G + (1/2pi) y/|y|^2; vanishes at coincidence.
  Vec2 grad_regular(Vec2 x, Vec2 p) const {
    Vec2 y = dom.wrap(x - p);
    double eta2 = eta * eta;
    Vec2 acc{0.0, 0.0};
    for (const DualMode& m : modes) acc -= (m.coef * std::sin(dot(m.q, y))) * m.q;
    double r2 = norm2(y);
    if (r2 > 0.0) {
      // (1/2pi)(1 - exp(-z))/r^2 * y, cancellation-free via expm1
      acc += (-0.5 / pi * std::expm1(-eta2 * r2) / r2) * y;
    }
    for (const Vec2& R : images) {
      Vec2 w = y - R;
      double zz = eta2 * norm2(w);
      if (zz < z_max) acc -= (0.5 / pi * std::exp(-zz) / norm2(w)) * w;
    }
    return acc;
  }

  // grad^2_x G(x,p) for x != p (mod Lambda).
  Mat2 hess(Vec2 x, Vec2 p) const {
    Vec2 y = dom.wrap(x - p);
    if (norm2(y) == 0.0) throw numeric_error("Green hessian at coincidence");
    double eta2 = eta * eta;
    Mat2 acc{};
    for (const DualMode& m : modes)
      acc += (-m.coef * std::cos(dot(m.q, y))) * Mat2::outer(m.q, m.q);
    auto add_real = [&](Vec2 w) {
      double rho2 = norm2(w);
      double zz = eta2 * rho2;
      if (zz >= z_max) return;
      double e = std::exp(-zz);
      Mat2 hat = (1.0 / rho2) * Mat2::outer(w, w);
      acc += (0.5 / pi * e) *
             ((2.0 * eta2 + 1.0 / rho2) * hat - (1.0 / rho2) * (Mat2::identity() - hat));
    };
    add_real(y);
    for (const Vec2& R : images) add_real(y - R);
    return acc;
  }

  // grad^2 gamma at coincidence (lattice constant; trace equals 1).
  Mat2 hess_regular_origin() const {
    double eta2 = eta * eta;
    Mat2 acc = (0.5 / pi * eta2) * Mat2::identity();
    for (const DualMode& m : modes) acc += (-m.coef) * Mat2::outer(m.q, m.q);
    for (const Vec2& R : images) {
      double rho2 = norm2(R);
      double zz = eta2 * rho2;
      if (zz >= z_max) continue;
      double e = std::exp(-zz);
      Mat2 hat = (1.0 / rho2) * Mat2::outer(R, R);
      acc += (0.5 / pi * e) *
             ((2.0 * eta2 + 1.0 / rho2) * hat - (1.0 / rho2) * (Mat2::identity() - hat));
    }
    return acc;
  }

  // g~_t(x; p) = gamma(x, p_t) + sum_{s != t} G(x, p_s).
  double g_tilde(int t, Vec2 x, const std::vector<Vec2>& pts) const {
    double acc = regular(x, pts[size_t(t)]);
    for (size_t s = 0; s < pts.size(); ++s)
      if (int(s) != t) acc += eval(x, pts[s]);
    return acc;
  }

  Vec2 grad_g_tilde(int t, Vec2 x, const std::vector<Vec2>& pts) const {
    Vec2 acc = grad_regular(x, pts[size_t(t)]);
    for (size_t s = 0; s < pts.size(); ++s)
      if (int(s) != t) acc += grad(x, pts[s]);
    return acc;
  }

  // g~_t evaluated at its own center: robin(p_t) + sum_{s != t} G(p_t, p_s).
  double g_tilde_center(int t, const std::vector<Vec2>& pts) const {
    return g_tilde(t, pts[size_t(t)], pts);
  }
};

// Index of the site nearest to x (torus metric), lowest index on ties.
inline int voronoi_cell(const TorusDomain& dom, Vec2 x, const std::vector<Vec2>& sites) {
  if (sites.empty()) throw config_error("voronoi_cell: no sites");
  int best = 0;
  double bd = dom.dist(x, sites[0]);
  for (size_t i = 1; i < sites.size(); ++i) {
    double d = dom.dist(x, sites[i]);
    if (d < bd) {
      bd = d;
      best = int(i);
    }
  }
  return best;
}

// Voronoi cells Omega_t around the bubble centers together with the per-cell
// ball radii delta_t. Construction enforces the ball condition: the centers
// must keep pairwise torus distance > 6 max delta so that B_{3 delta_t}(p_t)
// sits inside its cell, and 6 max delta must fit under the shortest lattice
// vector so the balls are embedded.
struct VoronoiPartition {
  TorusDomain dom;
  std::vector<Vec2> sites;
  std::vector<double> delta;

  int cell(Vec2 x) const { return voronoi_cell(dom, x, sites); }
  // Shortest distance from p_t to any other site or nonzero lattice image.
  double separation(int t) const {
    double d = dom.spacing();
    for (size_t s = 0; s < sites.size(); ++s)
      if (int(s) != t) d = std::min(d, dom.dist(sites[size_t(t)], sites[s]));
    return d;
  }
};

inline VoronoiPartition voronoi_partition(const TorusDomain& dom, const std::vector<Vec2>& centers,
                                          const std::vector<double>& delta) {
  if (centers.empty() || centers.size() != delta.size())
    throw config_error("voronoi_partition: center/delta size mismatch");
  double dmax = 0.0;
  for (double d : delta) {
    if (!(d > 0.0)) throw config_error("voronoi_partition: delta must be positive");
    dmax = std::max(dmax, d);
  }
  double min_sep = dom.spacing();
  for (size_t t = 0; t < centers.size(); ++t)
    for (size_t s = t + 1; s < centers.size(); ++s)
      min_sep = std::min(min_sep, dom.dist(centers[t], centers[s]));
  if (6.0 * dmax >= min_sep)
    throw config_error("voronoi_partition: centers too close for the ball condition");
  VoronoiPartition part;
  part.dom = dom;
  part.sites = centers;
  part.delta = delta;
  return part;
}

}  // namespace lvb
