#pragma once
// Reduced energy of a multi-bubble configuration on the torus,
//   F(p) = sum_t sum_i [ln h_i(p_t) + 2 pi m_i* Gt_t(p_t; p)] rho_i*,
// with Gt_t(x; p) = sum_{s != t} G(x, p_s) + gamma(x, p_t), together with the
// per-center stationarity field
//   Phi_t(p) = sum_i [grad ln h_i(p_t) + 2 pi m_i* grad_1 Gt_t(p_t; p)] rho_i*
// whose zeros are the admissible bubble locations, the table
//   H_it(p) = (2 pi m_i*/(m_i*-2)) Gt_t(p_t; p) + ln h_i(p_t)/(m_i*-2),
// and the compatibility residual max |(H_it - H_is) - (H_jt - H_js)|.
//
// On a flat torus gamma(x, x) is a constant and grad gamma(x, p)|_{x=p} = 0,
// so the gamma slot never contributes to Phi_t or to its center derivatives.
// Newton runs on Phi (min-norm SVD steps absorb the translation null space
// present for translation-symmetric coefficients); certification eigenvalues
// are those of the per-center blocks d(Phi_t)/d(p_t).

#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "lvb/core.hpp"
#include "lvb/limit_profile.hpp"
#include "lvb/torus_green.hpp"

namespace lvb {

struct TrigMode {
  int k1 = 0, k2 = 0;
  double cos_coef = 0.0, sin_coef = 0.0;
};

// Doubly periodic trigonometric polynomial in the lattice coordinates,
//   g(x) = c0 + sum_k [a_k cos(q_k . x) + b_k sin(q_k . x)],
// q_k = 2 pi (k1 d1 + k2 d2) with d1, d2 the dual basis. Derivatives exact.
class TrigPoly {
 public:
  TrigPoly() : c0_(1.0) {}
  TrigPoly(const TorusDomain& dom, double constant, const std::vector<TrigMode>& modes)
      : c0_(constant) {
    for (const TrigMode& m : modes) {
      Wave w;
      w.q = (2.0 * pi) * (double(m.k1) * dom.d1 + double(m.k2) * dom.d2);
      w.a = m.cos_coef;
      w.b = m.sin_coef;
      waves_.push_back(w);
    }
  }

  double value(Vec2 x) const {
    double acc = c0_;
    for (const Wave& w : waves_) acc += w.a * std::cos(dot(w.q, x)) + w.b * std::sin(dot(w.q, x));
    return acc;
  }
  Vec2 grad(Vec2 x) const {
    Vec2 acc{0.0, 0.0};
    for (const Wave& w : waves_)
      acc = acc + (-w.a * std::sin(dot(w.q, x)) + w.b * std::cos(dot(w.q, x))) * w.q;
    return acc;
  }
  Mat2 hess(Vec2 x) const {
    Mat2 acc{};
    for (const Wave& w : waves_) {
      double c = -w.a * std::cos(dot(w.q, x)) - w.b * std::sin(dot(w.q, x));
      acc += c * Mat2::outer(w.q, w.q);
    }
    return acc;
  }
  bool constant() const { return waves_.empty(); }

 private:
  struct Wave {
    Vec2 q;
    double a = 0.0, b = 0.0;
  };
  double c0_ = 1.0;
  std::vector<Wave> waves_;
};

// Coefficient function h_i: either a positive trig polynomial or exp of one.
class CoefficientField {
 public:
  CoefficientField() = default;
  CoefficientField(TrigPoly p, bool exponential) : p_(std::move(p)), exp_(exponential) {}

  static CoefficientField one() { return CoefficientField(); }

  double value(Vec2 x) const { return exp_ ? std::exp(p_.value(x)) : p_.value(x); }
  Vec2 grad(Vec2 x) const {
    return exp_ ? value(x) * p_.grad(x) : p_.grad(x);
  }
  Mat2 hess(Vec2 x) const {
    if (!exp_) return p_.hess(x);
    Vec2 g = p_.grad(x);
    return value(x) * (p_.hess(x) + Mat2::outer(g, g));
  }
  double lap(Vec2 x) const { return hess(x).trace(); }

  Vec2 grad_ln(Vec2 x) const { return exp_ ? p_.grad(x) : (1.0 / value(x)) * p_.grad(x); }
  Mat2 hess_ln(Vec2 x) const {
    if (exp_) return p_.hess(x);
    double h = value(x);
    Vec2 g = p_.grad(x);
    return (1.0 / h) * p_.hess(x) + (-1.0 / (h * h)) * Mat2::outer(g, g);
  }
  bool constant_one() const {
    return !exp_ && p_.constant() && std::abs(value(Vec2{0, 0}) - 1.0) < 1e-15;
  }
  bool translation_symmetric() const { return p_.constant(); }

  void check_positive(const TorusDomain& dom, int grid = 256) const {
    if (exp_) return;
    for (int a = 0; a < grid; ++a)
      for (int b = 0; b < grid; ++b)
        if (value(dom.from_frac((a + 0.5) / grid, (b + 0.5) / grid)) <= 0.0)
          throw config_error("coefficient function is not positive");
  }

 private:
  TrigPoly p_;
  bool exp_ = false;
};

struct ReducedEnergyModel {
  CouplingMatrix A;
  GreenEvaluator green;
  std::vector<CoefficientField> h;  // one per component
  int N = 1;
  std::vector<double> sigma_star, m_star, rho_star;

  ReducedEnergyModel(const CouplingMatrix& A_, GreenEvaluator green_,
                     std::vector<CoefficientField> h_, int N_, std::vector<double> sigma)
      : A(A_), green(std::move(green_)), h(std::move(h_)), N(N_), sigma_star(std::move(sigma)) {
    if (N < 1) throw config_error("bubble count must be positive");
    if (int(h.size()) != A.n) throw config_error("coefficient count must match components");
    for (const CoefficientField& hi : h) hi.check_positive(green.dom);
    m_star = mass_exponents(A, sigma_star);
    for (double mi : m_star)
      if (mi <= 2.0 + 1e-10) throw config_error("mass exponent at or below 2");
    rho_star.assign(sigma_star.size(), 0.0);
    for (size_t i = 0; i < sigma_star.size(); ++i)
      rho_star[i] = 2.0 * pi * N * sigma_star[i];
    if (std::abs(lambda_IN(A, rho_star, N)) > 1e-10)
      throw config_error("rho* is not on the critical surface");
  }

  int n() const { return A.n; }
  // Pair weight 2 pi sum_i rho_i* m_i*.
  double pair_weight() const {
    double acc = 0.0;
    for (int i = 0; i < n(); ++i) acc += rho_star[size_t(i)] * m_star[size_t(i)];
    return 2.0 * pi * acc;
  }
  double m_hat() const {
    double v = m_star[0];
    for (double mi : m_star) v = std::min(v, mi);
    return v;
  }
};

namespace detail {

inline void require_distinct(const TorusDomain& dom, const std::vector<Vec2>& pts) {
  for (size_t t = 0; t < pts.size(); ++t)
    for (size_t s = t + 1; s < pts.size(); ++s)
      if (dom.dist(pts[t], pts[s]) < 1e-12)
        throw config_error("coincident centers");
}

}  // namespace detail

// H_it(p) for all components and centers (n x N).
inline Eigen::MatrixXd h_table(const ReducedEnergyModel& model, const std::vector<Vec2>& pts) {
  if (int(pts.size()) != model.N) throw config_error("center count mismatch");
  detail::require_distinct(model.green.dom, pts);
  Eigen::MatrixXd H(model.n(), model.N);
  for (int t = 0; t < model.N; ++t) {
    double gt = model.green.g_tilde_center(t, pts);
    for (int i = 0; i < model.n(); ++i) {
      double mi = model.m_star[size_t(i)];
      H(i, t) = 2.0 * pi * mi / (mi - 2.0) * gt +
                std::log(model.h[size_t(i)].value(pts[size_t(t)])) / (mi - 2.0);
    }
  }
  return H;
}

// max over (i,j,t,s) of |(H_it - H_is) - (H_jt - H_js)|.
inline double compat_residual(const Eigen::MatrixXd& H) {
  double worst = 0.0;
  for (int i = 0; i < H.rows(); ++i)
    for (int j = 0; j < H.rows(); ++j)
      for (int t = 0; t < H.cols(); ++t)
        for (int s = 0; s < H.cols(); ++s)
          worst = std::max(worst, std::abs((H(i, t) - H(i, s)) - (H(j, t) - H(j, s))));
  return worst;
}

inline double reduced_energy(const ReducedEnergyModel& model, const std::vector<Vec2>& pts) {
  if (int(pts.size()) != model.N) throw config_error("center count mismatch");
  detail::require_distinct(model.green.dom, pts);
  double acc = 0.0;
  for (int t = 0; t < model.N; ++t) {
    double gt = model.green.g_tilde_center(t, pts);
    for (int i = 0; i < model.n(); ++i)
      acc += model.rho_star[size_t(i)] *
             (std::log(model.h[size_t(i)].value(pts[size_t(t)])) + 2.0 * pi * model.m_star[size_t(i)] * gt);
  }
  return acc;
}

// True gradient of F; the Green pair sum enters every unordered pair twice.
inline std::vector<Vec2> gradient(const ReducedEnergyModel& model, const std::vector<Vec2>& pts) {
  detail::require_distinct(model.green.dom, pts);
  double w = model.pair_weight();
  std::vector<Vec2> g(pts.size(), Vec2{0, 0});
  for (int t = 0; t < model.N; ++t) {
    for (int i = 0; i < model.n(); ++i)
      g[size_t(t)] = g[size_t(t)] +
                     model.rho_star[size_t(i)] * model.h[size_t(i)].grad_ln(pts[size_t(t)]);
    for (int s = 0; s < model.N; ++s)
      if (s != t)
        g[size_t(t)] = g[size_t(t)] + 2.0 * w * model.green.grad(pts[size_t(t)], pts[size_t(s)]);
  }
  return g;
}

// Per-center stationarity sums Phi_t (the pair term enters once).
inline std::vector<Vec2> se1_field(const ReducedEnergyModel& model, const std::vector<Vec2>& pts) {
  detail::require_distinct(model.green.dom, pts);
  double w = model.pair_weight();
  std::vector<Vec2> f(pts.size(), Vec2{0, 0});
  for (int t = 0; t < model.N; ++t) {
    for (int i = 0; i < model.n(); ++i)
      f[size_t(t)] = f[size_t(t)] +
                     model.rho_star[size_t(i)] * model.h[size_t(i)].grad_ln(pts[size_t(t)]);
    for (int s = 0; s < model.N; ++s)
      if (s != t)
        f[size_t(t)] = f[size_t(t)] + w * model.green.grad(pts[size_t(t)], pts[size_t(s)]);
  }
  return f;
}

// Diagonal blocks d(Phi_t)/d(p_t); the certification Hessian.
inline std::vector<Mat2> se1_blocks(const ReducedEnergyModel& model, const std::vector<Vec2>& pts) {
  double w = model.pair_weight();
  std::vector<Mat2> blocks(pts.size());
  for (int t = 0; t < model.N; ++t) {
    Mat2 B{};
    for (int i = 0; i < model.n(); ++i)
      B += model.rho_star[size_t(i)] * model.h[size_t(i)].hess_ln(pts[size_t(t)]);
    for (int s = 0; s < model.N; ++s)
      if (s != t) B += w * model.green.hess(pts[size_t(t)], pts[size_t(s)]);
    blocks[size_t(t)] = B;
  }
  return blocks;
}

// Full 2N x 2N Jacobian of the stacked field Phi.
inline Eigen::MatrixXd se1_jacobian(const ReducedEnergyModel& model, const std::vector<Vec2>& pts) {
  double w = model.pair_weight();
  int N = model.N;
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(2 * N, 2 * N);
  std::vector<Mat2> diag = se1_blocks(model, pts);
  for (int t = 0; t < N; ++t) {
    J(2 * t, 2 * t) = diag[size_t(t)].xx;
    J(2 * t, 2 * t + 1) = diag[size_t(t)].xy;
    J(2 * t + 1, 2 * t) = diag[size_t(t)].yx;
    J(2 * t + 1, 2 * t + 1) = diag[size_t(t)].yy;
    for (int s = 0; s < N; ++s) {
      if (s == t) continue;
      Mat2 C = (-w) * model.green.hess(pts[size_t(t)], pts[size_t(s)]);
      J(2 * t, 2 * s) = C.xx;
      J(2 * t, 2 * s + 1) = C.xy;
      J(2 * t + 1, 2 * s) = C.yx;
      J(2 * t + 1, 2 * s + 1) = C.yy;
    }
  }
  return J;
}

struct CriticalConfiguration {
  std::vector<Vec2> centers;
  double grad_norm = 0.0;            // stacked Phi norm at the solution
  std::vector<double> eigenvalues;   // 2N block eigenvalues, ascending
  std::vector<Mat2> blocks;
  Eigen::MatrixXd H;                 // n x N table
  double compat = 0.0;
};

struct CriticalOptions {
  double tol = 1e-10;
  int max_iter = 50;
  double min_sep = 1e-3;  // collision guard on torus distance
  int max_halvings = 30;
};

inline CriticalConfiguration find_critical_point(const ReducedEnergyModel& model,
                                                 std::vector<Vec2> pts,
                                                 CriticalOptions opts = {}) {
  if (int(pts.size()) != model.N) throw config_error("center count mismatch");
  const TorusDomain& dom = model.green.dom;
  detail::require_distinct(dom, pts);
  int N = model.N;

  auto min_dist = [&](const std::vector<Vec2>& q) {
    double d = 1e30;
    for (size_t t = 0; t < q.size(); ++t)
      for (size_t s = t + 1; s < q.size(); ++s) d = std::min(d, dom.dist(q[t], q[s]));
    return d;
  };
  auto field_norm = [&](const std::vector<Vec2>& f) {
    double acc = 0.0;
    for (const Vec2& v : f) acc += norm2(v);
    return std::sqrt(acc);
  };

  std::vector<Vec2> f = se1_field(model, pts);
  double fn = field_norm(f);
  int it = 0;
  for (; it < opts.max_iter && fn > opts.tol; ++it) {
    Eigen::MatrixXd J = se1_jacobian(model, pts);
    Eigen::VectorXd rhs(2 * N);
    for (int t = 0; t < N; ++t) {
      rhs(2 * t) = -f[size_t(t)].x;
      rhs(2 * t + 1) = -f[size_t(t)].y;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(J, Eigen::ComputeThinU | Eigen::ComputeThinV);
    svd.setThreshold(1e-10);
    if (svd.rank() == 0) throw numeric_error("degenerate critical point: flat stationarity field");
    Eigen::VectorXd step = svd.solve(rhs);

    double lam = 1.0;
    bool accepted = false, collided = false;
    for (int half = 0; half < opts.max_halvings; ++half) {
      std::vector<Vec2> cand(pts);
      for (int t = 0; t < N; ++t)
        cand[size_t(t)] = dom.wrap(cand[size_t(t)] + lam * Vec2{step(2 * t), step(2 * t + 1)});
      if (N > 1 && min_dist(cand) < opts.min_sep) {
        collided = true;
        lam *= 0.5;
        continue;
      }
      std::vector<Vec2> fc = se1_field(model, cand);
      double fcn = field_norm(fc);
      if (fcn < fn * (1.0 - 1e-4 * lam) || fcn < opts.tol) {
        pts = cand;
        f = fc;
        fn = fcn;
        accepted = true;
        break;
      }
      collided = false;
      lam *= 0.5;
    }
    if (!accepted) {
      if (collided) throw numeric_error("collision during iteration");
      break;
    }
  }
  if (fn > opts.tol) throw numeric_error("critical point search did not converge");

  CriticalConfiguration out;
  out.centers = pts;
  out.grad_norm = fn;
  out.blocks = se1_blocks(model, pts);
  for (const Mat2& B : out.blocks) {
    auto [l0, l1] = sym_eigenvalues(B);
    out.eigenvalues.push_back(l0);
    out.eigenvalues.push_back(l1);
  }
  std::sort(out.eigenvalues.begin(), out.eigenvalues.end());
  double lmax = 0.0;
  for (double l : out.eigenvalues) lmax = std::max(lmax, std::abs(l));
  for (double l : out.eigenvalues)
    if (!(std::abs(l) > 1e-8 * lmax))
      throw numeric_error("degenerate critical point: near-zero block eigenvalue");
  out.H = h_table(model, pts);
  out.compat = compat_residual(out.H);
  return out;
}

}  // namespace lvb
