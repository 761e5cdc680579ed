#pragma once
// Multi-bubble approximate solutions on the torus: scale configuration,
// cutoff-glued ansatz, periodic grid sampling, residuals, and the parameter
// curve along the mass ray that balances the dilation projections.
//
// Around each center p_t the scaled limit profile
//   W*_{i,t}(x)  = v_i((x-p_t)/eps_t) + 2 ln(1/eps_t)
//                  + 2 pi m_i [gamma(x,p_t) - gamma(p_t,p_t)]
// is glued to its far-field shape
//   W**_{i,t}(x) = v_i(delta_t/eps_t) + m_i ln(delta_t/|x-p_t|)
//                  + 2 ln(1/eps_t) + 2 pi m_i [gamma(x,p_t) - gamma(p_t,p_t)]
// by a quintic cutoff supported on delta_t/2 <= |x-p_t| <= delta_t:
//   U_i = sum_t [chi_t W*_{i,t} + (1 - chi_t) W**_{i,t}].
// Since m ln(1/r) + 2 pi m gamma(x,p) = 2 pi m G(x,p), each summand is a pure
// Green function plus a constant outside its cutoff disk.
//
// Two evaluation tracks coexist deliberately. The periodic M x M grid
// (TorusField, spectral -Delta, grid-quadrature masses) is the discretization
// the Newton corrector operates on. Closed-form pointwise evaluation
// (AnsatzEvaluator: U_i, -Delta U_i via the limit ODE and Delta gamma = 1,
// residual, masses by adaptive polar/panel quadrature) serves the scaling-law
// measurements: bubble cores shrink like eps_t = e^{H_1t} eps and fall below
// the spacing of any affordable uniform grid well before the small end of the
// eps sweeps, where grid quadrature of core-scale integrands aliases at a
// level that buries the eps^{m-2} signals being measured.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include <Eigen/Dense>

#include "lvb/core.hpp"
#include "lvb/fft.hpp"
#include "lvb/interaction.hpp"
#include "lvb/limit_profile.hpp"
#include "lvb/reduced_energy.hpp"
#include "lvb/torus_green.hpp"

namespace lvb {

// Quintic cutoff in the radius: 1 on r <= d/2, 0 on r >= d, C^2 everywhere.
inline double cutoff_radial(double r, double d) {
  if (r <= 0.5 * d) return 1.0;
  if (r >= d) return 0.0;
  double s = 2.0 * r / d - 1.0;
  return 1.0 - s * s * s * (10.0 + s * (-15.0 + 6.0 * s));
}

inline double cutoff_radial_d1(double r, double d) {
  if (r <= 0.5 * d || r >= d) return 0.0;
  double s = 2.0 * r / d - 1.0;
  return -30.0 * s * s * (1.0 - s) * (1.0 - s) * (2.0 / d);
}

inline double cutoff_radial_d2(double r, double d) {
  if (r <= 0.5 * d || r >= d) return 0.0;
  double s = 2.0 * r / d - 1.0;
  return -60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) * (4.0 / (d * d));
}

// Scales of one assembled configuration. The per-bubble scales are tied to the
// base scales through the first row of the H table,
//   eps_t = e^{H_1t} eps,  delta_t = e^{H_1t - H_11} delta,
// so that log(eps_t/eps_s) = H_1t - H_1s holds as an identity, not as an
// approximation; with a compatible H table the same holds for every row.
struct BubbleConfiguration {
  std::vector<Vec2> centers;
  Eigen::MatrixXd H;  // n x N log-scale table at the centers
  double eps = 0.0;   // base scale
  double delta = 0.0; // base cutoff radius (bubble 1)
  std::vector<double> eps_t, delta_t;
  std::vector<double> rho;  // parameter vector carried by the ansatz
};

// delta <= 0 requests the default: 1/20 of the minimum center separation
// (periodic self-images count, so N = 1 uses the lattice spacing).
// rho empty requests rho*.
inline BubbleConfiguration make_bubble_configuration(const ReducedEnergyModel& model,
                                                     const CriticalConfiguration& crit,
                                                     double eps, double delta = 0.0,
                                                     std::vector<double> rho = {}) {
  const TorusDomain& dom = model.green.dom;
  int N = model.N;
  if (int(crit.centers.size()) != N) throw config_error("center count mismatch");
  if (crit.H.rows() != model.n() || crit.H.cols() != N)
    throw config_error("H table shape mismatch");
  if (!(eps > 0.0)) throw config_error("base scale must be positive");

  double min_sep = dom.spacing();
  for (int t = 0; t < N; ++t)
    for (int s = t + 1; s < N; ++s)
      min_sep = std::min(min_sep, dom.dist(crit.centers[size_t(t)], crit.centers[size_t(s)]));
  if (delta <= 0.0) delta = min_sep / 20.0;

  BubbleConfiguration cfg;
  cfg.centers = crit.centers;
  cfg.H = crit.H;
  cfg.eps = eps;
  cfg.delta = delta;
  cfg.eps_t.resize(size_t(N));
  cfg.delta_t.resize(size_t(N));
  double max_delta = 0.0;
  for (int t = 0; t < N; ++t) {
    cfg.eps_t[size_t(t)] = std::exp(crit.H(0, t)) * eps;
    cfg.delta_t[size_t(t)] = std::exp(crit.H(0, t) - crit.H(0, 0)) * delta;
    max_delta = std::max(max_delta, cfg.delta_t[size_t(t)]);
  }
  if (!(min_sep > 6.0 * max_delta))
    throw config_error("cutoff disks too large: centers within six times the largest radius");
  for (int t = 0; t < N; ++t)
    if (!(cfg.eps_t[size_t(t)] <= 0.1 * cfg.delta_t[size_t(t)]))
      throw config_error("scales not separated: eps_t exceeds delta_t/10");

  if (rho.empty()) rho = model.rho_star;
  if (int(rho.size()) != model.n()) throw config_error("rho size mismatch");
  cfg.rho = std::move(rho);
  return cfg;
}

// Inner ansatz W*_{i,t}. Valid anywhere, used inside the cutoff disk.
inline double bubble_inner(const RadialProfile& pr, const GreenEvaluator& green,
                           const BubbleConfiguration& cfg, int i, int t, Vec2 x) {
  Vec2 p = cfg.centers[size_t(t)];
  double et = cfg.eps_t[size_t(t)];
  double r = green.dom.dist(x, p);
  return pr.v(i, r / et) + 2.0 * std::log(1.0 / et) +
         2.0 * pi * pr.m[size_t(i)] * (green.regular(x, p) - green.robin(p));
}

// Far-field shape W**_{i,t}. Singular at p_t; used where the cutoff decays.
inline double bubble_outer(const RadialProfile& pr, const GreenEvaluator& green,
                           const BubbleConfiguration& cfg, int i, int t, Vec2 x) {
  Vec2 p = cfg.centers[size_t(t)];
  double et = cfg.eps_t[size_t(t)];
  double dt = cfg.delta_t[size_t(t)];
  double r = green.dom.dist(x, p);
  double mi = pr.m[size_t(i)];
  return pr.v(i, dt / et) + mi * std::log(dt / r) + 2.0 * std::log(1.0 / et) +
         2.0 * pi * mi * (green.regular(x, p) - green.robin(p));
}

// Periodic grid samples of an n-component field. Points sit at
// x_{ab} = (a/M) e1 + (b/M) e2, row-major index a*M + b, weights 1/M^2;
// the duplicated cell edges are excluded.
struct TorusField {
  TorusDomain dom;
  int M = 0, n = 0;
  std::vector<std::vector<double>> u;
  std::vector<double> core_cells;  // assembly diagnostic: M * eps_t per bubble

  Vec2 point(int a, int b) const { return dom.from_frac(double(a) / M, double(b) / M); }

  double mean(int i) const {
    double acc = 0.0;
    for (double v : u[size_t(i)]) acc += v;
    return acc / double(u[size_t(i)].size());
  }
};

// Green regular parts on the grid, reusable across an eps sweep (they depend
// on the centers and the grid only). Filling this is the dominant assembly
// cost at large M.
struct AssemblyCache {
  int M = 0;
  std::vector<Vec2> centers;
  std::vector<std::vector<double>> reg;  // per center, gamma(x_ab, p_t)
  std::vector<double> robin;
};

inline TorusField assemble(const RadialProfile& pr, const BubbleConfiguration& cfg,
                           const ReducedEnergyModel& model, int M,
                           AssemblyCache* cache = nullptr, const GreenEvaluator* green = nullptr) {
  const GreenEvaluator& G = green ? *green : model.green;
  const TorusDomain& dom = G.dom;
  int n = model.n();
  int N = int(cfg.centers.size());
  if (M > 8192) throw config_error("grid exceeds the 8192 x 8192 memory guard");
  double dmin = *std::min_element(cfg.delta_t.begin(), cfg.delta_t.end());
  if (double(M) * dmin < 16.0)
    throw config_error("grid too coarse: fewer than 16 points across the smallest cutoff disk");

  AssemblyCache local;
  AssemblyCache& C = cache ? *cache : local;
  bool reuse = C.M == M && C.centers.size() == cfg.centers.size();
  if (reuse)
    for (size_t t = 0; t < cfg.centers.size(); ++t)
      reuse = reuse && norm(C.centers[t] - cfg.centers[t]) == 0.0;
  if (!reuse) {
    C.M = M;
    C.centers = cfg.centers;
    C.reg.assign(size_t(N), std::vector<double>(size_t(M) * size_t(M)));
    C.robin.resize(size_t(N));
    for (int t = 0; t < N; ++t) {
      Vec2 p = cfg.centers[size_t(t)];
      C.robin[size_t(t)] = G.robin(p);
      std::vector<double>& rg = C.reg[size_t(t)];
      for (int a = 0; a < M; ++a)
        for (int b = 0; b < M; ++b)
          rg[size_t(a) * M + b] = G.regular(dom.from_frac(double(a) / M, double(b) / M), p);
    }
  }

  TorusField f;
  f.dom = dom;
  f.M = M;
  f.n = n;
  f.u.assign(size_t(n), std::vector<double>(size_t(M) * size_t(M), 0.0));
  f.core_cells.resize(size_t(N));
  for (int t = 0; t < N; ++t) f.core_cells[size_t(t)] = double(M) * cfg.eps_t[size_t(t)];

  std::vector<double> v_rim(size_t(n) * size_t(N));  // v_i(delta_t/eps_t)
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < N; ++t)
      v_rim[size_t(i) * N + t] = pr.v(i, cfg.delta_t[size_t(t)] / cfg.eps_t[size_t(t)]);

  for (int a = 0; a < M; ++a) {
    for (int b = 0; b < M; ++b) {
      std::size_t k = std::size_t(a) * M + b;
      Vec2 x = dom.from_frac(double(a) / M, double(b) / M);
      for (int t = 0; t < N; ++t) {
        double et = cfg.eps_t[size_t(t)];
        double dt = cfg.delta_t[size_t(t)];
        double r = dom.dist(x, cfg.centers[size_t(t)]);
        double chi = cutoff_radial(r, dt);
        double core = 2.0 * std::log(1.0 / et);
        double reg = C.reg[size_t(t)][k] - C.robin[size_t(t)];
        for (int i = 0; i < n; ++i) {
          double mi = pr.m[size_t(i)];
          double tail = core + 2.0 * pi * mi * reg;
          double val;
          if (chi >= 1.0) {
            val = pr.v(i, r / et) + tail;
          } else if (chi <= 0.0) {
            val = v_rim[size_t(i) * N + t] + mi * std::log(dt / r) + tail;
          } else {
            double win = pr.v(i, r / et) + tail;
            double wout = v_rim[size_t(i) * N + t] + mi * std::log(dt / r) + tail;
            val = chi * win + (1.0 - chi) * wout;
          }
          f.u[size_t(i)][k] += val;
        }
      }
    }
  }
  return f;
}

// Grid-quadrature masses int h_i e^{u_i} of an arbitrary grid field.
inline std::vector<double> grid_masses(const TorusField& f, const ReducedEnergyModel& model) {
  std::vector<double> mass(size_t(f.n), 0.0);
  for (int i = 0; i < f.n; ++i) {
    double acc = 0.0;
    for (int a = 0; a < f.M; ++a)
      for (int b = 0; b < f.M; ++b)
        acc += model.h[size_t(i)].value(f.point(a, b)) *
               std::exp(f.u[size_t(i)][std::size_t(a) * f.M + b]);
    mass[size_t(i)] = acc / (double(f.M) * double(f.M));
  }
  return mass;
}

// Discrete residual of the coupled system on the grid:
//   S_i(u) = -Delta u_i - sum_j a_ij rho_j (h_j e^{u_j} / <h_j e^{u_j}> - 1)
// with the spectral Laplacian and grid-quadrature masses. Each S_i has zero
// grid mean by construction.
struct GridResidual {
  TorusField S;
  std::vector<double> mass;
};

inline GridResidual residual(const TorusField& f, const ReducedEnergyModel& model,
                             const std::vector<double>& rho, Fft2& fft) {
  if (f.n != model.n()) throw config_error("component count mismatch");
  if (int(rho.size()) != f.n) throw config_error("rho size mismatch");
  if (fft.size() != f.M) throw config_error("fft size mismatch");
  GridResidual out;
  out.S.dom = f.dom;
  out.S.M = f.M;
  out.S.n = f.n;
  out.S.u.assign(size_t(f.n), {});
  out.mass = grid_masses(f, model);

  std::size_t mm = std::size_t(f.M) * f.M;
  std::vector<std::vector<double>> src(size_t(f.n), std::vector<double>(mm));
  for (int j = 0; j < f.n; ++j) {
    const CoefficientField& hj = model.h[size_t(j)];
    for (int a = 0; a < f.M; ++a)
      for (int b = 0; b < f.M; ++b) {
        std::size_t k = std::size_t(a) * f.M + b;
        src[size_t(j)][k] =
            rho[size_t(j)] *
            (hj.value(f.point(a, b)) * std::exp(f.u[size_t(j)][k]) / out.mass[size_t(j)] - 1.0);
      }
  }
  for (int i = 0; i < f.n; ++i) {
    fft.neg_laplacian(f.u[size_t(i)], out.S.u[size_t(i)]);
    for (int j = 0; j < f.n; ++j) {
      double aij = model.A.a(i, j);
      if (aij == 0.0) continue;
      for (std::size_t k = 0; k < mm; ++k) out.S.u[size_t(i)][k] -= aij * src[size_t(j)][k];
    }
  }
  return out;
}

struct MassOptions {
  double rmin_factor = 1e-4;  // analytic disk below rmin_factor * eps_t
  double panel_ds = 0.5;      // 8-node Gauss panel width in s = ln r
  int theta_nodes = 64;
  int outer_base = 64;    // outer quadtree base cells per side
  int outer_levels = 2;   // extra subdivision near the partition band
};

// Closed-form pointwise evaluation of the assembled ansatz, its Laplacian,
// and its residual; masses by adaptive quadrature that resolves the bubble
// cores at any eps. -Delta U_i uses the limit ODE Delta v_i = -sum_j a_ij
// e^{v_j} pointwise and Delta gamma = 1 on the unit-area torus, so it needs
// no Green evaluations; the cutoff seam terms are closed-form because the
// gamma parts of W* and W** cancel in their difference.
class AnsatzEvaluator {
 public:
  AnsatzEvaluator(const RadialProfile& pr, const BubbleConfiguration& cfg,
                  const ReducedEnergyModel& model, const GreenEvaluator* green = nullptr,
                  const MassOptions& opt = {})
      : pr_(pr), cfg_(cfg), model_(model), green_(green ? green : &model.green), opt_(opt) {
    int N = int(cfg.centers.size());
    robin_.resize(size_t(N));
    for (int t = 0; t < N; ++t) robin_[size_t(t)] = green_->robin(cfg.centers[size_t(t)]);
    mass_ = compute_masses();
  }

  const Eigen::VectorXd& mass() const { return mass_; }

  void value_all(Vec2 x, std::vector<double>& out) const {
    int n = model_.n();
    out.assign(size_t(n), 0.0);
    for (int t = 0; t < int(cfg_.centers.size()); ++t) {
      Vec2 p = cfg_.centers[size_t(t)];
      double et = cfg_.eps_t[size_t(t)];
      double dt = cfg_.delta_t[size_t(t)];
      double r = green_->dom.dist(x, p);
      double chi = cutoff_radial(r, dt);
      double core = 2.0 * std::log(1.0 / et);
      double reg = green_->regular(x, p) - robin_[size_t(t)];
      for (int i = 0; i < n; ++i) {
        double mi = pr_.m[size_t(i)];
        double tail = core + 2.0 * pi * mi * reg;
        if (chi >= 1.0) {
          out[size_t(i)] += pr_.v(i, r / et) + tail;
        } else if (chi <= 0.0) {
          out[size_t(i)] += pr_.v(i, dt / et) + mi * std::log(dt / r) + tail;
        } else {
          double win = pr_.v(i, r / et) + tail;
          double wout = pr_.v(i, dt / et) + mi * std::log(dt / r) + tail;
          out[size_t(i)] += chi * win + (1.0 - chi) * wout;
        }
      }
    }
  }

  double value(int i, Vec2 x) const {
    std::vector<double> u;
    value_all(x, u);
    return u[size_t(i)];
  }

  // -Delta U_i(x), exact up to the profile interpolation error.
  double neg_laplacian(int i, Vec2 x) const {
    double lap = 0.0;
    double mi = pr_.m[size_t(i)];
    int n = model_.n();
    for (int t = 0; t < int(cfg_.centers.size()); ++t) {
      double et = cfg_.eps_t[size_t(t)];
      double dt = cfg_.delta_t[size_t(t)];
      double r = green_->dom.dist(x, cfg_.centers[size_t(t)]);
      if (r >= dt) {
        lap += 2.0 * pi * mi;
        continue;
      }
      double y = r / et;
      double coupling = 0.0;
      for (int j = 0; j < n; ++j)
        coupling += model_.A.a(i, j) * std::exp(pr_.v(j, y));
      double lap_in = 2.0 * pi * mi - coupling / (et * et);
      if (r <= 0.5 * dt) {
        lap += lap_in;
        continue;
      }
      double chi = cutoff_radial(r, dt);
      double c1 = cutoff_radial_d1(r, dt);
      double c2 = cutoff_radial_d2(r, dt);
      double diff = pr_.v(i, y) - pr_.v(i, dt / et) - mi * std::log(dt / r);
      double ddiff = pr_.vp(i, y) / et + mi / r;
      lap += chi * lap_in + (1.0 - chi) * (2.0 * pi * mi) + 2.0 * c1 * ddiff +
             (c2 + c1 / r) * diff;
    }
    return -lap;
  }

  void residual_all(Vec2 x, std::vector<double>& out) const {
    int n = model_.n();
    std::vector<double> u;
    value_all(x, u);
    out.assign(size_t(n), 0.0);
    for (int i = 0; i < n; ++i) {
      double acc = neg_laplacian(i, x);
      for (int j = 0; j < n; ++j)
        acc -= model_.A.a(i, j) * cfg_.rho[size_t(j)] *
               (model_.h[size_t(j)].value(x) * std::exp(u[size_t(j)]) / mass_(j) - 1.0);
      out[size_t(i)] = acc;
    }
  }

  double residual(int i, Vec2 x) const {
    std::vector<double> s;
    residual_all(x, s);
    return s[size_t(i)];
  }

  // Largest |S_i| over the region outside all cutoff disks, sampled on a
  // coarse net plus rings hugging each disk boundary (where the sup sits).
  double outer_residual_sup(int i, int net = 96, int ring = 256) const {
    double sup = 0.0;
    const TorusDomain& dom = green_->dom;
    for (int a = 0; a < net; ++a) {
      for (int b = 0; b < net; ++b) {
        Vec2 x = dom.from_frac((a + 0.5) / net, (b + 0.5) / net);
        bool outside = true;
        for (int t = 0; t < int(cfg_.centers.size()) && outside; ++t)
          outside = dom.dist(x, cfg_.centers[size_t(t)]) > cfg_.delta_t[size_t(t)];
        if (outside) sup = std::max(sup, std::abs(residual(i, x)));
      }
    }
    for (int t = 0; t < int(cfg_.centers.size()); ++t) {
      double r = 1.02 * cfg_.delta_t[size_t(t)];
      for (int k = 0; k < ring; ++k) {
        double th = 2.0 * pi * (k + 0.5) / ring;
        Vec2 x = cfg_.centers[size_t(t)] + Vec2{r * std::cos(th), r * std::sin(th)};
        sup = std::max(sup, std::abs(residual(i, x)));
      }
    }
    return sup;
  }

 private:
  // Masses int h_i e^{U_i} via a smooth partition: psi_t = cutoff(r_t, 2
  // delta_t) is 1 on the cutoff disk and vanishes beyond twice its radius
  // (disjoint by the six-radii separation guard). Each psi_t piece is
  // integrated in polar coordinates with Gauss panels uniform in ln r, the
  // remainder by a shallow quadtree with 3x3 Gauss leaves.
  Eigen::VectorXd compute_masses() const {
    int n = model_.n();
    int N = int(cfg_.centers.size());
    const TorusDomain& dom = green_->dom;
    Eigen::VectorXd mass = Eigen::VectorXd::Zero(n);
    std::vector<double> u;

    for (int t = 0; t < N; ++t) {
      Vec2 p = cfg_.centers[size_t(t)];
      double et = cfg_.eps_t[size_t(t)];
      double dt = cfg_.delta_t[size_t(t)];
      double rmin = opt_.rmin_factor * et;

      value_all(p, u);
      for (int i = 0; i < n; ++i)
        mass(i) += pi * rmin * rmin * model_.h[size_t(i)].value(p) * std::exp(u[size_t(i)]);

      // s-knots aligned with the integrand's seam radii
      std::vector<double> knots = {std::log(rmin), std::log(0.5 * dt), std::log(dt),
                                   std::log(2.0 * dt)};
      for (std::size_t seg = 0; seg + 1 < knots.size(); ++seg) {
        double sa = knots[seg], sb = knots[seg + 1];
        int pan = std::max(1, int(std::ceil((sb - sa) / opt_.panel_ds)));
        for (int pnl = 0; pnl < pan; ++pnl) {
          double a0 = sa + (sb - sa) * pnl / pan;
          double a1 = sa + (sb - sa) * (pnl + 1) / pan;
          for (const auto& [xi, wgt] : detail::gauss8()) {
            double s = a0 + (a1 - a0) * xi;
            double r = std::exp(s);
            double wr = wgt * (a1 - a0) * r * r * cutoff_radial(r, 2.0 * dt);
            if (wr == 0.0) continue;
            for (int k = 0; k < opt_.theta_nodes; ++k) {
              double th = 2.0 * pi * (k + 0.5) / opt_.theta_nodes;
              Vec2 x = p + Vec2{r * std::cos(th), r * std::sin(th)};
              value_all(x, u);
              double w = wr * 2.0 * pi / opt_.theta_nodes;
              for (int i = 0; i < n; ++i)
                mass(i) += w * model_.h[size_t(i)].value(x) * std::exp(u[size_t(i)]);
            }
          }
        }
      }
    }

    // remainder over the cell, integrand (1 - sum_t psi_t) h_i e^{U_i}
    struct Panel {
      double fx, fy, side;
      int level;
    };
    std::vector<Panel> stack;
    int B = opt_.outer_base;
    for (int a = 0; a < B; ++a)
      for (int b = 0; b < B; ++b)
        stack.push_back({double(a) / B, double(b) / B, 1.0 / B, 0});
    double hd_unit = 0.5 * (norm(dom.e1) + norm(dom.e2));
    static const double q3x[3] = {0.5 - std::sqrt(0.15), 0.5, 0.5 + std::sqrt(0.15)};
    static const double q3w[3] = {5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0};
    while (!stack.empty()) {
      Panel pnl = stack.back();
      stack.pop_back();
      Vec2 c = dom.from_frac(pnl.fx + 0.5 * pnl.side, pnl.fy + 0.5 * pnl.side);
      double hd = pnl.side * hd_unit;
      bool dead = false, band = false;
      for (int t = 0; t < N && !dead; ++t) {
        double d = dom.dist(c, cfg_.centers[size_t(t)]);
        double dt = cfg_.delta_t[size_t(t)];
        if (d + hd <= dt) dead = true;  // psi = 1, integrand vanishes
        else if (d - hd < 2.0 * dt) band = true;
      }
      if (dead) continue;
      if (band && pnl.level < opt_.outer_levels) {
        double h2 = 0.5 * pnl.side;
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b)
            stack.push_back({pnl.fx + a * h2, pnl.fy + b * h2, h2, pnl.level + 1});
        continue;
      }
      double area = pnl.side * pnl.side;  // unit-area cell, |det| = 1
      for (int a = 0; a < 3; ++a) {
        for (int b = 0; b < 3; ++b) {
          Vec2 x = dom.from_frac(pnl.fx + pnl.side * q3x[a], pnl.fy + pnl.side * q3x[b]);
          double psi = 0.0;
          for (int t = 0; t < N; ++t)
            psi += cutoff_radial(dom.dist(x, cfg_.centers[size_t(t)]),
                                 2.0 * cfg_.delta_t[size_t(t)]);
          if (psi >= 1.0) continue;
          double w = area * q3w[a] * q3w[b] * (1.0 - psi);
          value_all(x, u);
          for (int i = 0; i < n; ++i)
            mass(i) += w * model_.h[size_t(i)].value(x) * std::exp(u[size_t(i)]);
        }
      }
    }
    return mass;
  }

  const RadialProfile& pr_;
  const BubbleConfiguration& cfg_;
  const ReducedEnergyModel& model_;
  const GreenEvaluator* green_;
  MassOptions opt_;
  std::vector<double> robin_;
  Eigen::VectorXd mass_;
};

// Leading closed form of the masses:
//   int h_i e^{U_i} = (rho_i*/N) e^{(N-1) I_i} sum_l h_i(p_l)
//       e^{2 pi m_i sum_{s != l} [G(p_l,p_s) - gamma(p_s,p_s)]}
//       (prod_{s != l} eps_s)^{m_i - 2}  x  (1 + O(eps^{m^-2}))
// (for N = 1 the sum collapses to rho_i* h_i(p_1)).
inline Eigen::VectorXd mass_expansion(const RadialProfile& pr, const BubbleConfiguration& cfg,
                                      const ReducedEnergyModel& model) {
  int n = model.n();
  int N = int(cfg.centers.size());
  const GreenEvaluator& G = model.green;
  Eigen::VectorXd out(n);
  for (int i = 0; i < n; ++i) {
    double mi = pr.m[size_t(i)];
    double acc = 0.0;
    for (int l = 0; l < N; ++l) {
      double lg = 0.0;
      for (int s = 0; s < N; ++s) {
        if (s == l) continue;
        lg += 2.0 * pi * mi *
                  (G.eval(cfg.centers[size_t(l)], cfg.centers[size_t(s)]) -
                   G.robin(cfg.centers[size_t(s)])) +
              (mi - 2.0) * std::log(cfg.eps_t[size_t(s)]);
      }
      acc += model.h[size_t(i)].value(cfg.centers[size_t(l)]) * std::exp(lg);
    }
    out(i) = (model.rho_star[size_t(i)] / N) * std::exp((N - 1) * pr.I[size_t(i)]) * acc;
  }
  return out;
}

// One point of the parameter curve: rho_eps = rho* + s d with s chosen so the
// quadratic hypersurface functional hits the case-determined target.
struct RhoSweepPoint {
  double eps = 0.0;
  std::vector<double> rho;
  double lambda_target = 0.0;
  double ray_s = 0.0;
};

// Case-determined target for the hypersurface functional at base scale eps,
// written with the t = 1 dilation balance:
//   subcritical-D      -(m^-2)/(2 pi N) sum_{i in I^} w_i1^{-1} sum_s w_is D_is eps_1^{m^-2}
//   critical-L         -1/(pi N) sum_i w_i1^{-1} sum_s w_is L_is eps_1^2 ln(1/eps_1)
//   critical-L-zero-D  -1/(pi N) sum_i w_i1^{-1} sum_s w_is D_is eps_1^2
// with weights w_is = e^{(m^-2) H_is} h_i(p_s) and eps_1 = e^{H_11} eps.
inline double rho_sweep_target(const ReducedEnergyModel& model, const CriticalConfiguration& crit,
                               const QuantityReport& rep, double eps) {
  double mh = rep.m_hat;
  double eps1 = std::exp(crit.H(0, 0)) * eps;
  int N = model.N;
  int n = model.n();
  Eigen::MatrixXd w(n, N);
  for (int i = 0; i < n; ++i)
    for (int s = 0; s < N; ++s)
      w(i, s) = std::exp((mh - 2.0) * crit.H(i, s)) *
                model.h[size_t(i)].value(crit.centers[size_t(s)]);

  auto balance = [&](const Eigen::MatrixXd& Q, const std::vector<int>& rows) {
    double acc = 0.0;
    for (int i : rows) {
      double row = 0.0;
      for (int s = 0; s < N; ++s) row += w(i, s) * Q(i, s);
      acc += row / w(i, 0);
    }
    return acc;
  };
  std::vector<int> all;
  for (int i = 0; i < n; ++i) all.push_back(i);

  switch (rep.label) {
    case CaseLabel::SubcriticalD:
      return -(mh - 2.0) / (2.0 * pi * N) * balance(rep.D, rep.I_hat) *
             std::pow(eps1, mh - 2.0);
    case CaseLabel::CriticalL:
      return -1.0 / (pi * N) * balance(rep.L, all) * eps1 * eps1 * std::log(1.0 / eps1);
    case CaseLabel::CriticalLZeroD:
      return -1.0 / (pi * N) * balance(rep.D, all) * eps1 * eps1;
    default:
      throw config_error("no case label: classify the quantities first");
  }
}

// Solve Lambda(rho* + s d) = target along a positive ray. The functional is
// an exact quadratic in s, so the root is algebraic; the small root (the one
// vanishing with the target) is taken, in cancellation-free form.
inline std::vector<RhoSweepPoint> rho_sweep(const ReducedEnergyModel& model,
                                            const CriticalConfiguration& crit,
                                            const QuantityReport& rep,
                                            const std::vector<double>& eps_list,
                                            std::vector<double> dir = {}) {
  int n = model.n();
  int N = model.N;
  if (dir.empty()) dir.assign(size_t(n), 1.0);
  if (int(dir.size()) != n) throw config_error("ray direction size mismatch");
  for (double d : dir)
    if (!(d > 0.0)) throw config_error("ray direction must be positive");

  double lam0 = lambda_IN(model.A, model.rho_star, N);
  double alpha = 0.0, beta = 0.0;
  for (int i = 0; i < n; ++i) {
    alpha += (4.0 - 2.0 * model.m_star[size_t(i)]) * dir[size_t(i)] / (2.0 * pi * N);
    for (int j = 0; j < n; ++j)
      beta -= model.A.a(i, j) * dir[size_t(i)] * dir[size_t(j)] /
              (4.0 * pi * pi * double(N) * double(N));
  }

  std::vector<RhoSweepPoint> out;
  for (double eps : eps_list) {
    RhoSweepPoint pt;
    pt.eps = eps;
    pt.lambda_target = rho_sweep_target(model, crit, rep, eps);
    double lam = pt.lambda_target - lam0;  // absorb the floating-point offset at rho*
    double disc = alpha * alpha + 4.0 * beta * lam;
    if (disc < 0.0) throw numeric_error("no root: target beyond the ray's reach");
    pt.ray_s = 2.0 * lam / (alpha - std::sqrt(disc));
    pt.rho = model.rho_star;
    for (int i = 0; i < n; ++i) {
      pt.rho[size_t(i)] += pt.ray_s * dir[size_t(i)];
      if (!(pt.rho[size_t(i)] > 0.0)) throw numeric_error("no root: rho leaves the positive cone");
    }
    out.push_back(std::move(pt));
  }
  return out;
}

}  // namespace lvb
