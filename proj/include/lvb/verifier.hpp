#pragma once
// Kernel-mode projections of the assembled residual, their closed-form
// predictions, the reduction matrices of the finite-dimensional system, and a
// constrained Newton corrector that measures the remaining correction w.
//
// The projection targets are the glued kernel modes
//   Z*_{j,t,i} = chi_t d_{x_j} v_i((x-p_t)/eps_t)                      (j = 1, 2)
//   Z*_{3,t,i} = chi_t [ |x-p_t| v_i'(|x-p_t|/eps_t) + 2 eps_t ]
//                + (1 - chi_t) (2 - m_i) eps_t,
// with chi_t the assembly cutoff on |x-p_t| <= delta_t. Two quadrature tracks
// mirror the assembly module: project_residual pairs a grid residual with the
// sampled modes (the quantity the corrector's multipliers respond to), while
// project_exact integrates the closed-form residual in polar panels about one
// center and stays accurate when the cores are far below any affordable grid
// spacing. Mode fields are stored as a constant background plus deviations on
// the cutoff disks; away from the disks only the j = 3 background survives,
// and its pairing with a residual reduces to a mean because every residual
// component has zero mean.
//
// The corrector solves the discretized system augmented with one multiplier
// per orthogonality constraint (3N of them, each constraint summing over the
// components) and one per zero-mean gauge, a bordered square system in
// (w, lambda, s). Multiplier columns follow the constraint space of the
// reduction: translation columns weight the modes by sum_s eps_s^{-2}
// e^{v_i((x-p_s)/eps_s)}, dilation and gauge columns by the cutoff version
// sum_s chi_s eps_s^{-2} e^{v_i}.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lvb/assembly.hpp"
#include "lvb/core.hpp"
#include "lvb/fft.hpp"
#include "lvb/interaction.hpp"
#include "lvb/limit_profile.hpp"
#include "lvb/reduced_energy.hpp"

namespace lvb {

// Grid field that is a constant background except on listed cells. Dot
// products and rank-one updates cost O(support); the background couples only
// to the sum of the other factor.
struct ModeField {
  double background = 0.0;
  std::vector<std::size_t> idx;
  std::vector<double> dev;  // value minus background at the listed cells

  // <field, f> under the counting inner product (no 1/M^2)
  double dot(const double* f, std::size_t total) const {
    double acc = 0.0;
    if (background != 0.0) {
      double s = 0.0;
      for (std::size_t k = 0; k < total; ++k) s += f[k];
      acc = background * s;
    }
    for (std::size_t k = 0; k < idx.size(); ++k) acc += dev[k] * f[idx[k]];
    return acc;
  }

  void axpy(double c, double* f, std::size_t total) const {
    if (background != 0.0) {
      double cb = c * background;
      for (std::size_t k = 0; k < total; ++k) f[k] += cb;
    }
    for (std::size_t k = 0; k < idx.size(); ++k) f[idx[k]] += c * dev[k];
  }

  double max_abs() const {
    double m = std::abs(background);
    for (double d : dev) m = std::max(m, std::abs(background + d));
    return m;
  }

  // squared l2 norm over a grid of `total` cells
  double frob2(std::size_t total) const {
    double acc = background * background * double(total - idx.size());
    for (double d : dev) acc += (background + d) * (background + d);
    return acc;
  }
};

// Sampled kernel modes for every (j, t, i); j = 1, 2 are the cutoff
// translation derivatives, j = 3 the dilation mode with its outer constant.
// Normalization: the translation modes are the profile gradient evaluated at
// the scaled argument, (grad v_i)((x - p_t)/eps_t), with no chain-rule 1/eps_t
// factor, matching the dilation mode's explicit eps_t scale. All projections
// below therefore carry one power of eps_t in their leading terms.
struct KernelModes {
  int M = 0, n = 0, N = 0;
  std::vector<double> eps_t;
  std::vector<ModeField> fields;

  std::size_t index(int j, int t, int i) const {
    return (std::size_t(j - 1) * N + std::size_t(t)) * n + std::size_t(i);
  }
  const ModeField& mode(int j, int t, int i) const { return fields[index(j, t, i)]; }
};

inline KernelModes discrete_kernel_modes(const RadialProfile& pr,
                                         const BubbleConfiguration& cfg,
                                         const TorusDomain& dom, int M) {
  int n = int(pr.m.size());
  int N = int(cfg.centers.size());
  if (M > 8192) throw config_error("grid exceeds the 8192 x 8192 memory guard");
  double dmin = *std::min_element(cfg.delta_t.begin(), cfg.delta_t.end());
  if (double(M) * dmin < 16.0)
    throw config_error("grid too coarse: fewer than 16 points across the smallest cutoff disk");

  KernelModes km;
  km.M = M;
  km.n = n;
  km.N = N;
  km.eps_t = cfg.eps_t;
  km.fields.resize(std::size_t(3) * N * n);
  for (int t = 0; t < N; ++t)
    for (int i = 0; i < n; ++i) {
      double mi = pr.m[size_t(i)];
      km.fields[km.index(3, t, i)].background = (2.0 - mi) * cfg.eps_t[size_t(t)];
    }

  for (int t = 0; t < N; ++t) {
    Vec2 p = cfg.centers[size_t(t)];
    double et = cfg.eps_t[size_t(t)];
    double dt = cfg.delta_t[size_t(t)];
    for (int a = 0; a < M; ++a) {
      for (int b = 0; b < M; ++b) {
        Vec2 d = dom.wrap(dom.from_frac(double(a) / M, double(b) / M) - p);
        double r = norm(d);
        if (r >= dt) continue;
        std::size_t cell = std::size_t(a) * M + b;
        double chi = cutoff_radial(r, dt);
        for (int i = 0; i < n; ++i) {
          double mi = pr.m[size_t(i)];
          if (r > 0.0) {
            double der = chi * pr.vp(i, r / et) / r;
            km.fields[km.index(1, t, i)].idx.push_back(cell);
            km.fields[km.index(1, t, i)].dev.push_back(der * d.x);
            km.fields[km.index(2, t, i)].idx.push_back(cell);
            km.fields[km.index(2, t, i)].dev.push_back(der * d.y);
          }
          double z3 = et * (chi * pr.zmode(i, r / et) + (1.0 - chi) * (2.0 - mi));
          km.fields[km.index(3, t, i)].idx.push_back(cell);
          km.fields[km.index(3, t, i)].dev.push_back(z3 - (2.0 - mi) * et);
        }
      }
    }
  }
  return km;
}

// Grid quadrature of sum_i int S_i Z*_{j,t,i}.
inline double project_residual(const TorusField& S, const KernelModes& modes, int j, int t) {
  if (S.M != modes.M || S.n != modes.n) throw config_error("residual and modes grid mismatch");
  if (j < 1 || j > 3 || t < 0 || t >= modes.N) throw config_error("mode index out of range");
  std::size_t mm = std::size_t(S.M) * S.M;
  double acc = 0.0;
  for (int i = 0; i < modes.n; ++i)
    acc += modes.mode(j, t, i).dot(S.u[size_t(i)].data(), mm);
  return acc / double(mm);
}

struct ProjectionQuadrature {
  double rmin_factor = 1e-3;  // closed core disk below rmin_factor * eps_t
  double panel_ds = 0.35;     // 8-node Gauss panel width in s = ln r
  int theta_nodes = 32;
};

// All three projections about one center, continuum track. The integrand
// vanishes outside the cutoff disk: the translation modes carry chi_t, and
// the dilation mode is integrated in the subtracted form Z*_3 - (2-m_i)eps_t
// because the dropped constant pairs with the exact zero mean of S_i. The
// radial direction uses Gauss panels uniform in ln r (the residual varies on
// the eps_t scale near the core and the delta_t scale at the seam), the
// angular direction a midpoint rule, spectrally accurate for the smooth
// periodic slices.
inline std::array<double, 3> project_exact(const AnsatzEvaluator& ev, const RadialProfile& pr,
                                           const BubbleConfiguration& cfg, int t,
                                           const ProjectionQuadrature& q = {}) {
  int n = int(pr.m.size());
  Vec2 p = cfg.centers[size_t(t)];
  double et = cfg.eps_t[size_t(t)];
  double dt = cfg.delta_t[size_t(t)];
  double rmin = q.rmin_factor * et;
  std::array<double, 3> out = {0.0, 0.0, 0.0};
  std::vector<double> s;

  ev.residual_all(p, s);
  for (int i = 0; i < n; ++i)
    out[2] += pi * rmin * rmin * s[size_t(i)] * et * (pr.zmode(i, 0.0) - (2.0 - pr.m[size_t(i)]));

  double sa = std::log(rmin), sb = std::log(dt);
  int panels = std::max(1, int(std::ceil((sb - sa) / q.panel_ds)));
  for (int pnl = 0; pnl < panels; ++pnl) {
    double a0 = sa + (sb - sa) * pnl / panels;
    double a1 = sa + (sb - sa) * (pnl + 1) / panels;
    for (const auto& [xi, wgt] : detail::gauss8()) {
      double r = std::exp(a0 + (a1 - a0) * xi);
      double chi = cutoff_radial(r, dt);
      double wr = wgt * (a1 - a0) * r * r * (2.0 * pi / q.theta_nodes);
      for (int k = 0; k < q.theta_nodes; ++k) {
        double th = 2.0 * pi * (k + 0.5) / q.theta_nodes;
        double cth = std::cos(th), sth = std::sin(th);
        ev.residual_all(p + Vec2{r * cth, r * sth}, s);
        for (int i = 0; i < n; ++i) {
          double mi = pr.m[size_t(i)];
          double der = chi * pr.vp(i, r / et);
          double z3 = et * chi * (pr.zmode(i, r / et) - (2.0 - mi));
          out[0] += wr * s[size_t(i)] * der * cth;
          out[1] += wr * s[size_t(i)] * der * sth;
          out[2] += wr * s[size_t(i)] * z3;
        }
      }
    }
  }
  return out;
}

// Leading term of the j = 1, 2 projections: (eps_t / N) Phi_t with Phi the
// per-center stationarity field. Both components vanish at a critical point,
// where the remainder of order eps^{m^-1} is what the scaling sweeps measure.
inline std::vector<Vec2> translation_projection_prediction(const ReducedEnergyModel& model,
                                                           const BubbleConfiguration& cfg) {
  std::vector<Vec2> phi = se1_field(model, cfg.centers);
  std::vector<Vec2> out(phi.size());
  for (std::size_t t = 0; t < phi.size(); ++t)
    out[t] = (cfg.eps_t[t] / double(model.N)) * phi[t];
  return out;
}

// Closed form of the j = 3 projection, selected by the classified case:
//   subcritical-D      (m^-2)/N sum_{i in I^} [D_it + sum_{s!=t} (w_is/w_it) D_is] eps_t^{m^-1}
//   critical-L         2/N sum_i [same combination of L] eps_t^3 ln(1/eps_t)
//   critical-L-zero-D  2/N sum_i [same combination of D] eps_t^3
// plus 2 pi Lambda(rho) eps_t in every case, weights w_is = e^{(m^-2) H_is}
// h_i(p_s). Along the parameter curve of rho_sweep the two terms cancel at
// t = 1 by construction.
inline std::vector<double> dilation_projection_prediction(const ReducedEnergyModel& model,
                                                          const QuantityReport& rep,
                                                          const BubbleConfiguration& cfg) {
  int n = model.n();
  int N = int(cfg.centers.size());
  if (rep.label == CaseLabel::NoCaseApplies)
    throw config_error("no case label: classify the quantities first");
  bool wants_four = rep.label != CaseLabel::SubcriticalD;
  if (wants_four != rep.is_four)
    throw config_error("case label inconsistent with the decay exponents");

  double mh = rep.m_hat;
  double lam = lambda_IN(model.A, cfg.rho, N);
  Eigen::MatrixXd w(n, N);
  for (int i = 0; i < n; ++i)
    for (int s = 0; s < N; ++s)
      w(i, s) = std::exp((mh - 2.0) * cfg.H(i, s)) *
                model.h[size_t(i)].value(cfg.centers[size_t(s)]);

  const Eigen::MatrixXd& Q = rep.label == CaseLabel::CriticalL ? rep.L : rep.D;
  std::vector<int> all;
  for (int i = 0; i < n; ++i) all.push_back(i);
  const std::vector<int>& rows = rep.label == CaseLabel::SubcriticalD ? rep.I_hat : all;

  std::vector<double> out(size_t(N), 0.0);
  for (int t = 0; t < N; ++t) {
    double et = cfg.eps_t[size_t(t)];
    double comb = 0.0;
    for (int i : rows)
      for (int s = 0; s < N; ++s) comb += (w(i, s) / w(i, t)) * Q(i, s);
    double main;
    switch (rep.label) {
      case CaseLabel::SubcriticalD:
        main = (mh - 2.0) / N * comb * std::pow(et, mh - 1.0);
        break;
      case CaseLabel::CriticalL:
        main = 2.0 / N * comb * et * et * et * std::log(1.0 / et);
        break;
      default:  // critical-L-zero-D
        main = 2.0 / N * comb * et * et * et;
        break;
    }
    out[size_t(t)] = main + 2.0 * pi * lam * et;
  }
  return out;
}

struct ProjectionRow {
  double eps = 0.0;   // sweep parameter (the bare eps, not eps_t)
  int t = 0, j = 0;   // center index, mode index in {1, 2, 3}
  double numeric = 0.0;    // quadrature projection of the ansatz residual
  double predicted = 0.0;  // closed-form leading term
  double gap = 0.0;        // |numeric - predicted| / max(|numeric|, |predicted|)
  double slope = 0.0;      // log-log slope of |numeric| over the sweep so far (nan until 2 points)
};

struct ProjectionReport {
  std::vector<ProjectionRow> rows;  // ordered by (eps in sweep order, t, j)
};

// All 3N projections for each eps in the sweep, measured on the exact track
// and compared with the closed-form leading terms. The quantity report must
// be case-classified first (the j = 3 prediction selects its formula by it).
inline ProjectionReport make_projection_report(const ReducedEnergyModel& model,
                                               const RadialProfile& pr,
                                               const CriticalConfiguration& crit,
                                               const QuantityReport& quant,
                                               const std::vector<double>& eps_list,
                                               double delta = 0.05) {
  int N = int(crit.centers.size());
  ProjectionReport out;
  std::vector<std::vector<double>> hist(size_t(3 * N));  // |numeric| per (t,j)

  for (std::size_t k = 0; k < eps_list.size(); ++k) {
    double eps = eps_list[k];
    BubbleConfiguration cfg = make_bubble_configuration(model, crit, eps, delta);
    AnsatzEvaluator ev(pr, cfg, model);
    std::vector<Vec2> tp = translation_projection_prediction(model, cfg);
    std::vector<double> dp = dilation_projection_prediction(model, quant, cfg);
    for (int t = 0; t < N; ++t) {
      std::array<double, 3> num = project_exact(ev, pr, cfg, t);
      std::array<double, 3> pred = {tp[size_t(t)].x, tp[size_t(t)].y, dp[size_t(t)]};
      for (int j = 0; j < 3; ++j) {
        ProjectionRow row;
        row.eps = eps;
        row.t = t;
        row.j = j + 1;
        row.numeric = num[size_t(j)];
        row.predicted = pred[size_t(j)];
        double scale = std::max(std::abs(row.numeric), std::abs(row.predicted));
        row.gap = scale > 0.0 ? std::abs(row.numeric - row.predicted) / scale : 0.0;
        std::vector<double>& h = hist[size_t(t * 3 + j)];
        h.push_back(std::abs(row.numeric));
        if (k == 0) {
          row.slope = std::numeric_limits<double>::quiet_NaN();
        } else {
          double sx = 0, sy = 0, sxx = 0, sxy = 0;
          for (std::size_t q = 0; q <= k; ++q) {
            double x = std::log(eps_list[q]), y = std::log(std::max(h[q], 1e-300));
            sx += x; sy += y; sxx += x * x; sxy += x * y;
          }
          double nn = double(k + 1);
          row.slope = (nn * sxy - sx * sy) / (nn * sxx - sx * sx);
        }
        out.rows.push_back(row);
      }
    }
  }
  return out;
}

// Coefficient matrices of the finite-dimensional reduction, from the limit
// profile's radial integrals:
//   G1 (N x N)  diag (N-1) sum_i (m_i-2)^2 mu_i + sum_i nu_i,
//               off-diag (N-2) sum_i (m_i-2)^2 mu_i
//   G2 (n x n)  diag N mu_i
//   G3 (n x N)  all columns (N-1)(2-m_i) mu_i
// with mu_i = int e^{v_i} and nu_i = int e^{v_i} (r v_i' + 2)^2. The self-disk
// cross term int e^{v_i} (r v_i' + 2) vanishes identically, which is why no
// dilation-dilation coupling survives off the G1 diagonal.
struct ReductionMatrix {
  Eigen::MatrixXd G1, G2, G3, block, schur;
  double sv_min = 0.0, sv_max = 0.0;
  double schur_sv_min = 0.0, schur_sv_max = 0.0;
};

inline ReductionMatrix build_reduction_matrix(const RadialProfile& pr, int N) {
  if (N < 1) throw config_error("bubble count must be positive");
  int n = int(pr.m.size());
  double cross = 0.0, dil = 0.0;
  Eigen::VectorXd mu(n);
  for (int i = 0; i < n; ++i) {
    mu(i) = pr.component_mass(i);
    double mi = pr.m[size_t(i)];
    cross += (mi - 2.0) * (mi - 2.0) * mu(i);
    dil += pr.dilation_norm(i);
  }

  ReductionMatrix R;
  R.G1 = Eigen::MatrixXd::Constant(N, N, double(N - 2) * cross);
  R.G1.diagonal().setConstant(double(N - 1) * cross + dil);
  R.G2 = Eigen::MatrixXd::Zero(n, n);
  R.G3 = Eigen::MatrixXd::Zero(n, N);
  for (int i = 0; i < n; ++i) {
    R.G2(i, i) = double(N) * mu(i);
    for (int t = 0; t < N; ++t) R.G3(i, t) = double(N - 1) * (2.0 - pr.m[size_t(i)]) * mu(i);
  }

  R.block.setZero(N + n, N + n);
  R.block.topLeftCorner(N, N) = R.G1;
  R.block.topRightCorner(N, n) = R.G3.transpose();
  R.block.bottomLeftCorner(n, N) = R.G3;
  R.block.bottomRightCorner(n, n) = R.G2;
  R.schur = R.G1 - R.G3.transpose() * R.G2.inverse() * R.G3;

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(R.block);
  R.sv_max = svd.singularValues()(0);
  R.sv_min = svd.singularValues()(N + n - 1);
  Eigen::JacobiSVD<Eigen::MatrixXd> svds(R.schur);
  R.schur_sv_max = svds.singularValues()(0);
  R.schur_sv_min = svds.singularValues()(N - 1);
  if (R.sv_min < 1e-10 * R.sv_max)
    throw numeric_error("reduction matrix singular: smallest singular value below 1e-10 of largest");
  return R;
}

// Pairing of Z*_{3,t,i} with the gauge weight sum_s chi_s eps_s^{-2}
// e^{v_i(|x-p_s|/eps_s)} by per-disk radial quadrature (both factors are
// radial about each center; the mode is the constant (2-m_i) eps_t on the
// disks of s != t). The self-disk integral is the null pairing
// int e^{v}(rv'+2) = 0 up to cutoff corrections, so the total tends to
// (N-1)(2-m_i) mu_i eps_t.
inline double dilation_weight_pairing(const RadialProfile& pr, const BubbleConfiguration& cfg,
                                      int t, int i, double rmin_factor = 1e-4,
                                      double panel_ds = 0.25) {
  int N = int(cfg.centers.size());
  double et = cfg.eps_t[size_t(t)];
  double mi = pr.m[size_t(i)];
  double acc = 0.0;
  for (int sc = 0; sc < N; ++sc) {
    double es = cfg.eps_t[size_t(sc)];
    double ds = cfg.delta_t[size_t(sc)];
    double rmin = rmin_factor * es;
    auto z3 = [&](double r) {
      if (sc != t) return (2.0 - mi) * et;
      double chi = cutoff_radial(r, cfg.delta_t[size_t(t)]);
      return et * (chi * pr.zmode(i, r / et) + (1.0 - chi) * (2.0 - mi));
    };
    acc += pi * rmin * rmin * std::exp(pr.v(i, 0.0)) / (es * es) * z3(0.0);
    double sa = std::log(rmin), sb = std::log(ds);
    int panels = std::max(1, int(std::ceil((sb - sa) / panel_ds)));
    for (int pnl = 0; pnl < panels; ++pnl) {
      double a0 = sa + (sb - sa) * pnl / panels;
      double a1 = sa + (sb - sa) * (pnl + 1) / panels;
      for (const auto& [xi, wgt] : detail::gauss8()) {
        double r = std::exp(a0 + (a1 - a0) * xi);
        double wr = wgt * (a1 - a0) * r * r * 2.0 * pi;
        acc += wr * cutoff_radial(r, ds) * std::exp(pr.v(i, r / es)) / (es * es) * z3(r);
      }
    }
  }
  return acc;
}

// Constraint data of the bordered corrector system: the orthogonality rows
// (kernel modes, one row per (j, t) summing over components), the matching
// multiplier columns, and the zero-mean gauge columns (one per component).
struct CorrectorConstraints {
  KernelModes modes;
  std::vector<ModeField> columns;        // same indexing as modes.fields
  std::vector<ModeField> gauge_columns;  // per component
};

inline CorrectorConstraints corrector_constraints(const RadialProfile& pr,
                                                  const BubbleConfiguration& cfg,
                                                  const TorusDomain& dom, int M) {
  CorrectorConstraints cc;
  cc.modes = discrete_kernel_modes(pr, cfg, dom, M);
  int n = cc.modes.n, N = cc.modes.N;
  cc.columns.resize(cc.modes.fields.size());
  cc.gauge_columns.resize(size_t(n));

  // cutoff disks are pairwise disjoint (the configuration guard enforces
  // min_sep > 6 max delta_t), so each cell is visited for at most one t
  for (int t = 0; t < N; ++t) {
    Vec2 p = cfg.centers[size_t(t)];
    double et = cfg.eps_t[size_t(t)];
    double dt = cfg.delta_t[size_t(t)];
    for (int a = 0; a < M; ++a) {
      for (int b = 0; b < M; ++b) {
        Vec2 x = dom.from_frac(double(a) / M, double(b) / M);
        Vec2 d = dom.wrap(x - p);
        double r = norm(d);
        if (r >= dt) continue;
        std::size_t cell = std::size_t(a) * M + b;
        double chi = cutoff_radial(r, dt);
        for (int i = 0; i < n; ++i) {
          double wbare = 0.0, wcut = 0.0;
          for (int s = 0; s < N; ++s) {
            double es = cfg.eps_t[size_t(s)];
            double rs = s == t ? r : norm(dom.wrap(x - cfg.centers[size_t(s)]));
            double e = std::exp(pr.v(i, rs / es)) / (es * es);
            wbare += e;
            wcut += cutoff_radial(rs, cfg.delta_t[size_t(s)]) * e;
          }
          auto push = [&](int j, double val) {
            cc.columns[cc.modes.index(j, t, i)].idx.push_back(cell);
            cc.columns[cc.modes.index(j, t, i)].dev.push_back(val);
          };
          if (r > 0.0) {
            double der = chi * pr.vp(i, r / et) / r;
            push(1, der * d.x * wbare);
            push(2, der * d.y * wbare);
          }
          double mi = pr.m[size_t(i)];
          double z3 = et * (chi * pr.zmode(i, r / et) + (1.0 - chi) * (2.0 - mi));
          push(3, z3 * wcut);
          cc.gauge_columns[size_t(i)].idx.push_back(cell);
          cc.gauge_columns[size_t(i)].dev.push_back(wcut);
        }
      }
    }
  }

  // the j = 3 column reaches every disk (its mode is constant off-center, the
  // weight is not): append the cross-disk cells
  for (int t = 0; t < N; ++t) {
    double et = cfg.eps_t[size_t(t)];
    for (int s = 0; s < N; ++s) {
      if (s == t) continue;
      Vec2 ps = cfg.centers[size_t(s)];
      double ds = cfg.delta_t[size_t(s)];
      double es = cfg.eps_t[size_t(s)];
      for (int a = 0; a < M; ++a) {
        for (int b = 0; b < M; ++b) {
          Vec2 x = dom.from_frac(double(a) / M, double(b) / M);
          double rs = norm(dom.wrap(x - ps));
          if (rs >= ds) continue;
          std::size_t cell = std::size_t(a) * M + b;
          for (int i = 0; i < n; ++i) {
            double chi_w = cutoff_radial(rs, ds) * std::exp(pr.v(i, rs / es)) / (es * es);
            double z3 = (2.0 - pr.m[size_t(i)]) * et;
            cc.columns[cc.modes.index(3, t, i)].idx.push_back(cell);
            cc.columns[cc.modes.index(3, t, i)].dev.push_back(z3 * chi_w);
          }
        }
      }
    }
  }
  return cc;
}

struct CorrectorOptions {
  int max_newton = 30;
  double rtol = 1e-8;      // stop on |F| <= max(rtol |F_0|, atol)
  double atol = 0.0;
  // The linear tolerance is deliberately tight: the bordered system has a few
  // poorly separated directions near the constraint rows, and a 1e-3 solve
  // returns steps the line search can only accept heavily damped.
  double lin_tol = 1e-6;   // Krylov relative residual per Newton step
  int restart = 80;
  int max_lin_iters = 2000;
  int max_halvings = 12;
  bool dense = false;      // direct LU of the bordered Jacobian, M <= 64 only
};

struct CorrectorReport {
  std::vector<std::vector<double>> w;
  std::vector<double> multipliers;  // 3N values ordered (j-1) N + t
  std::vector<double> gauge;        // n values
  std::vector<double> history;      // |F| at the accepted iterates, [0] = start
  double f0 = 0.0, f = 0.0, reduction = 0.0;
  int iterations = 0;
  double w_inf = 0.0, w_l2 = 0.0;
  std::vector<double> mass;  // grid masses at the corrected state
};

namespace detail {

struct BorderedSystem {
  const TorusField& U0;
  const ReducedEnergyModel& model;
  const std::vector<double>& rho;
  const CorrectorConstraints& cons;
  Fft2& fft;
  int n, M, K;           // K = 3N multipliers
  std::size_t mm, dim;   // dim = n mm + K + n
  std::vector<std::vector<double>> h;       // coefficient samples
  std::vector<double> rowscale, colscale, growscale, gcolscale;
  std::vector<double> shift;                // preconditioner shifts per component

  // state-dependent caches
  std::vector<std::vector<double>> f_cache;  // h_j e^{u_j}
  std::vector<double> mass_cache;

  BorderedSystem(const TorusField& U0_, const ReducedEnergyModel& model_,
                 const std::vector<double>& rho_, const CorrectorConstraints& cons_, Fft2& fft_)
      : U0(U0_), model(model_), rho(rho_), cons(cons_), fft(fft_) {
    n = U0.n;
    M = U0.M;
    K = 3 * cons.modes.N;
    mm = std::size_t(M) * M;
    dim = std::size_t(n) * mm + std::size_t(K) + std::size_t(n);
    if (fft.size() != M) throw config_error("fft size mismatch");
    if (int(rho.size()) != n) throw config_error("rho size mismatch");
    if (K > 0 && (cons.modes.M != M || cons.modes.n != n))
      throw config_error("constraints built for a different grid");
    if (cons.columns.size() != cons.modes.fields.size() ||
        cons.gauge_columns.size() != std::size_t(n))
      throw config_error("constraint columns incomplete");

    h.assign(size_t(n), std::vector<double>(mm));
    for (int i = 0; i < n; ++i)
      for (int a = 0; a < M; ++a)
        for (int b = 0; b < M; ++b)
          h[size_t(i)][std::size_t(a) * M + b] = model.h[size_t(i)].value(U0.point(a, b));

    // scale rows and columns to unit l2 norm over the state vector; the true
    // multipliers are recovered as lambda_hat * colscale
    rowscale.assign(size_t(K), 1.0);
    colscale.assign(size_t(K), 1.0);
    for (int k = 0; k < K; ++k) {
      double r2 = 0.0, c2 = 0.0;
      for (int i = 0; i < n; ++i) {
        r2 += cons.modes.fields[std::size_t(k) * n + i].frob2(mm);
        c2 += cons.columns[std::size_t(k) * n + i].frob2(mm);
      }
      if (r2 > 0.0) rowscale[size_t(k)] = double(mm) / std::sqrt(r2);
      if (c2 > 0.0) colscale[size_t(k)] = 1.0 / std::sqrt(c2);
    }
    growscale.assign(size_t(n), std::sqrt(double(mm)));
    gcolscale.assign(size_t(n), 1.0);
    for (int i = 0; i < n; ++i) {
      double g2 = cons.gauge_columns[size_t(i)].frob2(mm);
      if (g2 > 0.0) gcolscale[size_t(i)] = 1.0 / std::sqrt(g2);
    }

    shift.assign(size_t(n), 0.0);
    for (int i = 0; i < n; ++i) {
      double c = 1.0;
      for (int j = 0; j < n; ++j) c += std::abs(model.A.a(i, j)) * rho[size_t(j)];
      shift[size_t(i)] = c;
    }
  }

  // u = U0 + w for the state fields; refreshes f = h e^u and the masses.
  // Overflow is left to propagate: a non-finite mass poisons the residual
  // norm and the line search rejects the step.
  void refresh(const std::vector<double>& x) {
    f_cache.assign(size_t(n), std::vector<double>(mm));
    mass_cache.assign(size_t(n), 0.0);
    for (int i = 0; i < n; ++i) {
      const std::vector<double>& u0 = U0.u[size_t(i)];
      const double* w = x.data() + std::size_t(i) * mm;
      double acc = 0.0;
      for (std::size_t k = 0; k < mm; ++k) {
        double v = h[size_t(i)][k] * std::exp(u0[k] + w[k]);
        f_cache[size_t(i)][k] = v;
        acc += v;
      }
      mass_cache[size_t(i)] = acc / double(mm);
    }
  }

  // F(x); expects refresh(x) first
  void residual(const std::vector<double>& x, std::vector<double>& F) const {
    F.assign(dim, 0.0);
    std::vector<double> u(mm), lap(mm);
    auto src = std::vector<std::vector<double>>(size_t(n), std::vector<double>(mm));
    for (int j = 0; j < n; ++j)
      for (std::size_t k = 0; k < mm; ++k)
        src[size_t(j)][k] = rho[size_t(j)] * (f_cache[size_t(j)][k] / mass_cache[size_t(j)] - 1.0);
    for (int i = 0; i < n; ++i) {
      const double* w = x.data() + std::size_t(i) * mm;
      for (std::size_t k = 0; k < mm; ++k) u[k] = U0.u[size_t(i)][k] + w[k];
      fft.neg_laplacian(u, lap);
      double* Fi = F.data() + std::size_t(i) * mm;
      for (std::size_t k = 0; k < mm; ++k) Fi[k] = lap[k];
      for (int j = 0; j < n; ++j) {
        double aij = model.A.a(i, j);
        if (aij == 0.0) continue;
        for (std::size_t k = 0; k < mm; ++k) Fi[k] -= aij * src[size_t(j)][k];
      }
    }
    append_border(x, F);
  }

  // multiplier columns and constraint rows, linear in x, shared by F and J
  void append_border(const std::vector<double>& x, std::vector<double>& F) const {
    for (int k = 0; k < K; ++k) {
      double lam = x[std::size_t(n) * mm + std::size_t(k)] * colscale[size_t(k)];
      if (lam != 0.0)
        for (int i = 0; i < n; ++i)
          cons.columns[std::size_t(k) * n + i].axpy(lam, F.data() + std::size_t(i) * mm, mm);
    }
    for (int i = 0; i < n; ++i) {
      double si = x[std::size_t(n) * mm + std::size_t(K) + std::size_t(i)] * gcolscale[size_t(i)];
      if (si != 0.0) cons.gauge_columns[size_t(i)].axpy(si, F.data() + std::size_t(i) * mm, mm);
    }
    for (int k = 0; k < K; ++k) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i)
        acc += cons.modes.fields[std::size_t(k) * n + i].dot(x.data() + std::size_t(i) * mm, mm);
      F[std::size_t(n) * mm + std::size_t(k)] = rowscale[size_t(k)] * acc / double(mm);
    }
    for (int i = 0; i < n; ++i) {
      const double* w = x.data() + std::size_t(i) * mm;
      double acc = 0.0;
      for (std::size_t k = 0; k < mm; ++k) acc += w[k];
      F[std::size_t(n) * mm + std::size_t(K) + std::size_t(i)] =
          growscale[size_t(i)] * acc / double(mm);
    }
  }

  // J(x) dx about the refreshed state
  void apply_jacobian(const std::vector<double>& dx, std::vector<double>& y) const {
    y.assign(dim, 0.0);
    std::vector<double> lap(mm), dwi(mm);
    auto dsrc = std::vector<std::vector<double>>(size_t(n), std::vector<double>(mm));
    for (int j = 0; j < n; ++j) {
      const double* dw = dx.data() + std::size_t(j) * mm;
      const std::vector<double>& fj = f_cache[size_t(j)];
      double mj = mass_cache[size_t(j)];
      double fdw = 0.0;
      for (std::size_t k = 0; k < mm; ++k) fdw += fj[k] * dw[k];
      fdw /= double(mm);
      double rj = rho[size_t(j)];
      for (std::size_t k = 0; k < mm; ++k)
        dsrc[size_t(j)][k] = rj * (fj[k] * dw[k] / mj - fj[k] * fdw / (mj * mj));
    }
    for (int i = 0; i < n; ++i) {
      const double* dw = dx.data() + std::size_t(i) * mm;
      std::copy(dw, dw + mm, dwi.begin());
      fft.neg_laplacian(dwi, lap);
      double* yi = y.data() + std::size_t(i) * mm;
      for (std::size_t k = 0; k < mm; ++k) yi[k] = lap[k];
      for (int j = 0; j < n; ++j) {
        double aij = model.A.a(i, j);
        if (aij == 0.0) continue;
        for (std::size_t k = 0; k < mm; ++k) yi[k] -= aij * dsrc[size_t(j)][k];
      }
    }
    append_border(dx, y);
  }

  // z = P^{-1} r with P = diag(-Delta + shift_i, I): the Fourier-diagonal
  // part of the Jacobian; the border passes through unchanged
  void apply_preconditioner(const std::vector<double>& r, std::vector<double>& z) const {
    z.assign(dim, 0.0);
    std::vector<double> ri(mm), zi;
    for (int i = 0; i < n; ++i) {
      std::copy(r.begin() + long(std::size_t(i) * mm), r.begin() + long(std::size_t(i) * mm + mm),
                ri.begin());
      fft.solve_shifted(ri, shift[size_t(i)], zi);
      std::copy(zi.begin(), zi.end(), z.begin() + long(std::size_t(i) * mm));
    }
    for (std::size_t k = std::size_t(n) * mm; k < dim; ++k) z[k] = r[k];
  }
};

inline double flat_norm2(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

// Right-preconditioned restarted GMRES on the bordered system, modified
// Gram-Schmidt with Givens rotations. Returns the final relative residual;
// cond_est receives the spread of the rotated Hessenberg diagonal, a cheap
// lower bound on the conditioning of the preconditioned operator.
inline double gmres_bordered(const BorderedSystem& sys, const std::vector<double>& b,
                             std::vector<double>& sol, double tol, int restart, int max_iters,
                             double* cond_est) {
  std::size_t dim = sys.dim;
  sol.assign(dim, 0.0);  // accumulates the preconditioned-space iterate
  double bnorm = flat_norm2(b);
  if (cond_est) *cond_est = 1.0;
  if (bnorm == 0.0) return 0.0;
  double rel = 1.0;
  int done = 0;
  std::vector<double> r(b), tmp, ptmp;

  while (done < max_iters && rel > tol) {
    int m = std::min(restart, max_iters - done);
    std::vector<std::vector<double>> V;
    V.reserve(size_t(m) + 1);
    double beta = flat_norm2(r);
    if (beta == 0.0) break;
    V.push_back(r);
    for (double& x : V[0]) x /= beta;
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(m + 1, m);
    std::vector<double> cs(size_t(m), 0.0), sn(size_t(m), 0.0);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(m + 1);
    g(0) = beta;
    int j = 0;
    bool breakdown = false;
    for (; j < m; ++j) {
      sys.apply_preconditioner(V[size_t(j)], ptmp);
      sys.apply_jacobian(ptmp, tmp);
      for (int l = 0; l <= j; ++l) {
        double hij = 0.0;
        const std::vector<double>& vl = V[size_t(l)];
        for (std::size_t k = 0; k < dim; ++k) hij += tmp[k] * vl[k];
        H(l, j) = hij;
        for (std::size_t k = 0; k < dim; ++k) tmp[k] -= hij * vl[k];
      }
      H(j + 1, j) = flat_norm2(tmp);
      if (H(j + 1, j) > 0.0) {
        for (double& x : tmp) x /= H(j + 1, j);
        V.push_back(std::move(tmp));
      } else {
        breakdown = true;  // Krylov space exhausted, the iterate is exact
      }
      for (int l = 0; l < j; ++l) {
        double t = cs[size_t(l)] * H(l, j) + sn[size_t(l)] * H(l + 1, j);
        H(l + 1, j) = -sn[size_t(l)] * H(l, j) + cs[size_t(l)] * H(l + 1, j);
        H(l, j) = t;
      }
      double d = std::hypot(H(j, j), H(j + 1, j));
      cs[size_t(j)] = d == 0.0 ? 1.0 : H(j, j) / d;
      sn[size_t(j)] = d == 0.0 ? 0.0 : H(j + 1, j) / d;
      H(j, j) = d;
      H(j + 1, j) = 0.0;
      g(j + 1) = -sn[size_t(j)] * g(j);
      g(j) = cs[size_t(j)] * g(j);
      rel = std::abs(g(j + 1)) / bnorm;
      ++done;
      if (rel <= tol || breakdown) {
        ++j;
        break;
      }
    }
    Eigen::VectorXd y = Eigen::VectorXd::Zero(j);
    double dmax = 0.0, dmin = std::numeric_limits<double>::infinity();
    for (int l = j - 1; l >= 0; --l) {
      double acc = g(l);
      for (int c = l + 1; c < j; ++c) acc -= H(l, c) * y(c);
      if (H(l, l) == 0.0) throw numeric_error("linear solve failed: singular Hessenberg factor");
      y(l) = acc / H(l, l);
      dmax = std::max(dmax, std::abs(H(l, l)));
      dmin = std::min(dmin, std::abs(H(l, l)));
    }
    if (cond_est && j > 0 && dmin > 0.0) *cond_est = std::max(*cond_est, dmax / dmin);
    for (int l = 0; l < j; ++l)
      for (std::size_t k = 0; k < dim; ++k) sol[k] += y(l) * V[size_t(l)][k];
    if (rel <= tol || breakdown) break;
    // true residual for the next cycle
    sys.apply_preconditioner(sol, ptmp);
    sys.apply_jacobian(ptmp, tmp);
    for (std::size_t k = 0; k < dim; ++k) r[k] = b[k] - tmp[k];
    rel = flat_norm2(r) / bnorm;
  }
  // map back: the Krylov iterate solves J P^{-1} y = b, the step is P^{-1} y
  std::vector<double> out;
  sys.apply_preconditioner(sol, out);
  sol.swap(out);
  return rel;
}

}  // namespace detail

// Damped inexact Newton on the bordered system
//   -Delta u_i - sum_j a_ij rho_j (h_j e^{u_j}/<h_j e^{u_j}> - 1)
//     + sum_{j,t} lambda_{j,t} C_{j,t,i} + s_i B_i = 0
//   sum_i <Z*_{j,t,i}, w_i> = 0,   <w_i> = 0,   u_i = U_i + w_i,
// linear solves by Fourier-preconditioned GMRES (or a dense LU on small
// grids), step control by residual-norm backtracking.
inline CorrectorReport newton_correct(const TorusField& U0, const ReducedEnergyModel& model,
                                      const std::vector<double>& rho,
                                      const CorrectorConstraints& cons, Fft2& fft,
                                      const CorrectorOptions& opt = {}) {
  if (U0.n != model.n()) throw config_error("component count mismatch");
  if (opt.dense && U0.M > 64)
    throw config_error("dense solve limited to grids of 64 or fewer points per side");
  detail::BorderedSystem sys(U0, model, rho, cons, fft);
  std::size_t dim = sys.dim;

  std::vector<double> x(dim, 0.0), F, Fnew, step, xnew(dim);
  sys.refresh(x);
  sys.residual(x, F);
  double fn = detail::flat_norm2(F);
  if (!std::isfinite(fn)) throw numeric_error("initial residual is not finite");

  CorrectorReport rep;
  rep.f0 = fn;
  rep.history.push_back(fn);
  double target = std::max(opt.rtol * fn, opt.atol);

  while (fn > target && rep.iterations < opt.max_newton) {
    std::vector<double> rhs(dim);
    for (std::size_t k = 0; k < dim; ++k) rhs[k] = -F[k];
    if (opt.dense) {
      Eigen::MatrixXd J = Eigen::MatrixXd::Zero(long(dim), long(dim));
      std::vector<double> e(dim, 0.0), col;
      for (std::size_t c = 0; c < dim; ++c) {
        e[c] = 1.0;
        sys.apply_jacobian(e, col);
        for (std::size_t rr = 0; rr < dim; ++rr) J(long(rr), long(c)) = col[rr];
        e[c] = 0.0;
      }
      Eigen::VectorXd bb = Eigen::VectorXd::Zero(long(dim));
      for (std::size_t k = 0; k < dim; ++k) bb(long(k)) = rhs[k];
      Eigen::VectorXd dd = Eigen::PartialPivLU<Eigen::MatrixXd>(J).solve(bb);
      double rres = (J * dd - bb).norm() / bb.norm();
      if (!(rres < 0.5))
        throw numeric_error("linear solve failed: dense factorization did not reduce the residual");
      step.assign(dim, 0.0);
      for (std::size_t k = 0; k < dim; ++k) step[k] = dd(long(k));
    } else {
      double cond = 1.0;
      double rel = detail::gmres_bordered(sys, rhs, step, opt.lin_tol, opt.restart,
                                          opt.max_lin_iters, &cond);
      if (!(rel < 0.5))
        throw numeric_error("linear solve failed: relative residual " + std::to_string(rel) +
                            " after " + std::to_string(opt.max_lin_iters) +
                            " iterations (triangle condition estimate " + std::to_string(cond) +
                            ")");
    }

    double alpha = 1.0;
    bool accepted = false;
    for (int hv = 0; hv <= opt.max_halvings; ++hv) {
      for (std::size_t k = 0; k < dim; ++k) xnew[k] = x[k] + alpha * step[k];
      sys.refresh(xnew);
      sys.residual(xnew, Fnew);
      double fnew = detail::flat_norm2(Fnew);
      if (fnew <= (1.0 - 1e-4 * alpha) * fn) {  // NaN fails the test and halves
        x.swap(xnew);
        F.swap(Fnew);
        fn = fnew;
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      sys.refresh(x);
      throw numeric_error("newton stalled: no descent after " +
                          std::to_string(opt.max_halvings) + " halvings at iteration " +
                          std::to_string(rep.iterations) + " (|F| = " + std::to_string(fn) + ")");
    }
    ++rep.iterations;
    rep.history.push_back(fn);
  }
  if (fn > target)
    throw numeric_error("newton stalled: " + std::to_string(opt.max_newton) +
                        " iterations without reaching the tolerance (|F| = " +
                        std::to_string(fn) + ")");

  rep.f = fn;
  rep.reduction = fn > 0.0 ? rep.f0 / fn : std::numeric_limits<double>::infinity();
  rep.w.assign(size_t(sys.n), std::vector<double>(sys.mm));
  for (int i = 0; i < sys.n; ++i) {
    std::copy(x.begin() + long(std::size_t(i) * sys.mm),
              x.begin() + long(std::size_t(i) * sys.mm + sys.mm), rep.w[size_t(i)].begin());
    for (double v : rep.w[size_t(i)]) {
      rep.w_inf = std::max(rep.w_inf, std::abs(v));
      rep.w_l2 += v * v;
    }
  }
  rep.w_l2 = std::sqrt(rep.w_l2 / double(sys.mm));
  rep.multipliers.assign(size_t(sys.K), 0.0);
  for (int k = 0; k < sys.K; ++k)
    rep.multipliers[size_t(k)] =
        x[std::size_t(sys.n) * sys.mm + std::size_t(k)] * sys.colscale[size_t(k)];
  rep.gauge.assign(size_t(sys.n), 0.0);
  for (int i = 0; i < sys.n; ++i)
    rep.gauge[size_t(i)] = x[std::size_t(sys.n) * sys.mm + std::size_t(sys.K) + std::size_t(i)] *
                           sys.gcolscale[size_t(i)];
  rep.mass = sys.mass_cache;
  return rep;
}

// Sub-cell argmax of one component near a reference point: best grid cell
// within the radius, then a quadratic correction from the 3 x 3 neighborhood
// in fractional coordinates.
inline Vec2 subcell_argmax(const TorusField& f, int i, Vec2 near, double radius) {
  int M = f.M;
  const std::vector<double>& u = f.u[size_t(i)];
  int best_a = -1, best_b = -1;
  double best = -std::numeric_limits<double>::infinity();
  for (int a = 0; a < M; ++a)
    for (int b = 0; b < M; ++b)
      if (f.dom.dist(f.point(a, b), near) <= radius && u[std::size_t(a) * M + b] > best) {
        best = u[std::size_t(a) * M + b];
        best_a = a;
        best_b = b;
      }
  if (best_a < 0) throw numeric_error("argmax search found no grid point within the radius");

  auto at = [&](int a, int b) {
    return u[std::size_t((a + M) % M) * M + std::size_t((b + M) % M)];
  };
  double fx = 0.5 * (at(best_a + 1, best_b) - at(best_a - 1, best_b));
  double fy = 0.5 * (at(best_a, best_b + 1) - at(best_a, best_b - 1));
  double fxx = at(best_a + 1, best_b) - 2.0 * best + at(best_a - 1, best_b);
  double fyy = at(best_a, best_b + 1) - 2.0 * best + at(best_a, best_b - 1);
  double fxy = 0.25 * (at(best_a + 1, best_b + 1) - at(best_a + 1, best_b - 1) -
                       at(best_a - 1, best_b + 1) + at(best_a - 1, best_b - 1));
  double det = fxx * fyy - fxy * fxy;
  double da = 0.0, db = 0.0;
  if (det != 0.0) {
    da = -(fyy * fx - fxy * fy) / det;
    db = -(fxx * fy - fxy * fx) / det;
  }
  da = std::clamp(da, -0.75, 0.75);
  db = std::clamp(db, -0.75, 0.75);
  return f.dom.from_frac((best_a + da) / double(M), (best_b + db) / double(M));
}

}  // namespace lvb
