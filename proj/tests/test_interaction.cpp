// Interaction quantities: D/L matrices, log coefficients, and case labels.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "lvb/interaction.hpp"

using namespace lvb;
using Catch::Matchers::ContainsSubstring;

namespace {

CouplingMatrix scalar_coupling() {
  Eigen::MatrixXd a(1, 1);
  a << 1.0;
  return CouplingMatrix(a);
}

ReducedEnergyModel one_component_model(std::vector<CoefficientField> h, int N) {
  CouplingMatrix A = scalar_coupling();
  GreenEvaluator green(TorusDomain::square());
  return ReducedEnergyModel(A, green, std::move(h), N, gamma_ray_sigma(A, {1.0}));
}

// Configuration record for models whose stationarity field vanishes
// identically (h constant); only centers and the H table are meaningful.
CriticalConfiguration manual_config(const ReducedEnergyModel& model, std::vector<Vec2> pts) {
  CriticalConfiguration c;
  c.centers = pts;
  c.H = h_table(model, pts);
  return c;
}

}  // namespace

TEST_CASE("L closed forms and finite-difference cross-check") {
  CouplingMatrix A = scalar_coupling();
  RadialProfile prof = solve_radial(A, {4.0});

  // Constant coefficient, one center: L = (0 + 0 + 8 pi) e^I with e^I = 8.
  ReducedEnergyModel m1 = one_component_model({CoefficientField::one()}, 1);
  Eigen::MatrixXd L1 = compute_L(m1, {Vec2{0.3, 0.4}}, prof);
  CHECK(std::abs(L1(0, 0) - 64.0 * pi) < 64.0 * pi * 1e-7);

  // Antipodal pair: gradient term vanishes by symmetry, L = 16 pi e^I.
  ReducedEnergyModel m2 = one_component_model({CoefficientField::one()}, 2);
  std::vector<Vec2> anti = {Vec2{0.1, 0.2}, Vec2{0.6, 0.7}};
  Eigen::MatrixXd L2 = compute_L(m2, anti, prof);
  CHECK(std::abs(L2(0, 0) - 128.0 * pi) < 128.0 * pi * 1e-7);
  CHECK(std::abs(L2(0, 1) - 128.0 * pi) < 128.0 * pi * 1e-7);

  // Generic coefficient at generic centers: rebuild L from finite differences
  // of h values and the Green gradient alone.
  TorusDomain dom = TorusDomain::square();
  CoefficientField h(TrigPoly(dom, 0.0, {{1, 0, 0.3, 0.0}, {0, 1, 0.0, 0.2}}), true);
  ReducedEnergyModel m3 = one_component_model({h}, 2);
  std::vector<Vec2> pts = {Vec2{0.13, 0.27}, Vec2{0.55, 0.83}};
  Eigen::MatrixXd L3 = compute_L(m3, pts, prof);
  double eI = std::exp(prof.I[0]);
  for (int t = 0; t < 2; ++t) {
    Vec2 p = pts[size_t(t)];
    double dg = 1e-5, dl = 3e-4;
    auto hv = [&](Vec2 x) { return h.value(x); };
    Vec2 grad_fd{(hv(p + Vec2{dg, 0}) - hv(p - Vec2{dg, 0})) / (2 * dg),
                 (hv(p + Vec2{0, dg}) - hv(p - Vec2{0, dg})) / (2 * dg)};
    double lap_fd = (hv(p + Vec2{dl, 0}) + hv(p - Vec2{dl, 0}) + hv(p + Vec2{0, dl}) +
                     hv(p - Vec2{0, dl}) - 4.0 * hv(p)) /
                    (dl * dl);
    Vec2 g = m3.green.grad(p, pts[size_t(1 - t)]);
    double Lfd = (norm2((1.0 / hv(p)) * grad_fd + 8.0 * pi * g) + lap_fd / hv(p) + 16.0 * pi) * eI;
    CHECK(std::abs(L3(0, t) - Lfd) < 1e-6 * std::abs(Lfd));
  }
}

TEST_CASE("single-bubble D: log coefficient, stability, translation invariance") {
  CouplingMatrix A = scalar_coupling();
  RadialProfile prof = solve_radial(A, {4.0});
  ReducedEnergyModel model = one_component_model({CoefficientField::one()}, 1);
  TorusDomain dom = model.green.dom;

  auto run_at = [&](Vec2 p) {
    CriticalConfiguration cfg = manual_config(model, {p});
    VoronoiPartition part = voronoi_partition(dom, cfg.centers, {0.01});
    return compute_D(model, cfg, part, prof);
  };
  DResult a = run_at(Vec2{0.25, 0.5});
  DResult b = run_at(Vec2{0.1, 0.8});

  INFO("D = " << a.D(0, 0) << " +- " << a.err(0, 0) << ", kappa = " << a.kappa(0, 0));
  // Log coefficient kappa = 4 pi^2 e^I = 32 pi^2 (trace of the center
  // curvature of the regular Green part is 1 on any unit-area torus).
  CHECK(std::abs(a.D(0, 0) - 34.8445159) < 0.05);  // frozen two-level reference
  CHECK(std::abs(a.kappa(0, 0) - 32.0 * pi * pi) < 32.0 * pi * pi * 1e-3);
  CHECK(a.err(0, 0) < 1e-3 * std::max(1.0, std::abs(a.D(0, 0))));
  // The coefficient is constant, so D cannot depend on where the bubble sits.
  CHECK(std::abs(a.D(0, 0) - b.D(0, 0)) < 2.0 * (a.err(0, 0) + b.err(0, 0)) + 1e-12);
}

TEST_CASE("equal masses give component-independent D") {
  Eigen::MatrixXd a2(2, 2);
  a2 << 1.0, 0.5, 0.5, 1.0;
  CouplingMatrix A(a2);
  std::vector<double> sigma = gamma_ray_sigma(A, {1.0, 1.0});  // both masses 4
  RadialProfile prof = solve_radial(A, sigma);
  REQUIRE(std::abs(prof.m[0] - 4.0) < 1e-8);
  REQUIRE(std::abs(prof.I[0] - prof.I[1]) < 1e-9);

  GreenEvaluator green(TorusDomain::square());
  ReducedEnergyModel model(A, green, {CoefficientField::one(), CoefficientField::one()}, 1, sigma);
  CriticalConfiguration cfg = manual_config(model, {Vec2{0.37, 0.62}});
  VoronoiPartition part = voronoi_partition(green.dom, cfg.centers, {0.01});
  DResult d = compute_D(model, cfg, part, prof);

  CHECK(std::abs(d.D(0, 0) - d.D(1, 0)) < 1e-8 * std::max(1.0, std::abs(d.D(0, 0))));
  double kap = 4.0 * pi * pi * std::exp(prof.I[0]);  // e^I = 16/3
  CHECK(std::abs(d.kappa(0, 0) - kap) < kap * 1e-3);
  CHECK(std::abs(d.kappa(1, 0) - kap) < kap * 1e-3);
}

TEST_CASE("integrand decay matches the mass exponent") {
  // (E - 1) ~ r^2 near the center, so the D integrand scales like r^{2 - m^}.
  GreenEvaluator green(TorusDomain::square());
  Vec2 p{0.3, 0.3};
  double g0 = green.robin(p);
  auto ring_avg = [&](double r) {
    double acc = 0.0;
    for (int k = 0; k < 64; ++k) {
      double th = 2.0 * pi * (k + 0.5) / 64.0;
      Vec2 x = p + Vec2{r * std::cos(th), r * std::sin(th)};
      acc += std::abs(std::expm1(8.0 * pi * (green.regular(x, p) - g0)));
    }
    return acc / 64.0;
  };
  double slope = std::log(ring_avg(1e-3) / ring_avg(1e-4)) / std::log(10.0);
  CHECK(std::abs(slope - 2.0) < 0.05);
}

TEST_CASE("case classification across the three regimes") {
  TorusDomain dom = TorusDomain::square();

  SECTION("critical-L: constant coefficient single bubble") {
    CouplingMatrix A = scalar_coupling();
    RadialProfile prof = solve_radial(A, {4.0});
    ReducedEnergyModel model = one_component_model({CoefficientField::one()}, 1);
    CriticalConfiguration cfg = manual_config(model, {Vec2{0.25, 0.5}});
    VoronoiPartition part = voronoi_partition(dom, cfg.centers, {0.01});
    QuantityReport r = make_quantity_report(model, cfg, part, prof);
    REQUIRE(r.is_four);
    double expect = std::exp(2.0 * cfg.H(0, 0)) * 64.0 * pi;
    CHECK(std::abs(r.L_sum - expect) < 1e-6 * expect);
    CHECK(classify_case(r) == CaseLabel::CriticalL);
    CHECK(std::string(case_label_name(r.label)) == "critical-L");
  }

  SECTION("subcritical-D: distinct masses, smallest below four") {
    Eigen::MatrixXd a2(2, 2);
    a2 << 2.0, 1.0, 1.0, 2.0;
    CouplingMatrix A(a2);
    std::vector<double> sigma = gamma_ray_sigma(A, {1.0, 2.0});  // masses 24/7, 30/7
    RadialProfile prof = solve_radial(A, sigma);
    GreenEvaluator green(dom);
    ReducedEnergyModel model(A, green, {CoefficientField::one(), CoefficientField::one()}, 1,
                             sigma);
    REQUIRE(std::abs(model.m_hat() - 24.0 / 7.0) < 1e-12);
    CriticalConfiguration cfg = manual_config(model, {Vec2{0.5, 0.5}});
    VoronoiPartition part = voronoi_partition(dom, cfg.centers, {0.01});
    QuantityReport r = make_quantity_report(model, cfg, part, prof);
    REQUIRE_FALSE(r.is_four);
    CHECK(r.I_hat == std::vector<int>{0});
    CHECK(std::isfinite(r.D(0, 0)));
    CHECK(std::isnan(r.D(1, 0)));
    INFO("D(0,0) = " << r.D(0, 0) << " +- " << r.D_err(0, 0));
    CHECK(r.D(0, 0) > 0.0);  // regular Green part has its minimum at the center
    CHECK(std::abs(r.D(0, 0) - 108.7778852) < 0.01);   // frozen two-level reference
    CHECK(std::abs(r.D_sum - 1.2165905) < 1e-3);
    CHECK(classify_case(r) == CaseLabel::SubcriticalD);
    CHECK(std::string(case_label_name(r.label)) == "subcritical-D");
  }

  SECTION("critical-L-zero-D: concave coefficient tuned to cancel L") {
    // h = exp((cos + cos)/pi) has lap ln h = -8 pi at its maximum, which
    // cancels the 8 N pi term exactly; kappa vanishes there as well.
    CoefficientField h(TrigPoly(dom, 0.0, {{1, 0, 1.0 / pi, 0.0}, {0, 1, 1.0 / pi, 0.0}}), true);
    ReducedEnergyModel model = one_component_model({h}, 1);
    CouplingMatrix A = scalar_coupling();
    RadialProfile prof = solve_radial(A, {4.0});
    CriticalConfiguration cfg = find_critical_point(model, {Vec2{0.03, 0.94}});
    CHECK(dom.dist(cfg.centers[0], Vec2{0.0, 0.0}) < 1e-7);
    VoronoiPartition part = voronoi_partition(dom, cfg.centers, {0.01});
    QuantityReport r = make_quantity_report(model, cfg, part, prof);
    REQUIRE(r.is_four);
    CHECK(std::abs(r.L_sum) <= 10.0 * r.L_sum_err);
    CHECK(std::abs(r.kappa(0, 0)) < 1e-3);
    INFO("D(0,0) = " << r.D(0, 0) << " +- " << r.D_err(0, 0));
    CHECK(std::abs(r.D(0, 0) - 118.8719297) < 0.02);  // frozen two-level reference
    CHECK(classify_case(r) == CaseLabel::CriticalLZeroD);
    CHECK(std::string(case_label_name(r.label)) == "critical-L-zero-D");
  }

  SECTION("sums inside their error bars are inconclusive") {
    QuantityReport r;
    r.is_four = false;
    r.D_sum = 1e-6;
    r.D_sum_err = 1e-6;
    CHECK_THROWS_WITH(classify_case(r), ContainsSubstring("inconclusive"));
    r.is_four = true;
    r.L_sum = 1e-9;
    r.L_sum_err = 1e-9;
    CHECK_THROWS_WITH(classify_case(r), ContainsSubstring("inconclusive"));
  }
}

TEST_CASE("two antipodal bubbles: cell-boundary quadrature") {
  CouplingMatrix A = scalar_coupling();
  RadialProfile prof = solve_radial(A, {4.0});
  ReducedEnergyModel model = one_component_model({CoefficientField::one()}, 2);
  TorusDomain dom = model.green.dom;
  CriticalConfiguration cfg = find_critical_point(model, {Vec2{0.13, 0.22}, Vec2{0.57, 0.81}});
  VoronoiPartition part = voronoi_partition(dom, cfg.centers, {0.02, 0.02});
  QuantityReport r = make_quantity_report(model, cfg, part, prof);

  // kappa = (pi/2) e^I 2 pi m^ (tr center curvature + tr hess G at the other
  // center) = 64 pi^2: both traces equal 1 for the antipodal square layout.
  double kap = 64.0 * pi * pi;
  CHECK(std::abs(r.kappa(0, 0) - kap) < kap * 2e-3);
  CHECK(std::abs(r.kappa(0, 1) - kap) < kap * 2e-3);
  // Swapping the two bubbles is a symmetry of the configuration.
  CHECK(std::abs(r.D(0, 0) - r.D(0, 1)) < 2.0 * (r.D_err(0, 0) + r.D_err(0, 1)) + 1e-12);
  CHECK(r.D_err(0, 0) < 1e-2);
  CHECK(std::abs(r.D(0, 0) + 231.4881908) < 0.05);  // frozen two-level reference
  INFO("D = " << r.D(0, 0) << " +- " << r.D_err(0, 0));
  CHECK(classify_case(r) == CaseLabel::CriticalL);
}

TEST_CASE("partition and configuration guards") {
  TorusDomain dom = TorusDomain::square();
  CHECK_THROWS_WITH(voronoi_partition(dom, {Vec2{0.0, 0.0}, Vec2{0.05, 0.0}}, {0.02, 0.02}),
                    ContainsSubstring("too close"));
  CHECK_THROWS_WITH(voronoi_partition(dom, {Vec2{0.2, 0.2}}, {0.0}),
                    ContainsSubstring("positive"));

  CouplingMatrix A = scalar_coupling();
  RadialProfile prof = solve_radial(A, {4.0});
  ReducedEnergyModel model = one_component_model({CoefficientField::one()}, 2);
  std::vector<Vec2> anti = {Vec2{0.1, 0.2}, Vec2{0.6, 0.7}};
  CriticalConfiguration cfg = manual_config(model, anti);

  VoronoiPartition part = voronoi_partition(dom, anti, {0.05, 0.05});
  part.delta[0] = 0.2;  // 3 delta ball now crosses the bisector
  CHECK_THROWS_WITH(compute_D(model, cfg, part, prof),
                    ContainsSubstring("partition violation"));

  VoronoiPartition moved = voronoi_partition(dom, {Vec2{0.1, 0.25}, Vec2{0.6, 0.7}}, {0.05, 0.05});
  CHECK_THROWS_WITH(compute_D(model, cfg, moved, prof),
                    ContainsSubstring("differ from configuration centers"));
}
