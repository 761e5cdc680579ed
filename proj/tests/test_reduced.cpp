// Reduced-energy functional: H table closed forms, gradient consistency
// against finite differences, critical-point certification, and validation.
#include <cmath>
#include <random>

#include <catch2/catch_amalgamated.hpp>

#include "lvb/reduced_energy.hpp"

using namespace lvb;
using Catch::Matchers::ContainsSubstring;

namespace {

Eigen::MatrixXd mat1(double a) {
  Eigen::MatrixXd m(1, 1);
  m << a;
  return m;
}

Eigen::MatrixXd mat2(double a, double b, double c, double d) {
  Eigen::MatrixXd m(2, 2);
  m << a, b, c, d;
  return m;
}

TorusDomain square() { return TorusDomain(Vec2{1, 0}, Vec2{0, 1}); }

double stack_norm(const std::vector<Vec2>& f) {
  double acc = 0.0;
  for (const Vec2& v : f) acc += norm2(v);
  return std::sqrt(acc);
}

}  // namespace

TEST_CASE("h table closed forms") {
  TorusDomain dom = square();
  GreenEvaluator g(dom);
  CouplingMatrix A(mat1(1.0));

  ReducedEnergyModel one(A, g, {CoefficientField::one()}, 1, {4.0});
  std::vector<Vec2> p{Vec2{0.3, 0.7}};
  Eigen::MatrixXd H = h_table(one, p);
  // Empty Green sum and vanishing log leave H = (2 pi m/(m-2)) gamma(p,p).
  CHECK(std::abs(H(0, 0) - 2.0 * pi * 4.0 / 2.0 * g.robin(p[0])) < 1e-12);
  CHECK(compat_residual(H) == 0.0);

  ReducedEnergyModel two(A, g, {CoefficientField::one()}, 2, {4.0});
  std::vector<Vec2> q{Vec2{0.1, 0.2}, Vec2{0.6, 0.7}};
  Eigen::MatrixXd H2 = h_table(two, q);
  CHECK(std::abs(H2(0, 0) - H2(0, 1)) < 1e-9);  // antipodal symmetry
  CHECK(compat_residual(H2) < 1e-12);

  CHECK_THROWS_AS(h_table(two, {Vec2{0.1, 0.2}, Vec2{0.1, 0.2}}), config_error);
}

TEST_CASE("reduced energy invariances") {
  TorusDomain dom = square();
  GreenEvaluator g(dom);
  CouplingMatrix A(mat1(1.0));

  ReducedEnergyModel one(A, g, {CoefficientField::one()}, 1, {4.0});
  double f0 = reduced_energy(one, {Vec2{0.12, 0.95}});
  double f1 = reduced_energy(one, {Vec2{0.71, 0.33}});
  CHECK(std::abs(f0 - f1) < 1e-9);  // gamma(p,p) constant on a flat torus

  ReducedEnergyModel two(A, g, {CoefficientField::one()}, 2, {4.0});
  std::vector<Vec2> p{Vec2{0.15, 0.25}, Vec2{0.45, 0.85}};
  std::vector<Vec2> shifted{p[0] + dom.e1, p[1] + dom.e1};
  CHECK(std::abs(reduced_energy(two, p) - reduced_energy(two, shifted)) < 1e-10);

  // At the antipodal offset the gradient of F vanishes.
  std::vector<Vec2> anti{Vec2{0.2, 0.3}, Vec2{0.7, 0.8}};
  CHECK(stack_norm(gradient(two, anti)) < 1e-7);
}

TEST_CASE("analytic gradient matches finite differences of the energy") {
  CouplingMatrix A(mat2(2.0, 1.0, 1.0, 2.0));
  std::vector<double> sigma = gamma_ray_sigma(A, {1.0, 2.0});

  auto run = [&](const TorusDomain& dom) {
    GreenEvaluator g(dom);
    TrigPoly p1(dom, 1.0, {TrigMode{1, 0, 0.3, 0.0}});
    TrigPoly p2(dom, 0.0, {TrigMode{0, 1, 0.0, 0.25}});
    std::vector<CoefficientField> h{CoefficientField(p1, false), CoefficientField(p2, true)};
    ReducedEnergyModel model(A, g, h, 2, sigma);

    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    int tried = 0;
    for (int cfg = 0; cfg < 20; ++cfg) {
      std::vector<Vec2> pts;
      do {
        pts = {dom.from_frac(uni(rng), uni(rng)), dom.from_frac(uni(rng), uni(rng))};
      } while (dom.dist(pts[0], pts[1]) < 0.1);
      ++tried;

      std::vector<Vec2> grad = gradient(model, pts);
      double h_fd = 1e-5, worst = 0.0, scale = 1.0;
      for (int t = 0; t < 2; ++t)
        for (int j = 0; j < 2; ++j) {
          std::vector<Vec2> lo(pts), hi(pts);
          (j == 0 ? lo[size_t(t)].x : lo[size_t(t)].y) -= h_fd;
          (j == 0 ? hi[size_t(t)].x : hi[size_t(t)].y) += h_fd;
          double fd = (reduced_energy(model, hi) - reduced_energy(model, lo)) / (2.0 * h_fd);
          double an = j == 0 ? grad[size_t(t)].x : grad[size_t(t)].y;
          worst = std::max(worst, std::abs(fd - an));
          scale = std::max(scale, std::abs(an));
        }
      CHECK(worst < 1e-6 * scale);
    }
    REQUIRE(tried == 20);
  };

  run(square());
  run(TorusDomain(Vec2{1.3, 0.1}, Vec2{0.4, 0.9}));
}

TEST_CASE("stationarity field jacobian matches finite differences") {
  TorusDomain dom = square();
  GreenEvaluator g(dom);
  CouplingMatrix A(mat2(2.0, 1.0, 1.0, 2.0));
  std::vector<double> sigma = gamma_ray_sigma(A, {1.0, 2.0});
  TrigPoly p1(dom, 1.0, {TrigMode{1, 0, 0.3, 0.0}});
  TrigPoly p2(dom, 0.0, {TrigMode{0, 1, 0.0, 0.25}});
  std::vector<CoefficientField> h{CoefficientField(p1, false), CoefficientField(p2, true)};
  ReducedEnergyModel model(A, g, h, 2, sigma);

  std::vector<Vec2> pts{Vec2{0.21, 0.37}, Vec2{0.66, 0.91}};
  Eigen::MatrixXd J = se1_jacobian(model, pts);
  double h_fd = 1e-6;
  double scale = std::max(1.0, J.cwiseAbs().maxCoeff());
  for (int s = 0; s < 2; ++s)
    for (int j = 0; j < 2; ++j) {
      std::vector<Vec2> lo(pts), hi(pts);
      (j == 0 ? lo[size_t(s)].x : lo[size_t(s)].y) -= h_fd;
      (j == 0 ? hi[size_t(s)].x : hi[size_t(s)].y) += h_fd;
      std::vector<Vec2> flo = se1_field(model, lo), fhi = se1_field(model, hi);
      for (int t = 0; t < 2; ++t) {
        CHECK(std::abs((fhi[size_t(t)].x - flo[size_t(t)].x) / (2 * h_fd) - J(2 * t, 2 * s + j)) <
              1e-5 * scale);
        CHECK(std::abs((fhi[size_t(t)].y - flo[size_t(t)].y) / (2 * h_fd) - J(2 * t + 1, 2 * s + j)) <
              1e-5 * scale);
      }
    }
}

TEST_CASE("antipodal two-bubble critical point certifies") {
  TorusDomain dom = square();
  GreenEvaluator g(dom);
  CouplingMatrix A(mat1(1.0));
  ReducedEnergyModel model(A, g, {CoefficientField::one()}, 2, {4.0});

  CriticalConfiguration cc =
      find_critical_point(model, {Vec2{0.13, 0.22}, Vec2{0.57, 0.81}});
  CHECK(cc.grad_norm < 1e-10);

  Vec2 offset = dom.wrap(cc.centers[1] - cc.centers[0]);
  CHECK(dom.dist(offset, Vec2{0.5, 0.5}) < 1e-8);

  // Blocks are w hessG(half period) = (w/2) I with w = 2 pi rho* m* = 128 pi^2.
  double expected = 64.0 * pi * pi;
  REQUIRE(cc.eigenvalues.size() == 4);
  for (double l : cc.eigenvalues) CHECK(std::abs(l - expected) < 1e-8 * expected);
  CHECK(cc.compat < 1e-12);
  CHECK(std::abs(cc.H(0, 0) - cc.H(0, 1)) < 1e-9);
}

TEST_CASE("flat configurations report degenerate") {
  TorusDomain dom = square();
  GreenEvaluator g(dom);
  CouplingMatrix A(mat1(1.0));

  // Constant coefficient, one bubble: the field is identically zero.
  ReducedEnergyModel flat(A, g, {CoefficientField::one()}, 1, {4.0});
  CHECK_THROWS_WITH(find_critical_point(flat, {Vec2{0.4, 0.6}}),
                    ContainsSubstring("degenerate"));

  // Coefficient varying in x1 only: a flat direction survives.
  TrigPoly ridge(dom, 0.0, {TrigMode{1, 0, 0.3, 0.0}});
  ReducedEnergyModel rim(A, g, {CoefficientField(ridge, true)}, 1, {4.0});
  CHECK_THROWS_WITH(find_critical_point(rim, {Vec2{0.2, 0.33}}),
                    ContainsSubstring("degenerate"));
}

TEST_CASE("one bubble tracks the coefficient maximum") {
  TorusDomain dom = square();
  GreenEvaluator g(dom);
  CouplingMatrix A(mat1(1.0));
  TrigPoly bump(dom, 1.5, {TrigMode{1, 1, 0.2, 0.0}, TrigMode{1, -1, 0.2, 0.0}});
  CoefficientField h(bump, false);
  ReducedEnergyModel model(A, g, {h}, 1, {4.0});

  // Independent oracle: argmax of h by plain grid scan on values only.
  int M = 512;
  Vec2 best{0, 0};
  double best_v = -1e30;
  for (int a = 0; a < M; ++a)
    for (int b = 0; b < M; ++b) {
      Vec2 x = dom.from_frac(double(a) / M, double(b) / M);
      double v = h.value(x);
      if (v > best_v) {
        best_v = v;
        best = x;
      }
    }

  CriticalConfiguration cc = find_critical_point(model, {Vec2{0.07, -0.04}});
  CHECK(dom.dist(cc.centers[0], best) < 0.01);
  CHECK(norm(h.grad(cc.centers[0])) < 1e-9);
  CHECK(dom.dist(cc.centers[0], Vec2{0.0, 0.0}) < 1e-9);

  // Block Hessian is rho* hess(ln h)(0) = 8 pi (-1.6 pi^2 / 1.9) I.
  double expected = 8.0 * pi * (-1.6 * pi * pi / 1.9);
  for (double l : cc.eigenvalues) CHECK(std::abs(l - expected) < 1e-8 * std::abs(expected));
}

TEST_CASE("model validation") {
  TorusDomain dom = square();
  GreenEvaluator g(dom);
  CouplingMatrix A(mat2(2.0, 1.0, 1.0, 2.0));

  std::vector<CoefficientField> ones{CoefficientField::one(), CoefficientField::one()};
  // sigma off the critical surface.
  CHECK_THROWS_AS(ReducedEnergyModel(A, g, ones, 1, {1.0, 1.0}), config_error);
  // Mass exponent below 2.
  CHECK_THROWS_AS(ReducedEnergyModel(A, g, ones, 1, {0.1, 0.2}), config_error);
  // Coefficient function dipping negative.
  TrigPoly bad(dom, 0.1, {TrigMode{1, 0, 0.5, 0.0}});
  std::vector<CoefficientField> badh{CoefficientField(bad, false), CoefficientField::one()};
  std::vector<double> sigma = gamma_ray_sigma(A, {1.0, 2.0});
  CHECK_THROWS_AS(ReducedEnergyModel(A, g, badh, 1, sigma), config_error);
  CHECK_NOTHROW(ReducedEnergyModel(A, g, ones, 1, sigma));
}
