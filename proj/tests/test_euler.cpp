#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "kbub/euler.hpp"

using namespace kbub;

namespace {

// Reference values below were evaluated with mpmath at 40 significant digits.
constexpr double kHalfBasePressure = 37892.91416275995205868;  // 1e5 * 0.5^1.4
constexpr double kRho1Theta300Pressure = 81116.71008001033157;  // 1e5 * 0.86115^1.4
constexpr double kSurfaceRho = 1.149171578010521412758;         // p0 / (R_d * 303.15)
constexpr double kExner500 = 0.9838951811710239784869;
constexpr double kPressure500 = 94475.87379748893649677;
constexpr double kRho500 = 1.103460928089568572171;
constexpr double kSoundSpeed30315 = 349.0370904359592555191;    // sqrt(1.4 * 287.05 * 303.15)

State2D mirror_x(const State2D& s, const Grid2D& g) {
  State2D m = s;
  for (int j = 0; j < g.nz; ++j) {
    for (int i = 0; i < g.nx; ++i) {
      const auto src = g.index(g.nx - 1 - i, j);
      const auto dst = g.index(i, j);
      m.rho[dst] = s.rho[src];
      m.rho_u1[dst] = -s.rho_u1[src];
      m.rho_u3[dst] = s.rho_u3[src];
      m.rho_theta[dst] = s.rho_theta[src];
    }
  }
  return m;
}

// Warm blob in pressure balance: rho*theta unchanged, rho = rho*theta / theta.
State2D warm_blob(const Grid2D& g, const PhysConstants& c, double cx, double cz, double amp) {
  State2D s = hydrostatic_background(g, c);
  for (int j = 0; j < g.nz; ++j) {
    for (int i = 0; i < g.nx; ++i) {
      const double dx = g.x_center(i) - cx;
      const double dz = g.z_center(j) - cz;
      const double d = std::sqrt(dx * dx + dz * dz);
      const double tp = amp * std::exp(-(d / 100.0) * (d / 100.0));
      const auto k = g.index(i, j);
      s.rho[k] = s.rho_theta[k] / (c.theta0 + tp);
    }
  }
  return s;
}

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

}  // namespace

TEST_CASE("constants and grid validation") {
  PhysConstants c;
  CHECK_NOTHROW(c.validate());
  PhysConstants bad = c;
  bad.gamma = 1.41;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.c_p = 200.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  Grid2D g{3, 10, 1000.0, 1000.0};
  CHECK_THROWS_AS(g.validate(), ConfigError);
  Grid2D ok{100, 100, 1000.0, 1000.0};
  CHECK(ok.dx() == 10.0);
  CHECK(ok.x_center(0) == 5.0);
  CHECK(ok.z_center(99) == 995.0);
}

TEST_CASE("equation of state") {
  const PhysConstants c;
  CHECK(equation_of_state(c.p0 / c.r_d, c) == doctest::Approx(c.p0).epsilon(1e-15));
  CHECK(rel(equation_of_state(0.5 * c.p0 / c.r_d, c), kHalfBasePressure) < 1e-14);
  CHECK(rel(equation_of_state(1.0 * 300.0, c), kRho1Theta300Pressure) < 1e-14);

  CHECK_THROWS_AS(equation_of_state(0.0, c), DomainError);
  CHECK_THROWS_AS(equation_of_state(-1.0, c), DomainError);
  CHECK_THROWS_AS(equation_of_state(std::numeric_limits<double>::quiet_NaN(), c), DomainError);

  const std::vector<double> field = {300.0, 301.0, -2.0};
  try {
    (void)equation_of_state(field, c);
    FAIL("expected DomainError");
  } catch (const DomainError& e) {
    CHECK(std::string(e.what()).find("element 2") != std::string::npos);
  }

  double prev = 0.0;
  for (double rt = 1.0; rt < 1000.0; rt *= 1.37) {
    const double p = equation_of_state(rt, c);
    CHECK(p > prev);
    prev = p;
  }
}

TEST_CASE("isentropic background profile") {
  const PhysConstants c;
  const auto surface = isentropic_profile(0.0, c);
  CHECK(surface.exner == 1.0);
  CHECK(surface.pressure == c.p0);
  CHECK(rel(surface.rho, kSurfaceRho) < 1e-15);

  const auto p500 = isentropic_profile(500.0, c);
  CHECK(rel(p500.exner, kExner500) < 1e-15);
  CHECK(rel(p500.pressure, kPressure500) < 1e-13);
  CHECK(rel(p500.rho, kRho500) < 1e-13);

  const Grid2D g{10, 10, 1000.0, 1000.0};
  const State2D s = hydrostatic_background(g, c);
  for (std::size_t k = 0; k < g.cells(); ++k) {
    CHECK(s.rho_u1[k] == 0.0);
    CHECK(s.rho_u3[k] == 0.0);
    CHECK(s.rho_theta[k] / s.rho[k] == doctest::Approx(c.theta0).epsilon(1e-14));
  }
  // the pressure implied by rho*theta matches the closed-form profile
  const double p_cell = equation_of_state(s.rho_theta[g.index(3, 4)], c);
  CHECK(rel(p_cell, isentropic_profile(g.z_center(4), c).pressure) < 1e-12);

  const Grid2D too_tall{8, 8, 1000.0, 40000.0};
  CHECK_THROWS_AS(hydrostatic_background(too_tall, c), ConfigError);
}

TEST_CASE("hydrostatic background has zero tendency") {
  const PhysConstants c;
  const Grid2D g{16, 24, 1000.0, 1000.0};
  const EulerSolver solver(g, c);
  const Tendency t = solver.compute_rhs(hydrostatic_background(g, c));
  for (std::size_t k = 0; k < g.cells(); ++k) {
    CHECK(t.d_rho[k] == 0.0);
    CHECK(t.d_rho_u1[k] == 0.0);
    CHECK(t.d_rho_u3[k] == 0.0);
    CHECK(t.d_rho_theta[k] == 0.0);
  }
}

TEST_CASE("tendency commutes with the x1 mirror exactly") {
  const PhysConstants c;
  const Grid2D g{12, 10, 1000.0, 1000.0};
  const EulerSolver solver(g, c);
  State2D s = warm_blob(g, c, 380.0, 300.0, 0.5);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (std::size_t k = 0; k < g.cells(); ++k) {
    s.rho_u1[k] = u(rng);
    s.rho_u3[k] = u(rng);
  }
  const Tendency t = solver.compute_rhs(s);
  const Tendency tm = solver.compute_rhs(mirror_x(s, g));
  for (int j = 0; j < g.nz; ++j) {
    for (int i = 0; i < g.nx; ++i) {
      const auto a = g.index(i, j);
      const auto b = g.index(g.nx - 1 - i, j);
      CHECK(tm.d_rho[a] == t.d_rho[b]);
      CHECK(tm.d_rho_u1[a] == -t.d_rho_u1[b]);
      CHECK(tm.d_rho_u3[a] == t.d_rho_u3[b]);
      CHECK(tm.d_rho_theta[a] == t.d_rho_theta[b]);
    }
  }
}

TEST_CASE("uniform flow on a periodic 4x4 grid has zero tendency") {
  // Hand computation: with rho, theta, u1 = c uniform and u3 = 0, every x1
  // face flux is (rho c, rho c^2, 0, rho theta c) and every x3 face flux is
  // (0, 0, p', 0) with p' = 0 against a reference equal to the state; jumps
  // vanish, so each flux difference is zero.
  const PhysConstants c;
  const Grid2D g{4, 4, 400.0, 400.0};
  State2D s = State2D::zeros(g);
  const double rho = 1.2;
  const double theta = 300.0;
  const double u = 7.5;
  for (std::size_t k = 0; k < g.cells(); ++k) {
    s.rho[k] = rho;
    s.rho_u1[k] = rho * u;
    s.rho_theta[k] = rho * theta;
  }
  const EulerSolver solver(g, c, ReferenceProfile::from_state(s, g, c), XBoundary::periodic);
  const Tendency t = solver.compute_rhs(s);
  for (std::size_t k = 0; k < g.cells(); ++k) {
    CHECK(std::abs(t.d_rho[k]) < 1e-13);
    CHECK(std::abs(t.d_rho_u1[k]) < 1e-12);
    CHECK(std::abs(t.d_rho_u3[k]) < 1e-12);
    CHECK(std::abs(t.d_rho_theta[k]) < 1e-10);
  }
}

TEST_CASE("max wavespeed") {
  const PhysConstants c;
  const Grid2D g{4, 4, 100.0, 100.0};
  State2D s = State2D::zeros(g);
  const double rho = c.p0 / (c.r_d * 303.15);
  for (std::size_t k = 0; k < g.cells(); ++k) {
    s.rho[k] = rho;
    s.rho_theta[k] = rho * 303.15;
  }
  const double c0 = max_wavespeed(s, c);
  CHECK(rel(c0, kSoundSpeed30315) < 1e-13);

  State2D moving = s;
  for (std::size_t k = 0; k < g.cells(); ++k) moving.rho_u1[k] = rho * 10.0;
  CHECK(max_wavespeed(moving, c) == doctest::Approx(c0 + 10.0).epsilon(1e-14));

  // doubling p at fixed rho: rho*theta scales by 2^(1/gamma)
  State2D hot = s;
  for (auto& v : hot.rho_theta) v *= std::pow(2.0, 1.0 / c.gamma);
  CHECK(max_wavespeed(hot, c) == doctest::Approx(c0 * std::sqrt(2.0)).epsilon(1e-13));

  State2D broken = s;
  broken.rho_u3[5] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(max_wavespeed(broken, c), StabilityError);
}

TEST_CASE("ssprk3 step properties") {
  const PhysConstants c;
  const Grid2D g{20, 20, 1000.0, 1000.0};
  const EulerSolver solver(g, c);

  State2D s = warm_blob(g, c, 500.0, 250.0, 0.5);
  s.rho_u1[17] = -0.0;  // signed zero survives dt = 0
  const State2D same = solver.step_ssprk3(s, 0.0);
  CHECK(same == s);
  CHECK(std::signbit(same.rho_u1[17]));

  const State2D bg = hydrostatic_background(g, c);
  const State2D bg1 = solver.step_ssprk3(bg, 0.1);
  for (std::size_t k = 0; k < g.cells(); ++k) {
    CHECK(bg1.rho_u1[k] == 0.0);
    CHECK(bg1.rho_u3[k] == 0.0);
  }

  State2D cur = s;
  for (int n = 0; n < 10; ++n) {
    const State2D next = solver.step_ssprk3(cur, 0.1);
    CHECK(rel(total_mass(next, g), total_mass(cur, g)) < 1e-13);
    CHECK(next.time == doctest::Approx(cur.time + 0.1));
    cur = next;
  }
}

TEST_CASE("warm perturbation drives upward momentum") {
  const PhysConstants c;
  const Grid2D g{32, 32, 1000.0, 1000.0};
  const EulerSolver solver(g, c);
  const State2D s = warm_blob(g, c, 500.0, 300.0, 0.5);
  const Tendency t = solver.compute_rhs(s);
  double net = 0.0;
  for (int j = 0; j < g.nz; ++j) {
    for (int i = 0; i < g.nx; ++i) {
      const double dx = g.x_center(i) - 500.0;
      const double dz = g.z_center(j) - 300.0;
      if (dx * dx + dz * dz < 100.0 * 100.0) net += t.d_rho_u3[g.index(i, j)];
    }
  }
  CHECK(net > 0.0);
}

TEST_CASE("advance over an output interval") {
  const PhysConstants c;
  const Grid2D g{100, 100, 1000.0, 1000.0};
  const EulerSolver solver(g, c);
  const State2D bg = hydrostatic_background(g, c);

  // internal dt = 0.4 * 10 / c_bottom with c_bottom = 349.00898340873691 m/s
  // (mpmath), so ceil(5 / dt) = 437 substeps
  int substeps = 0;
  const State2D out = solver.advance_output_interval(bg, 5.0, 0.4, &substeps);
  CHECK(substeps == 437);
  CHECK(out.time == 5.0);

  const Grid2D small{16, 16, 1000.0, 1000.0};
  const EulerSolver s16(small, c);
  const State2D blob = warm_blob(small, c, 500.0, 300.0, 0.5);
  const State2D a = s16.advance_output_interval(s16.advance_output_interval(blob, 5.0, 0.4), 5.0, 0.4);
  const State2D b = s16.advance_output_interval(blob, 10.0, 0.4);
  CHECK(a.time == 10.0);
  CHECK(b.time == 10.0);
  for (std::size_t k = 0; k < small.cells(); ++k) {
    CHECK(a.rho_theta[k] == doctest::Approx(b.rho_theta[k]).epsilon(1e-7));
  }

  CHECK_THROWS_AS(s16.advance_output_interval(blob, 0.0, 0.4), ConfigError);
  CHECK_THROWS_AS(s16.advance_output_interval(blob, 5.0, 1.5), ConfigError);
}

TEST_CASE("stability failures carry time and the last admissible state") {
  const PhysConstants c;
  const Grid2D g{8, 8, 1000.0, 1000.0};
  const EulerSolver solver(g, c);
  State2D s = hydrostatic_background(g, c);
  s.time = 12.5;
  s.rho[9] = -1.0;
  try {
    (void)solver.compute_rhs(s);
    FAIL("expected StabilityError");
  } catch (const StabilityError& e) {
    CHECK(e.time() == 12.5);
    CHECK(std::string(e.what()).find("i=1, j=1") != std::string::npos);
  }

  // Momentum near the overflow threshold produces non-finite fluxes.
  State2D kicked = hydrostatic_background(g, c);
  kicked.rho_u1[g.index(3, 3)] = 1e200;
  try {
    (void)solver.advance_output_interval(kicked, 5.0, 1.0);
    FAIL("expected StabilityError");
  } catch (const StabilityError& e) {
    REQUIRE(e.last_state().has_value());
    CHECK(e.last_state()->time < 5.0);
    for (double r : e.last_state()->rho) CHECK(std::isfinite(r));
  }
}
