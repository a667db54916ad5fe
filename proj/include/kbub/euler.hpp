#pragma once

// Two-dimensional non-hydrostatic Euler equations in flux form for the
// conserved variables (rho, rho*u1, rho*u3, rho*theta) on a uniform grid.
//
// Spatial discretization: cell-centered finite volume, piecewise-linear
// (MC-limited) reconstruction of the perturbation from a hydrostatic
// reference profile, Rusanov (local Lax-Friedrichs) interface fluxes.
// Time stepping: three-stage SSP Runge-Kutta under a CFL constraint.
//
// Field storage is row-major with shape (nz, nx): index = j * nx + i, where
// j counts cells upward from the bottom wall and i counts cells in x1.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kbub/error.hpp"

namespace kbub {

struct PhysConstants {
  double g = 9.81;          // m/s^2
  double r_d = 287.05;      // J/(kg K)
  double gamma = 1.4;       // c_p / c_v
  double p0 = 100000.0;     // Pa
  double c_p = 1004.675;    // J/(kg K)
  double theta0 = 303.15;   // K, background potential temperature

  // Throws ConfigError when an invariant is violated.
  void validate() const;
};

struct Grid2D {
  int nx = 100;
  int nz = 100;
  double lx = 1000.0;  // m
  double lz = 1000.0;  // m

  double dx() const { return lx / nx; }
  double dz() const { return lz / nz; }
  double x_center(int i) const { return (i + 0.5) * dx(); }
  double z_center(int j) const { return (j + 0.5) * dz(); }
  std::size_t cells() const { return static_cast<std::size_t>(nx) * static_cast<std::size_t>(nz); }
  std::size_t index(int i, int j) const {
    return static_cast<std::size_t>(j) * static_cast<std::size_t>(nx) + static_cast<std::size_t>(i);
  }

  void validate() const;
  bool operator==(const Grid2D&) const = default;
};

using Field = std::vector<double>;

struct State2D {
  Field rho;
  Field rho_u1;
  Field rho_u3;
  Field rho_theta;
  double time = 0.0;

  static State2D zeros(const Grid2D& grid);
  std::size_t cells() const { return rho.size(); }
  bool operator==(const State2D&) const = default;
};

struct Tendency {
  Field d_rho;
  Field d_rho_u1;
  Field d_rho_u3;
  Field d_rho_theta;
};

// Raised when the solution leaves the admissible set (non-positive density
// or rho*theta, non-finite values). Carries the simulation time at which the
// failure was detected and, when available, the last admissible state.
class StabilityError : public NumericalError {
 public:
  StabilityError(const std::string& what, double time, std::optional<State2D> last_state = std::nullopt)
      : NumericalError(what), time_(time), last_state_(std::move(last_state)) {}

  double time() const { return time_; }
  const std::optional<State2D>& last_state() const { return last_state_; }

 private:
  double time_;
  std::optional<State2D> last_state_;
};

// p = p0 * (R_d * rho_theta / p0)^gamma.
double equation_of_state(double rho_theta, const PhysConstants& consts);
Field equation_of_state(std::span<const double> rho_theta, const PhysConstants& consts);

// Closed-form isentropic hydrostatic atmosphere with uniform theta0.
struct IsentropicPoint {
  double exner;     // 1 - g z / (c_p theta0)
  double pressure;  // p0 * exner^(c_p / R_d)
  double rho;       // p / (R_d theta0 exner)
};
IsentropicPoint isentropic_profile(double z, const PhysConstants& consts);

// Motionless state with uniform theta0 and the isentropic density profile at
// cell centers. Throws ConfigError when the domain reaches the height where
// the Exner function vanishes.
State2D hydrostatic_background(const Grid2D& grid, const PhysConstants& consts);

// Row-wise reference state subtracted before reconstruction and from the
// gravity source. The discrete scheme leaves this state exactly steady.
struct ReferenceProfile {
  std::vector<double> rho;        // per row j
  std::vector<double> rho_theta;  // per row j
  std::vector<double> pressure;   // per row j, equation_of_state(rho_theta)

  static ReferenceProfile hydrostatic(const Grid2D& grid, const PhysConstants& consts);
  // Takes row values from column 0 of `state`.
  static ReferenceProfile from_state(const State2D& state, const Grid2D& grid, const PhysConstants& consts);
};

enum class XBoundary { reflective, periodic };

// max over cells of max(|u1| + c, |u3| + c), c = sqrt(gamma p / rho).
double max_wavespeed(const State2D& state, const PhysConstants& consts);

// Total mass sum(rho) * dx * dz.
double total_mass(const State2D& state, const Grid2D& grid);

class EulerSolver {
 public:
  EulerSolver(Grid2D grid, PhysConstants consts, XBoundary x_boundary = XBoundary::reflective);
  EulerSolver(Grid2D grid, PhysConstants consts, ReferenceProfile reference,
              XBoundary x_boundary = XBoundary::reflective);

  const Grid2D& grid() const { return grid_; }
  const PhysConstants& constants() const { return consts_; }
  const ReferenceProfile& reference() const { return reference_; }

  // Negated flux divergence plus the gravity source.
  Tendency compute_rhs(const State2D& state) const;

  State2D step_ssprk3(const State2D& state, double dt) const;

  // Substeps with dt = min(remaining, cfl * min(dx, dz) / max_wavespeed) until
  // exactly `interval` seconds have elapsed. On failure throws StabilityError
  // holding the last admissible state.
  State2D advance_output_interval(const State2D& state, double interval, double cfl,
                                  int* substeps = nullptr) const;

 private:
  void check_shape(const State2D& state) const;

  Grid2D grid_;
  PhysConstants consts_;
  ReferenceProfile reference_;
  XBoundary x_boundary_;
};

}  // namespace kbub
