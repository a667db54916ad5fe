#include "kbub/euler.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>

namespace kbub {

namespace {

constexpr int kVars = 5;  // rho', rho_u1, rho_u3, rho_theta', p'

// Monotonized-central limiter. Symmetric in its arguments and odd, so a
// mirrored field produces exactly mirrored slopes.
inline double mc_limiter(double left, double right) {
  if (left * right <= 0.0) return 0.0;
  const double mag = std::min({0.5 * std::abs(left + right), 2.0 * std::abs(left), 2.0 * std::abs(right)});
  return left > 0.0 ? mag : -mag;
}

struct Face {
  std::array<double, kVars> q;
};

std::string cell_label(std::size_t idx, int nx) {
  std::ostringstream os;
  os << "cell (i=" << (idx % static_cast<std::size_t>(nx)) << ", j=" << (idx / static_cast<std::size_t>(nx)) << ")";
  return os.str();
}

// Index of the first inadmissible cell, or cells() when all are admissible.
std::size_t first_bad_cell(const State2D& s) {
  const std::size_t n = s.cells();
  for (std::size_t k = 0; k < n; ++k) {
    const double r = s.rho[k];
    const double rt = s.rho_theta[k];
    if (!(r > 0.0) || !(rt > 0.0) || !std::isfinite(r) || !std::isfinite(rt) || !std::isfinite(s.rho_u1[k]) ||
        !std::isfinite(s.rho_u3[k])) {
      return k;
    }
  }
  return n;
}

// a + scale * b, elementwise
void axpy_into(Field& out, const Field& a, double scale, const Field& b) {
  out.resize(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] + scale * b[k];
}

State2D euler_update(const State2D& s, double dt, const Tendency& t) {
  State2D out;
  axpy_into(out.rho, s.rho, dt, t.d_rho);
  axpy_into(out.rho_u1, s.rho_u1, dt, t.d_rho_u1);
  axpy_into(out.rho_u3, s.rho_u3, dt, t.d_rho_u3);
  axpy_into(out.rho_theta, s.rho_theta, dt, t.d_rho_theta);
  out.time = s.time + dt;
  return out;
}

// wa * a + wb * b, elementwise
void blend_into(Field& out, double wa, const Field& a, double wb, const Field& b) {
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = wa * a[k] + wb * b[k];
}

}  // namespace

void PhysConstants::validate() const {
  if (!(g > 0.0) || !(r_d > 0.0) || !(p0 > 0.0) || !(theta0 > 0.0)) {
    throw ConfigError("physical constants: g, R_d, p0 and theta0 must be positive");
  }
  if (!(c_p > r_d)) throw ConfigError("physical constants: c_p must exceed R_d");
  if (!(gamma > 1.0 && gamma < 2.0)) throw ConfigError("physical constants: gamma must lie in (1, 2)");
  const double implied = c_p / (c_p - r_d);
  if (std::abs(implied - gamma) > 1e-12 * gamma) {
    std::ostringstream os;
    os.precision(17);
    os << "physical constants: gamma = " << gamma << " inconsistent with c_p/(c_p - R_d) = " << implied;
    throw ConfigError(os.str());
  }
}

void Grid2D::validate() const {
  if (nx < 4 || nz < 4) throw ConfigError("grid: nx and nz must be at least 4");
  if (!(lx > 0.0) || !(lz > 0.0) || !std::isfinite(lx) || !std::isfinite(lz)) {
    throw ConfigError("grid: domain extents must be positive and finite");
  }
}

State2D State2D::zeros(const Grid2D& grid) {
  State2D s;
  const std::size_t n = grid.cells();
  s.rho.assign(n, 0.0);
  s.rho_u1.assign(n, 0.0);
  s.rho_u3.assign(n, 0.0);
  s.rho_theta.assign(n, 0.0);
  return s;
}

double equation_of_state(double rho_theta, const PhysConstants& consts) {
  if (!(rho_theta > 0.0) || !std::isfinite(rho_theta)) {
    std::ostringstream os;
    os << "equation_of_state: rho_theta = " << rho_theta << " is not positive and finite";
    throw DomainError(os.str());
  }
  return consts.p0 * std::pow(consts.r_d * rho_theta / consts.p0, consts.gamma);
}

Field equation_of_state(std::span<const double> rho_theta, const PhysConstants& consts) {
  Field p(rho_theta.size());
  for (std::size_t k = 0; k < rho_theta.size(); ++k) {
    const double v = rho_theta[k];
    if (!(v > 0.0) || !std::isfinite(v)) {
      std::ostringstream os;
      os << "equation_of_state: rho_theta = " << v << " at element " << k << " is not positive and finite";
      throw DomainError(os.str());
    }
    p[k] = consts.p0 * std::pow(consts.r_d * v / consts.p0, consts.gamma);
  }
  return p;
}

IsentropicPoint isentropic_profile(double z, const PhysConstants& consts) {
  IsentropicPoint pt{};
  pt.exner = 1.0 - consts.g * z / (consts.c_p * consts.theta0);
  if (!(pt.exner > 0.0)) {
    std::ostringstream os;
    os << "isentropic profile: Exner function " << pt.exner << " <= 0 at z = " << z << " m";
    throw ConfigError(os.str());
  }
  pt.pressure = consts.p0 * std::pow(pt.exner, consts.c_p / consts.r_d);
  pt.rho = pt.pressure / (consts.r_d * consts.theta0 * pt.exner);
  return pt;
}

State2D hydrostatic_background(const Grid2D& grid, const PhysConstants& consts) {
  grid.validate();
  consts.validate();
  State2D s = State2D::zeros(grid);
  for (int j = 0; j < grid.nz; ++j) {
    const IsentropicPoint pt = isentropic_profile(grid.z_center(j), consts);
    for (int i = 0; i < grid.nx; ++i) {
      const std::size_t k = grid.index(i, j);
      s.rho[k] = pt.rho;
      s.rho_theta[k] = pt.rho * consts.theta0;
    }
  }
  return s;
}

ReferenceProfile ReferenceProfile::hydrostatic(const Grid2D& grid, const PhysConstants& consts) {
  return from_state(hydrostatic_background(grid, consts), grid, consts);
}

ReferenceProfile ReferenceProfile::from_state(const State2D& state, const Grid2D& grid, const PhysConstants& consts) {
  if (state.cells() != grid.cells()) throw ShapeError("reference profile: state does not match grid");
  ReferenceProfile ref;
  ref.rho.resize(static_cast<std::size_t>(grid.nz));
  ref.rho_theta.resize(ref.rho.size());
  ref.pressure.resize(ref.rho.size());
  for (int j = 0; j < grid.nz; ++j) {
    const std::size_t k = grid.index(0, j);
    ref.rho[static_cast<std::size_t>(j)] = state.rho[k];
    ref.rho_theta[static_cast<std::size_t>(j)] = state.rho_theta[k];
    ref.pressure[static_cast<std::size_t>(j)] = equation_of_state(state.rho_theta[k], consts);
  }
  return ref;
}

double max_wavespeed(const State2D& state, const PhysConstants& consts) {
  double best = 0.0;
  const std::size_t n = state.cells();
  for (std::size_t k = 0; k < n; ++k) {
    const double r = state.rho[k];
    const double rt = state.rho_theta[k];
    if (!(r > 0.0) || !(rt > 0.0) || !std::isfinite(r) || !std::isfinite(rt) || !std::isfinite(state.rho_u1[k]) ||
        !std::isfinite(state.rho_u3[k])) {
      std::ostringstream os;
      os << "max_wavespeed: inadmissible state at element " << k << " (t = " << state.time << " s)";
      throw StabilityError(os.str(), state.time);
    }
    const double p = consts.p0 * std::pow(consts.r_d * rt / consts.p0, consts.gamma);
    const double c = std::sqrt(consts.gamma * p / r);
    const double u = std::abs(state.rho_u1[k] / r);
    const double w = std::abs(state.rho_u3[k] / r);
    best = std::max(best, std::max(u, w) + c);
  }
  return best;
}

double total_mass(const State2D& state, const Grid2D& grid) {
  double sum = 0.0;
  for (double r : state.rho) sum += r;
  return sum * grid.dx() * grid.dz();
}

EulerSolver::EulerSolver(Grid2D grid, PhysConstants consts, XBoundary x_boundary)
    : grid_(grid), consts_(consts), x_boundary_(x_boundary) {
  grid_.validate();
  consts_.validate();
  reference_ = ReferenceProfile::hydrostatic(grid_, consts_);
}

EulerSolver::EulerSolver(Grid2D grid, PhysConstants consts, ReferenceProfile reference, XBoundary x_boundary)
    : grid_(grid), consts_(consts), reference_(std::move(reference)), x_boundary_(x_boundary) {
  grid_.validate();
  consts_.validate();
  const auto nz = static_cast<std::size_t>(grid_.nz);
  if (reference_.rho.size() != nz || reference_.rho_theta.size() != nz || reference_.pressure.size() != nz) {
    throw ShapeError("reference profile has the wrong number of rows");
  }
}

void EulerSolver::check_shape(const State2D& s) const {
  const std::size_t n = grid_.cells();
  if (s.rho.size() != n || s.rho_u1.size() != n || s.rho_u3.size() != n || s.rho_theta.size() != n) {
    throw ShapeError("state fields do not match the grid");
  }
}

Tendency EulerSolver::compute_rhs(const State2D& s) const {
  check_shape(s);
  const int nx = grid_.nx;
  const int nz = grid_.nz;
  const std::size_t n = grid_.cells();

  if (const std::size_t bad = first_bad_cell(s); bad != n) {
    std::ostringstream os;
    os << "compute_rhs: positivity violated at " << cell_label(bad, nx) << " (t = " << s.time << " s)";
    throw StabilityError(os.str(), s.time);
  }

  // Perturbation variables and cell wave speeds.
  std::array<Field, kVars> q;
  for (auto& v : q) v.resize(n);
  Field wave_x(n);
  Field wave_z(n);
  for (int j = 0; j < nz; ++j) {
    const auto row = static_cast<std::size_t>(j);
    const double rho_ref = reference_.rho[row];
    const double rt_ref = reference_.rho_theta[row];
    const double p_ref = reference_.pressure[row];
    for (int i = 0; i < nx; ++i) {
      const std::size_t k = grid_.index(i, j);
      const double r = s.rho[k];
      const double p = consts_.p0 * std::pow(consts_.r_d * s.rho_theta[k] / consts_.p0, consts_.gamma);
      const double c = std::sqrt(consts_.gamma * p / r);
      q[0][k] = r - rho_ref;
      q[1][k] = s.rho_u1[k];
      q[2][k] = s.rho_u3[k];
      q[3][k] = s.rho_theta[k] - rt_ref;
      q[4][k] = p - p_ref;
      wave_x[k] = std::abs(s.rho_u1[k] / r) + c;
      wave_z[k] = std::abs(s.rho_u3[k] / r) + c;
    }
  }

  const double g = consts_.g;
  const bool periodic = x_boundary_ == XBoundary::periodic;

  // Face fluxes. fx: nz rows of nx + 1 faces. fz: nz + 1 face rows of nx.
  std::array<Field, 4> fx;
  std::array<Field, 4> fz;
  for (auto& f : fx) f.assign(static_cast<std::size_t>(nz) * static_cast<std::size_t>(nx + 1), 0.0);
  for (auto& f : fz) f.assign(static_cast<std::size_t>(nz + 1) * static_cast<std::size_t>(nx), 0.0);

  // Slopes are recomputed per sweep into this buffer.
  std::array<Field, kVars> slope;
  for (auto& v : slope) v.resize(n);

  // ---- x1 sweep ----
  for (int j = 0; j < nz; ++j) {
    for (int v = 0; v < kVars; ++v) {
      const double odd = (v == 1) ? -1.0 : 1.0;  // normal momentum flips sign at a wall
      for (int i = 0; i < nx; ++i) {
        const std::size_t k = grid_.index(i, j);
        double left;
        double right;
        if (i > 0) {
          left = q[v][k - 1];
        } else {
          left = periodic ? q[v][grid_.index(nx - 1, j)] : odd * q[v][k];
        }
        if (i < nx - 1) {
          right = q[v][k + 1];
        } else {
          right = periodic ? q[v][grid_.index(0, j)] : odd * q[v][k];
        }
        slope[v][k] = mc_limiter(q[v][k] - left, right - q[v][k]);
      }
    }

    const auto row = static_cast<std::size_t>(j);
    const double rho_ref = reference_.rho[row];
    const double rt_ref = reference_.rho_theta[row];

    auto flux_x = [&](const Face& lf, const Face& rf, double a, std::size_t out) {
      const double rl = rho_ref + lf.q[0];
      const double rr = rho_ref + rf.q[0];
      const double ul = lf.q[1] / rl;
      const double ur = rf.q[1] / rr;
      const double fl[4] = {lf.q[1], lf.q[1] * ul + lf.q[4], lf.q[2] * ul, (rt_ref + lf.q[3]) * ul};
      const double fr[4] = {rf.q[1], rf.q[1] * ur + rf.q[4], rf.q[2] * ur, (rt_ref + rf.q[3]) * ur};
      for (int v = 0; v < 4; ++v) {
        fx[v][out] = 0.5 * (fl[v] + fr[v]) - 0.5 * a * (rf.q[v] - lf.q[v]);
      }
    };

    const std::size_t frow = static_cast<std::size_t>(j) * static_cast<std::size_t>(nx + 1);
    for (int f = 1; f < nx; ++f) {
      const std::size_t kl = grid_.index(f - 1, j);
      const std::size_t kr = grid_.index(f, j);
      Face lf;
      Face rf;
      for (int v = 0; v < kVars; ++v) {
        lf.q[v] = q[v][kl] + 0.5 * slope[v][kl];
        rf.q[v] = q[v][kr] - 0.5 * slope[v][kr];
      }
      flux_x(lf, rf, std::max(wave_x[kl], wave_x[kr]), frow + static_cast<std::size_t>(f));
    }
    const std::size_t k0 = grid_.index(0, j);
    const std::size_t kn = grid_.index(nx - 1, j);
    if (periodic) {
      Face lf;
      Face rf;
      for (int v = 0; v < kVars; ++v) {
        lf.q[v] = q[v][kn] + 0.5 * slope[v][kn];
        rf.q[v] = q[v][k0] - 0.5 * slope[v][k0];
      }
      flux_x(lf, rf, std::max(wave_x[kn], wave_x[k0]), frow + static_cast<std::size_t>(nx));
      for (int v = 0; v < 4; ++v) fx[v][frow] = fx[v][frow + static_cast<std::size_t>(nx)];
    } else {
      Face inner;
      Face ghost;
      for (int v = 0; v < kVars; ++v) inner.q[v] = q[v][k0] - 0.5 * slope[v][k0];
      ghost = inner;
      ghost.q[1] = -inner.q[1];
      flux_x(ghost, inner, wave_x[k0], frow);
      for (int v = 0; v < kVars; ++v) inner.q[v] = q[v][kn] + 0.5 * slope[v][kn];
      ghost = inner;
      ghost.q[1] = -inner.q[1];
      flux_x(inner, ghost, wave_x[kn], frow + static_cast<std::size_t>(nx));
    }
  }

  // ---- x3 sweep ----
  for (int v = 0; v < kVars; ++v) {
    const double odd = (v == 2) ? -1.0 : 1.0;
    for (int j = 0; j < nz; ++j) {
      for (int i = 0; i < nx; ++i) {
        const std::size_t k = grid_.index(i, j);
        const double below = (j > 0) ? q[v][k - static_cast<std::size_t>(nx)] : odd * q[v][k];
        const double above = (j < nz - 1) ? q[v][k + static_cast<std::size_t>(nx)] : odd * q[v][k];
        slope[v][k] = mc_limiter(q[v][k] - below, above - q[v][k]);
      }
    }
  }

  auto flux_z = [&](const Face& lf, std::size_t row_l, const Face& rf, std::size_t row_r, double a, std::size_t out) {
    const double rl = reference_.rho[row_l] + lf.q[0];
    const double rr = reference_.rho[row_r] + rf.q[0];
    const double wl = lf.q[2] / rl;
    const double wr = rf.q[2] / rr;
    const double fl[4] = {lf.q[2], lf.q[1] * wl, lf.q[2] * wl + lf.q[4], (reference_.rho_theta[row_l] + lf.q[3]) * wl};
    const double fr[4] = {rf.q[2], rf.q[1] * wr, rf.q[2] * wr + rf.q[4], (reference_.rho_theta[row_r] + rf.q[3]) * wr};
    for (int v = 0; v < 4; ++v) {
      fz[v][out] = 0.5 * (fl[v] + fr[v]) - 0.5 * a * (rf.q[v] - lf.q[v]);
    }
  };

  for (int f = 0; f <= nz; ++f) {
    for (int i = 0; i < nx; ++i) {
      const std::size_t out = static_cast<std::size_t>(f) * static_cast<std::size_t>(nx) + static_cast<std::size_t>(i);
      if (f > 0 && f < nz) {
        const std::size_t kl = grid_.index(i, f - 1);
        const std::size_t kr = grid_.index(i, f);
        Face lf;
        Face rf;
        for (int v = 0; v < kVars; ++v) {
          lf.q[v] = q[v][kl] + 0.5 * slope[v][kl];
          rf.q[v] = q[v][kr] - 0.5 * slope[v][kr];
        }
        flux_z(lf, static_cast<std::size_t>(f - 1), rf, static_cast<std::size_t>(f), std::max(wave_z[kl], wave_z[kr]),
               out);
      } else if (f == 0) {
        const std::size_t k = grid_.index(i, 0);
        Face inner;
        for (int v = 0; v < kVars; ++v) inner.q[v] = q[v][k] - 0.5 * slope[v][k];
        Face ghost = inner;
        ghost.q[2] = -inner.q[2];
        flux_z(ghost, 0, inner, 0, wave_z[k], out);
      } else {
        const std::size_t k = grid_.index(i, nz - 1);
        Face inner;
        for (int v = 0; v < kVars; ++v) inner.q[v] = q[v][k] + 0.5 * slope[v][k];
        Face ghost = inner;
        ghost.q[2] = -inner.q[2];
        const auto top = static_cast<std::size_t>(nz - 1);
        flux_z(inner, top, ghost, top, wave_z[k], out);
      }
    }
  }

  Tendency t;
  t.d_rho.resize(n);
  t.d_rho_u1.resize(n);
  t.d_rho_u3.resize(n);
  t.d_rho_theta.resize(n);
  std::array<Field*, 4> out = {&t.d_rho, &t.d_rho_u1, &t.d_rho_u3, &t.d_rho_theta};
  const double inv_dx = 1.0 / grid_.dx();
  const double inv_dz = 1.0 / grid_.dz();
  for (int j = 0; j < nz; ++j) {
    for (int i = 0; i < nx; ++i) {
      const std::size_t k = grid_.index(i, j);
      const std::size_t xf = static_cast<std::size_t>(j) * static_cast<std::size_t>(nx + 1) + static_cast<std::size_t>(i);
      const std::size_t zf = static_cast<std::size_t>(j) * static_cast<std::size_t>(nx) + static_cast<std::size_t>(i);
      for (int v = 0; v < 4; ++v) {
        const double div_x = (fx[v][xf + 1] - fx[v][xf]) * inv_dx;
        const double div_z = (fz[v][zf + static_cast<std::size_t>(nx)] - fz[v][zf]) * inv_dz;
        (*out[v])[k] = -div_x - div_z;
      }
      t.d_rho_u3[k] -= q[0][k] * g;
    }
  }
  return t;
}

State2D EulerSolver::step_ssprk3(const State2D& s, double dt) const {
  if (!(dt >= 0.0) || !std::isfinite(dt)) throw ConfigError("step_ssprk3: dt must be finite and non-negative");
  check_shape(s);
  if (dt == 0.0) return s;

  State2D u1 = euler_update(s, dt, compute_rhs(s));
  State2D u2 = euler_update(u1, dt, compute_rhs(u1));
  blend_into(u2.rho, 0.75, s.rho, 0.25, u2.rho);
  blend_into(u2.rho_u1, 0.75, s.rho_u1, 0.25, u2.rho_u1);
  blend_into(u2.rho_u3, 0.75, s.rho_u3, 0.25, u2.rho_u3);
  blend_into(u2.rho_theta, 0.75, s.rho_theta, 0.25, u2.rho_theta);
  u2.time = s.time + 0.5 * dt;
  State2D u3 = euler_update(u2, dt, compute_rhs(u2));
  constexpr double third = 1.0 / 3.0;
  constexpr double two_thirds = 2.0 / 3.0;
  blend_into(u3.rho, third, s.rho, two_thirds, u3.rho);
  blend_into(u3.rho_u1, third, s.rho_u1, two_thirds, u3.rho_u1);
  blend_into(u3.rho_u3, third, s.rho_u3, two_thirds, u3.rho_u3);
  blend_into(u3.rho_theta, third, s.rho_theta, two_thirds, u3.rho_theta);
  u3.time = s.time + dt;
  return u3;
}

State2D EulerSolver::advance_output_interval(const State2D& state, double interval, double cfl, int* substeps) const {
  if (!(interval > 0.0) || !std::isfinite(interval)) throw ConfigError("advance_output_interval: interval must be > 0");
  if (!(cfl > 0.0 && cfl <= 1.0)) throw ConfigError("advance_output_interval: cfl must lie in (0, 1]");
  check_shape(state);

  const double t_end = state.time + interval;
  const double h = std::min(grid_.dx(), grid_.dz());
  State2D current = state;
  int count = 0;
  while (current.time < t_end) {
    State2D next;
    bool last = false;
    try {
      const double dt_cfl = cfl * h / max_wavespeed(current, consts_);
      const double remaining = t_end - current.time;
      last = dt_cfl >= remaining;
      next = step_ssprk3(current, last ? remaining : dt_cfl);
    } catch (const StabilityError& e) {
      throw StabilityError(e.what(), e.time(), current);
    }
    if (const std::size_t bad = first_bad_cell(next); bad != next.cells()) {
      std::ostringstream os;
      os << "advance_output_interval: inadmissible value at " << cell_label(bad, grid_.nx) << " (t = " << next.time
         << " s)";
      throw StabilityError(os.str(), next.time, current);
    }
    next.time = last ? t_end : std::min(next.time, t_end);
    current = std::move(next);
    ++count;
  }
  if (substeps) *substeps = count;
  return current;
}

}  // namespace kbub
