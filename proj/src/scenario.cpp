#include "kbub/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace kbub {

namespace {

void validate_interval(const Interval& r, const char* what) {
  if (!(r.lo <= r.hi) || !std::isfinite(r.lo) || !std::isfinite(r.hi)) {
    throw ConfigError(std::string("parameter domain ") + what + ": expected finite lo <= hi");
  }
}

void validate_domain(const BubbleDomain& d, const char* kind) {
  validate_interval(d.temp_k, kind);
  validate_interval(d.radius_m, kind);
  validate_interval(d.cx_m, kind);
  validate_interval(d.cz_m, kind);
  if (!(d.stability_m > 0.0)) throw ConfigError(std::string(kind) + " bubble stability must be positive");
  if (d.min_count < 0 || d.max_count < d.min_count) {
    throw ConfigError(std::string(kind) + " bubble count range is invalid");
  }
  if (d.radius_m.lo < 0.0) throw ConfigError(std::string(kind) + " bubble radius must be non-negative");
}

BubbleSpec sample_bubble(Rng& rng, BubbleKind kind, const BubbleDomain& d) {
  BubbleSpec s;
  s.kind = kind;
  s.temp_k = rng.uniform(d.temp_k.lo, d.temp_k.hi);
  s.radius_m = rng.uniform(d.radius_m.lo, d.radius_m.hi);
  s.stability_m = d.stability_m;
  s.cx_m = rng.uniform(d.cx_m.lo, d.cx_m.hi);
  s.cz_m = rng.uniform(d.cz_m.lo, d.cz_m.hi);
  return s;
}

}  // namespace

bool ParameterDomains::contains(const BubbleSpec& s) const {
  const BubbleDomain& d = of(s.kind);
  return d.temp_k.contains(s.temp_k) && d.radius_m.contains(s.radius_m) && d.cx_m.contains(s.cx_m) &&
         d.cz_m.contains(s.cz_m) && s.stability_m == d.stability_m;
}

void ParameterDomains::validate() const {
  validate_domain(hot, "hot");
  validate_domain(cold, "cold");
}

void ScenarioConfig::validate() const {
  if (n_steps < 1) throw ConfigError("scenario: n_steps must be >= 1");
  if (!(output_interval_s > 0.0)) throw ConfigError("scenario: output interval must be positive");
  if (!(cfl > 0.0 && cfl <= 1.0)) throw ConfigError("scenario: cfl must lie in (0, 1]");
  grid.validate();
  consts.validate();
  domains.validate();
}

std::vector<BubbleSpec> sample_scenario(Rng& rng, const ScenarioConfig& config) {
  const ParameterDomains& d = config.domains;
  const auto n_hot = rng.uniform_int(d.hot.min_count, d.hot.max_count);
  const auto n_cold = rng.uniform_int(d.cold.min_count, d.cold.max_count);
  std::vector<BubbleSpec> specs;
  specs.reserve(static_cast<std::size_t>(n_hot + n_cold));
  for (std::int64_t k = 0; k < n_hot; ++k) specs.push_back(sample_bubble(rng, BubbleKind::hot, d.hot));
  for (std::int64_t k = 0; k < n_cold; ++k) specs.push_back(sample_bubble(rng, BubbleKind::cold, d.cold));
  return specs;
}

double perturbation_theta(double x, double z, std::span<const BubbleSpec> specs, double theta0) {
  double total = 0.0;
  for (const BubbleSpec& b : specs) {
    const double amp = b.temp_k - theta0;
    const double dx = x - b.cx_m;
    const double dz = z - b.cz_m;
    const double d = std::sqrt(dx * dx + dz * dz);
    if (d <= b.radius_m) {
      total += amp;
    } else {
      const double e = (d - b.radius_m) / b.stability_m;
      total += amp * std::exp(-e * e);
    }
  }
  return total;
}

State2D apply_perturbation(const State2D& background, std::span<const BubbleSpec> specs, const Grid2D& grid,
                           const PhysConstants& consts) {
  if (background.cells() != grid.cells()) throw ShapeError("apply_perturbation: state does not match grid");
  State2D out = background;
  if (specs.empty()) return out;
  for (int j = 0; j < grid.nz; ++j) {
    for (int i = 0; i < grid.nx; ++i) {
      const double tp = perturbation_theta(grid.x_center(i), grid.z_center(j), specs, consts.theta0);
      if (tp == 0.0) continue;
      const std::size_t k = grid.index(i, j);
      const double theta = background.rho_theta[k] / background.rho[k] + tp;
      if (!(theta > 0.0) || !std::isfinite(theta)) {
        std::ostringstream os;
        os << "apply_perturbation: theta = " << theta << " at cell (i=" << i << ", j=" << j << ")";
        throw DomainError(os.str());
      }
      out.rho[k] = background.rho_theta[k] / theta;
    }
  }
  return out;
}

std::size_t truncated_length(std::size_t failed_index) { return failed_index > 10 ? failed_index - 10 : 1; }

TrajectoryRecord generate_trajectory(const ScenarioConfig& config, std::uint64_t trajectory_index) {
  config.validate();
  Rng rng(config.seed, trajectory_index);
  return generate_trajectory(config, sample_scenario(rng, config));
}

TrajectoryRecord generate_trajectory(const ScenarioConfig& config, std::vector<BubbleSpec> specs) {
  config.validate();
  const EulerSolver solver(config.grid, config.consts);
  const IntervalAdvancer advance = [&](const State2D& prev, std::size_t) {
    return solver.advance_output_interval(prev, config.output_interval_s, config.cfl);
  };
  return generate_trajectory(config, std::move(specs), advance);
}

TrajectoryRecord generate_trajectory(const ScenarioConfig& config, std::vector<BubbleSpec> specs,
                                     const IntervalAdvancer& advance) {
  config.validate();
  TrajectoryRecord rec;
  rec.specs = std::move(specs);
  const State2D background = hydrostatic_background(config.grid, config.consts);
  rec.states.reserve(static_cast<std::size_t>(config.n_steps) + 1);
  rec.states.push_back(apply_perturbation(background, rec.specs, config.grid, config.consts));
  for (std::size_t k = 1; k <= static_cast<std::size_t>(config.n_steps); ++k) {
    try {
      State2D next = advance(rec.states.back(), k);
      // pin the saved time to the output grid
      next.time = static_cast<double>(k) * config.output_interval_s;
      rec.states.push_back(std::move(next));
    } catch (const StabilityError& e) {
      const std::size_t keep = truncated_length(k);
      if (keep < 2) {
        std::ostringstream os;
        os << "trajectory failed at saved index " << k << " leaving " << keep << " state(s): " << e.what();
        throw GenerationError(os.str());
      }
      rec.states.resize(std::min(keep, rec.states.size()));
      rec.truncated = true;
      break;
    }
  }
  return rec;
}

const char* variable_name(Variable v) {
  switch (v) {
    case Variable::rho:
      return "rho";
    case Variable::u1:
      return "u1";
    case Variable::u3:
      return "u3";
    case Variable::theta:
      return "theta";
  }
  return "?";
}

Variable parse_variable(const std::string& name) {
  if (name == "rho") return Variable::rho;
  if (name == "u1") return Variable::u1;
  if (name == "u3") return Variable::u3;
  if (name == "theta") return Variable::theta;
  throw ConfigError("unknown variable '" + name + "' (expected rho, u1, u3 or theta)");
}

const Field& TransformedState::get(Variable v) const {
  switch (v) {
    case Variable::rho:
      return rho;
    case Variable::u1:
      return u1;
    case Variable::u3:
      return u3;
    case Variable::theta:
      break;
  }
  return theta;
}

Field& TransformedState::get(Variable v) {
  return const_cast<Field&>(static_cast<const TransformedState&>(*this).get(v));
}

TransformedState transform_variables(const State2D& s) {
  const std::size_t n = s.cells();
  TransformedState t;
  t.rho = s.rho;
  t.u1.resize(n);
  t.u3.resize(n);
  t.theta.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double r = s.rho[k];
    if (!(r > 0.0)) {
      std::ostringstream os;
      os << "transform_variables: rho = " << r << " at element " << k;
      throw DomainError(os.str());
    }
    t.u1[k] = s.rho_u1[k] / r;
    t.u3[k] = s.rho_u3[k] / r;
    t.theta[k] = s.rho_theta[k] / r;
  }
  return t;
}

State2D inverse_transform(const TransformedState& t, double time) {
  const std::size_t n = t.rho.size();
  State2D s;
  s.rho = t.rho;
  s.rho_u1.resize(n);
  s.rho_u3.resize(n);
  s.rho_theta.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    s.rho_u1[k] = t.rho[k] * t.u1[k];
    s.rho_u3[k] = t.rho[k] * t.u3[k];
    s.rho_theta[k] = t.rho[k] * t.theta[k];
  }
  s.time = time;
  return s;
}

Field NormStats::normalize(std::span<const double> field, Variable v) const {
  const auto i = static_cast<std::size_t>(v);
  Field out(field.size());
  for (std::size_t k = 0; k < field.size(); ++k) out[k] = (field[k] - mean[i]) / std[i];
  return out;
}

Field NormStats::denormalize(std::span<const double> field, Variable v) const {
  const auto i = static_cast<std::size_t>(v);
  Field out(field.size());
  for (std::size_t k = 0; k < field.size(); ++k) out[k] = field[k] * std[i] + mean[i];
  return out;
}

NormStats compute_norm_stats(std::span<const TrajectoryRecord> records) {
  std::size_t count = 0;
  std::array<double, kNumVariables> sum{};
  for (const auto& rec : records) {
    for (const auto& s : rec.states) {
      const TransformedState t = transform_variables(s);
      for (int v = 0; v < kNumVariables; ++v) {
        for (double x : t.get(static_cast<Variable>(v))) sum[static_cast<std::size_t>(v)] += x;
      }
      count += s.cells();
    }
  }
  if (count == 0) throw DataError("compute_norm_stats: no states to compute statistics from");

  NormStats stats;
  const auto n = static_cast<double>(count);
  for (std::size_t v = 0; v < kNumVariables; ++v) stats.mean[v] = sum[v] / n;

  std::array<double, kNumVariables> sq{};
  for (const auto& rec : records) {
    for (const auto& s : rec.states) {
      const TransformedState t = transform_variables(s);
      for (int v = 0; v < kNumVariables; ++v) {
        const double m = stats.mean[static_cast<std::size_t>(v)];
        for (double x : t.get(static_cast<Variable>(v))) sq[static_cast<std::size_t>(v)] += (x - m) * (x - m);
      }
    }
  }
  for (std::size_t v = 0; v < kNumVariables; ++v) {
    stats.std[v] = std::max(std::sqrt(sq[v] / n), NormStats::kMinStd);
  }
  return stats;
}

Field flip_x(std::span<const double> field, int nx) {
  if (nx <= 0 || field.size() % static_cast<std::size_t>(nx) != 0) {
    throw ShapeError("flip_x: field size is not a multiple of nx");
  }
  Field out(field.size());
  const auto w = static_cast<std::size_t>(nx);
  for (std::size_t row = 0; row < field.size() / w; ++row) {
    for (std::size_t i = 0; i < w; ++i) out[row * w + i] = field[row * w + (w - 1 - i)];
  }
  return out;
}

TransformedState horizontal_flip(const TransformedState& s, int nx) {
  TransformedState out;
  out.rho = flip_x(s.rho, nx);
  out.u1 = flip_x(s.u1, nx);
  for (double& v : out.u1) v = -v;
  out.u3 = flip_x(s.u3, nx);
  out.theta = flip_x(s.theta, nx);
  return out;
}

State2D horizontal_flip(const State2D& s, int nx) {
  State2D out;
  out.rho = flip_x(s.rho, nx);
  out.rho_u1 = flip_x(s.rho_u1, nx);
  for (double& v : out.rho_u1) v = -v;
  out.rho_u3 = flip_x(s.rho_u3, nx);
  out.rho_theta = flip_x(s.rho_theta, nx);
  out.time = s.time;
  return out;
}

std::pair<TransformedState, TransformedState> horizontal_flip(const std::pair<TransformedState, TransformedState>& pair,
                                                              int nx) {
  return {horizontal_flip(pair.first, nx), horizontal_flip(pair.second, nx)};
}

SplitIndices split_dataset(std::size_t n_records, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split_dataset: ratio must lie in (0, 1)");
  if (n_records < 2) throw DataError("split_dataset: at least two records are required");
  auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n_records)));
  n_train = std::clamp<std::size_t>(n_train, 1, n_records - 1);

  std::vector<std::size_t> order(n_records);
  for (std::size_t k = 0; k < n_records; ++k) order[k] = k;
  Rng rng(seed, 0x53504c4954);  // stream id "SPLIT"
  rng.shuffle(order.begin(), order.end());

  SplitIndices out;
  out.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  return out;
}

}  // namespace kbub
