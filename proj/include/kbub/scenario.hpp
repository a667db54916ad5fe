#pragma once

// Randomized rising/sinking bubble scenarios and the data pipeline that turns
// solver trajectories into training samples.

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "kbub/euler.hpp"
#include "kbub/random.hpp"

namespace kbub {

enum class BubbleKind : std::uint8_t { hot = 0, cold = 1 };

struct BubbleSpec {
  BubbleKind kind = BubbleKind::hot;
  double temp_k = 0.0;       // bubble potential temperature
  double radius_m = 0.0;     // plateau radius r
  double stability_m = 50.0; // Gaussian skirt decay length s
  double cx_m = 0.0;
  double cz_m = 0.0;

  bool operator==(const BubbleSpec&) const = default;
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double v) const { return v >= lo && v <= hi; }
};

struct BubbleDomain {
  Interval temp_k;
  Interval radius_m;
  Interval cx_m;
  Interval cz_m;
  double stability_m = 50.0;
  int min_count = 0;
  int max_count = 0;
};

// Sampling domains; defaults reproduce the published parameter table for a
// 1000 m x 1000 m domain.
struct ParameterDomains {
  BubbleDomain hot{{303.3, 303.6}, {10.0, 80.0}, {300.0, 700.0}, {50.0, 300.0}, 50.0, 1, 2};
  BubbleDomain cold{{302.8, 302.9}, {10.0, 80.0}, {200.0, 800.0}, {100.0, 750.0}, 50.0, 0, 2};

  const BubbleDomain& of(BubbleKind kind) const { return kind == BubbleKind::hot ? hot : cold; }
  bool contains(const BubbleSpec& spec) const;
  void validate() const;
};

struct ScenarioConfig {
  std::uint64_t seed = 0;
  int n_steps = 215;              // advancement intervals after t = 0
  double output_interval_s = 5.0; // simulated seconds between saved states
  double cfl = 0.4;
  Grid2D grid;
  PhysConstants consts;
  ParameterDomains domains;

  void validate() const;
};

struct TrajectoryRecord {
  std::vector<BubbleSpec> specs;
  std::vector<State2D> states;
  bool truncated = false;

  std::size_t n_saved() const { return states.size(); }
  bool operator==(const TrajectoryRecord&) const = default;
};

// Scenario discarded because too few states survived truncation.
class GenerationError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

std::vector<BubbleSpec> sample_scenario(Rng& rng, const ScenarioConfig& config);

// Potential-temperature perturbation at (x, z) summed over bubbles:
// A inside the plateau radius, A exp(-((d - r) / s)^2) outside, A = temp - theta0.
double perturbation_theta(double x, double z, std::span<const BubbleSpec> specs, double theta0);

// Applies the summed perturbation at fixed rho*theta (hence fixed pressure):
// rho = rho*theta / (theta_background + theta'). Momenta are unchanged.
State2D apply_perturbation(const State2D& background, std::span<const BubbleSpec> specs, const Grid2D& grid,
                           const PhysConstants& consts);

// Number of states kept when computing saved index `failed_index` failed.
std::size_t truncated_length(std::size_t failed_index);

// Advances state `index - 1` to saved index `index`.
using IntervalAdvancer = std::function<State2D(const State2D& previous, std::size_t index)>;

// Samples bubbles from the (seed, trajectory_index) stream and integrates.
TrajectoryRecord generate_trajectory(const ScenarioConfig& config, std::uint64_t trajectory_index = 0);
TrajectoryRecord generate_trajectory(const ScenarioConfig& config, std::vector<BubbleSpec> specs);
TrajectoryRecord generate_trajectory(const ScenarioConfig& config, std::vector<BubbleSpec> specs,
                                     const IntervalAdvancer& advance);

// ---- variable transform and normalization ----

enum class Variable : int { rho = 0, u1 = 1, u3 = 2, theta = 3 };
inline constexpr int kNumVariables = 4;

const char* variable_name(Variable v);
Variable parse_variable(const std::string& name);

// Density factored out of the conserved variables.
struct TransformedState {
  Field rho;
  Field u1;
  Field u3;
  Field theta;

  const Field& get(Variable v) const;
  Field& get(Variable v);
  bool operator==(const TransformedState&) const = default;
};

TransformedState transform_variables(const State2D& state);
State2D inverse_transform(const TransformedState& fields, double time = 0.0);

struct NormStats {
  static constexpr double kMinStd = 1e-8;
  std::array<double, kNumVariables> mean{0.0, 0.0, 0.0, 0.0};
  std::array<double, kNumVariables> std{1.0, 1.0, 1.0, 1.0};

  Field normalize(std::span<const double> field, Variable v) const;
  Field denormalize(std::span<const double> field, Variable v) const;
  bool operator==(const NormStats&) const = default;
};

// Global per-variable population mean and std over every cell of every state.
NormStats compute_norm_stats(std::span<const TrajectoryRecord> records);

// Reverses the x1 axis of a (nz, nx) field.
Field flip_x(std::span<const double> field, int nx);
// Mirror about the vertical centerline; u1 changes sign.
TransformedState horizontal_flip(const TransformedState& s, int nx);
State2D horizontal_flip(const State2D& s, int nx);
std::pair<TransformedState, TransformedState> horizontal_flip(const std::pair<TransformedState, TransformedState>& pair,
                                                              int nx);

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

// Per-trajectory split. n_train = round(ratio * n), kept within [1, n - 1].
SplitIndices split_dataset(std::size_t n_records, double ratio, std::uint64_t seed);

}  // namespace kbub
