#pragma once

// Exact SVD-based dynamic mode decomposition.

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "kbub/scenario.hpp"

namespace kbub {

struct SnapshotMatrix {
  Eigen::MatrixXd X;   // states 0 .. n-2 as columns
  Eigen::MatrixXd Xp;  // states 1 .. n-1
};

// Normalized transformed `variable` of every saved state.
SnapshotMatrix build_snapshots(const TrajectoryRecord& trajectory, Variable variable, const NormStats& stats);
// Columns of `states` are consecutive states.
SnapshotMatrix build_snapshots(const Eigen::MatrixXd& states);

struct DMDResult {
  std::size_t rank = 0;
  Eigen::VectorXd singular_values;  // all of them, descending
  Eigen::MatrixXd atilde;           // r x r
  Eigen::VectorXcd eigenvalues;     // modulus descending, then argument ascending
  Eigen::MatrixXcd modes;           // n x r, column i pairs with eigenvalues[i]
  Eigen::VectorXcd amplitudes;      // least-squares fit to the first snapshot
};

struct DMDOptions {
  std::optional<std::size_t> rank;    // default: singular values above threshold * sigma_max
  double rank_threshold = 1e-10;
};

DMDResult fit_dmd(const SnapshotMatrix& s, const DMDOptions& opts = {});

// Least-squares amplitudes b with modes * b ~ x.
Eigen::VectorXcd fit_amplitudes(const DMDResult& r, const Eigen::VectorXd& x);

struct DMDPrediction {
  std::vector<Eigen::VectorXd> states;  // k = 0 .. steps, real parts
  double max_imag = 0.0;                // largest discarded imaginary part
};

// x_k = Phi Lambda^k b with b fitted to x0.
DMDPrediction dmd_predict(const DMDResult& r, const Eigen::VectorXd& x0, int steps);

// || X' - Phi Lambda Phi^+ X ||_F
double one_step_residual(const DMDResult& r, const SnapshotMatrix& s);

}  // namespace kbub
