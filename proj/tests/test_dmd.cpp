#include <algorithm>
#include <chrono>
#include <numeric>

#include "doctest.h"
#include "kbub/dmd.hpp"
#include "kbub/random.hpp"

using namespace kbub;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using cplx = std::complex<double>;

namespace {

// A = S B S^-1 with B block diagonal: two real eigenvalues and three complex
// pairs, moduli in [0.85, 0.99] so every mode survives 50 snapshots.
MatrixXd stable_map(std::uint64_t seed) {
  Rng rng(seed);
  MatrixXd B = MatrixXd::Zero(8, 8);
  B(0, 0) = rng.uniform(0.85, 0.99);
  B(1, 1) = -rng.uniform(0.85, 0.99);
  for (int k = 2; k < 8; k += 2) {
    const double r = rng.uniform(0.85, 0.99);
    const double phi = rng.uniform(0.1, 2.5);
    B(k, k) = r * std::cos(phi);
    B(k, k + 1) = -r * std::sin(phi);
    B(k + 1, k) = r * std::sin(phi);
    B(k + 1, k + 1) = r * std::cos(phi);
  }
  MatrixXd S(8, 8);
  for (Eigen::Index i = 0; i < S.size(); ++i) S.data()[i] = rng.uniform(-1.0, 1.0);
  S += 3.0 * MatrixXd::Identity(8, 8);
  return S * B * S.inverse();
}

MatrixXd trajectory(const MatrixXd& A, const VectorXd& x0, int n) {
  MatrixXd m(A.rows(), n);
  m.col(0) = x0;
  for (int k = 1; k < n; ++k) m.col(k) = A * m.col(k - 1);
  return m;
}

// smallest over permutations of the largest pairwise distance
double match_error(const Eigen::VectorXcd& a, const Eigen::VectorXcd& b) {
  REQUIRE(a.size() == b.size());
  std::vector<int> p(static_cast<std::size_t>(a.size()));
  std::iota(p.begin(), p.end(), 0);
  double best = 1e300;
  do {
    double worst = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) worst = std::max(worst, std::abs(a(static_cast<Eigen::Index>(i)) - b(p[i])));
    best = std::min(best, worst);
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

VectorXd random_vec(Rng& rng, Eigen::Index n) {
  VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.uniform(-1.0, 1.0);
  return v;
}

}  // namespace

TEST_CASE("known linear map") {
  const auto t0 = std::chrono::steady_clock::now();
  const MatrixXd A = stable_map(7);
  Rng rng(8);
  const VectorXd x0 = random_vec(rng, 8);
  const SnapshotMatrix s = build_snapshots(trajectory(A, x0, 50));
  CHECK(s.X.cols() == 49);
  const DMDResult r = fit_dmd(s);
  CHECK(r.rank == 8);
  CHECK(r.modes.cols() == 8);

  Eigen::EigenSolver<MatrixXd> es(A, false);
  CHECK(match_error(r.eigenvalues, es.eigenvalues()) <= 1e-8);

  for (Eigen::Index i = 1; i < r.eigenvalues.size(); ++i) {
    CHECK(std::abs(r.eigenvalues(i - 1)) >= std::abs(r.eigenvalues(i)));
  }

  const DMDPrediction p = dmd_predict(r, x0, 10);
  REQUIRE(p.states.size() == 11);
  VectorXd truth = x0;
  for (int k = 0; k < 10; ++k) truth = A * truth;
  CHECK((p.states[10] - truth).norm() <= 1e-6 * truth.norm());
  CHECK(p.max_imag <= 1e-10);
  CHECK((p.states[1] - A * x0).norm() <= 1e-8 * (A * x0).norm());

  // one-step fit on the data itself
  CHECK(one_step_residual(r, s) <= 1e-8 * s.Xp.norm());
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 1.0);
}

TEST_CASE("conjugate closure") {
  Rng rng(9);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const MatrixXd A = stable_map(seed);
    const DMDResult r = fit_dmd(build_snapshots(trajectory(A, random_vec(rng, 8), 40)));
    for (Eigen::Index i = 0; i < r.eigenvalues.size(); ++i) {
      double nearest = 1e300;
      for (Eigen::Index j = 0; j < r.eigenvalues.size(); ++j) {
        nearest = std::min(nearest, std::abs(std::conj(r.eigenvalues(i)) - r.eigenvalues(j)));
      }
      CHECK(nearest <= 1e-10);
    }
  }
}

TEST_CASE("identity dynamics") {
  Rng rng(10);
  const VectorXd x = random_vec(rng, 12);
  const MatrixXd m = x.replicate(1, 6);
  const DMDResult r = fit_dmd(build_snapshots(m));
  REQUIRE(r.rank == 1);
  CHECK(std::abs(r.eigenvalues(0) - cplx(1.0, 0.0)) <= 1e-12);
  const DMDPrediction p = dmd_predict(r, x, 5);
  for (const auto& s : p.states) CHECK((s - p.states[0]).norm() <= 1e-12 * x.norm());
  CHECK((p.states[0] - x).norm() <= 1e-12 * x.norm());
}

TEST_CASE("scalar decay") {
  MatrixXd m(1, 10);
  m(0, 0) = 2.0;
  for (int k = 1; k < 10; ++k) m(0, k) = 0.9 * m(0, k - 1);
  const DMDResult r = fit_dmd(build_snapshots(m));
  REQUIRE(r.rank == 1);
  CHECK(std::abs(r.eigenvalues(0) - cplx(0.9, 0.0)) <= 1e-12);
}

TEST_CASE("steps = 0 is the rank-r projection") {
  Rng rng(11);
  MatrixXd m(10, 7);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
  const DMDResult r = fit_dmd(build_snapshots(m), {3});
  CHECK(r.rank == 3);
  CHECK(r.eigenvalues.size() == 3);
  const VectorXd x = random_vec(rng, 10);
  const DMDPrediction p = dmd_predict(r, x, 0);
  REQUIRE(p.states.size() == 1);
  const Eigen::VectorXcd b = fit_amplitudes(r, x);
  CHECK((p.states[0] - (r.modes * b).real()).norm() <= 1e-12);
  CHECK_THROWS_AS(dmd_predict(r, random_vec(rng, 9), 1), ShapeError);
}

TEST_CASE("rank monotonicity of the one-step residual") {
  Rng rng(12);
  for (int trial = 0; trial < 5; ++trial) {
    MatrixXd m(30, 16);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
    const SnapshotMatrix s = build_snapshots(m);
    double prev = 1e300;
    for (std::size_t r = 1; r <= 15; ++r) {
      const double res = one_step_residual(fit_dmd(s, {r}), s);
      CAPTURE(trial);
      CAPTURE(r);
      CHECK(res <= prev * (1.0 + 1e-10));
      prev = res;
    }
  }
}

TEST_CASE("snapshots from a trajectory record") {
  ScenarioConfig cfg;
  cfg.seed = 3;
  cfg.n_steps = 215;
  cfg.grid.nx = 8;
  cfg.grid.nz = 8;
  const IntervalAdvancer identity = [](const State2D& prev, std::size_t) { return prev; };
  const TrajectoryRecord rec = generate_trajectory(cfg, {}, identity);
  const SnapshotMatrix s = build_snapshots(rec, Variable::theta, compute_norm_stats({&rec, 1}));
  CHECK(s.X.cols() == 215);
  CHECK(s.X.rows() == 64);
  for (Eigen::Index j = 0; j + 1 < s.X.cols(); ++j) CHECK(s.Xp.col(j) == s.X.col(j + 1));

  TrajectoryRecord two = rec;
  two.states.resize(2);
  const SnapshotMatrix s2 = build_snapshots(two, Variable::u1, NormStats{});
  CHECK(s2.X.cols() == 1);
  CHECK(s2.Xp.cols() == 1);

  two.states.resize(1);
  CHECK_THROWS_AS(build_snapshots(two, Variable::theta, NormStats{}), DataError);
}

TEST_CASE("errors") {
  CHECK_THROWS_AS(fit_dmd(build_snapshots(MatrixXd::Zero(4, 5))), DataError);
  MatrixXd m = MatrixXd::Random(4, 5);
  CHECK_THROWS_AS(fit_dmd(build_snapshots(m), {0}), ConfigError);
  CHECK_THROWS_AS(fit_dmd(build_snapshots(m), {5}), ConfigError);
  m(1, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(fit_dmd(build_snapshots(m)), NumericalError);
}
