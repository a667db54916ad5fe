#include "kbub/dmd.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace kbub {

SnapshotMatrix build_snapshots(const Eigen::MatrixXd& states) {
  if (states.cols() < 2) throw DataError("dmd: need at least 2 states, got " + std::to_string(states.cols()));
  const Eigen::Index n = states.cols() - 1;
  return {states.leftCols(n), states.rightCols(n)};
}

SnapshotMatrix build_snapshots(const TrajectoryRecord& trajectory, Variable variable, const NormStats& stats) {
  if (trajectory.states.size() < 2) {
    throw DataError("dmd: need at least 2 states, got " + std::to_string(trajectory.states.size()));
  }
  const auto rows = static_cast<Eigen::Index>(trajectory.states.front().rho.size());
  Eigen::MatrixXd m(rows, static_cast<Eigen::Index>(trajectory.states.size()));
  for (std::size_t j = 0; j < trajectory.states.size(); ++j) {
    const TransformedState tf = transform_variables(trajectory.states[j]);
    const Field f = stats.normalize(tf.get(variable), variable);
    if (static_cast<Eigen::Index>(f.size()) != rows) throw ShapeError("dmd: states differ in size");
    m.col(static_cast<Eigen::Index>(j)) = Eigen::Map<const Eigen::VectorXd>(f.data(), rows);
  }
  return build_snapshots(m);
}

DMDResult fit_dmd(const SnapshotMatrix& s, const DMDOptions& opts) {
  if (s.X.rows() != s.Xp.rows() || s.X.cols() != s.Xp.cols()) throw ShapeError("dmd: X and X' differ in shape");
  if (s.X.size() == 0) throw DataError("dmd: empty snapshot matrix");
  if (!s.X.allFinite() || !s.Xp.allFinite()) throw NumericalError("dmd: non-finite snapshots");

  Eigen::BDCSVD<Eigen::MatrixXd> svd(s.X, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& sv = svd.singularValues();
  const double smax = sv.size() ? sv(0) : 0.0;
  if (!(smax > 0.0)) throw DataError("dmd: degenerate input, the snapshot matrix is zero");

  const auto max_rank = static_cast<std::size_t>(std::min(s.X.rows(), s.X.cols()));
  std::size_t r = 0;
  if (opts.rank) {
    r = *opts.rank;
    if (r == 0 || r > max_rank) {
      throw ConfigError("dmd: rank must be in [1, " + std::to_string(max_rank) + "], got " + std::to_string(r));
    }
    if (!(sv(static_cast<Eigen::Index>(r) - 1) > 0.0)) {
      throw NumericalError("dmd: requested rank " + std::to_string(r) + " exceeds the numerical rank of X");
    }
  } else {
    if (!(opts.rank_threshold >= 0.0)) throw ConfigError("dmd: rank threshold must be non-negative");
    while (r < static_cast<std::size_t>(sv.size()) && sv(static_cast<Eigen::Index>(r)) > opts.rank_threshold * smax) ++r;
  }
  const auto er = static_cast<Eigen::Index>(r);

  const Eigen::MatrixXd U = svd.matrixU().leftCols(er);
  const Eigen::MatrixXd V = svd.matrixV().leftCols(er);
  const Eigen::VectorXd inv_s = sv.head(er).cwiseInverse();
  const Eigen::MatrixXd XpVSinv = s.Xp * V * inv_s.asDiagonal();

  DMDResult out;
  out.rank = r;
  out.singular_values = sv;
  out.atilde = U.transpose() * XpVSinv;

  Eigen::EigenSolver<Eigen::MatrixXd> es(out.atilde, true);
  if (es.info() != Eigen::Success) throw NumericalError("dmd: eigensolver did not converge");
  const Eigen::VectorXcd lam = es.eigenvalues();
  const Eigen::MatrixXcd W = es.eigenvectors();

  std::vector<Eigen::Index> order(static_cast<std::size_t>(er));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    const double ma = std::abs(lam(a)), mb = std::abs(lam(b));
    if (ma != mb) return ma > mb;
    return std::arg(lam(a)) < std::arg(lam(b));
  });
  const Eigen::MatrixXcd Phi = XpVSinv.cast<std::complex<double>>() * W;
  out.eigenvalues.resize(er);
  out.modes.resize(s.X.rows(), er);
  for (Eigen::Index i = 0; i < er; ++i) {
    out.eigenvalues(i) = lam(order[static_cast<std::size_t>(i)]);
    out.modes.col(i) = Phi.col(order[static_cast<std::size_t>(i)]);
  }
  out.amplitudes = fit_amplitudes(out, s.X.col(0));
  return out;
}

Eigen::VectorXcd fit_amplitudes(const DMDResult& r, const Eigen::VectorXd& x) {
  if (x.size() != r.modes.rows()) {
    throw ShapeError("dmd: state of length " + std::to_string(x.size()) + " does not match modes of length " +
                     std::to_string(r.modes.rows()));
  }
  return r.modes.completeOrthogonalDecomposition().solve(x.cast<std::complex<double>>());
}

DMDPrediction dmd_predict(const DMDResult& r, const Eigen::VectorXd& x0, int steps) {
  if (steps < 0) throw ConfigError("dmd: steps must be non-negative");
  Eigen::VectorXcd c = fit_amplitudes(r, x0);
  DMDPrediction p;
  p.states.reserve(static_cast<std::size_t>(steps) + 1);
  for (int k = 0; k <= steps; ++k) {
    const Eigen::VectorXcd x = r.modes * c;
    p.max_imag = std::max(p.max_imag, x.imag().cwiseAbs().maxCoeff());
    p.states.push_back(x.real());
    c = c.cwiseProduct(r.eigenvalues);
  }
  return p;
}

double one_step_residual(const DMDResult& r, const SnapshotMatrix& s) {
  const Eigen::MatrixXcd coeff = r.modes.completeOrthogonalDecomposition().solve(s.X.cast<std::complex<double>>());
  const Eigen::MatrixXcd pred = r.modes * r.eigenvalues.asDiagonal() * coeff;
  return (s.Xp.cast<std::complex<double>>() - pred).norm();
}

}  // namespace kbub
