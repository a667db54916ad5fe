#include "kbub/koopman.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

namespace kbub {

using ad::Shape;
using ad::Tape;
using ad::Tensor;

// ---- configuration ----

AEConfig AEConfig::desk() { return AEConfig{}; }

AEConfig AEConfig::paper() {
  AEConfig c;
  c.height = 100;
  c.width = 100;
  c.channels = {64, 128, 256, 512};
  c.koopman_dim = 4096;
  return c;
}

void AEConfig::validate() const {
  if (in_channels == 0 || height == 0 || width == 0) throw ConfigError("model: input dimensions must be positive");
  if (channels.empty()) throw ConfigError("model: at least one DownBlock is required");
  for (std::size_t c : channels) {
    if (c == 0) throw ConfigError("model: channel counts must be positive");
  }
  if (koopman_dim == 0) throw ConfigError("model: koopman dimension must be positive");
  if (head_channels == 0) throw ConfigError("model: head channel count must be positive");
  if (m < 1) throw ConfigError("model: m must be >= 1");
  std::size_t h = height, w = width;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (h < 2 || w < 2) {
      std::ostringstream os;
      os << "model: input " << height << "x" << width << " is too small for " << channels.size() << " DownBlocks";
      throw ConfigError(os.str());
    }
    h /= 2;
    w /= 2;
  }
}

std::vector<std::pair<std::size_t, std::size_t>> AEConfig::spatial_sizes() const {
  std::vector<std::pair<std::size_t, std::size_t>> s;
  std::size_t h = height, w = width;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    s.emplace_back(h, w);
    h /= 2;
    w /= 2;
  }
  s.emplace_back(h, w);
  return s;
}

std::size_t AEConfig::flatten_size() const {
  const auto s = spatial_sizes().back();
  return channels.back() * s.first * s.second;
}

// ---- generic model helpers ----

Tensor reconstruct(Tape& t, const LatentModel& model, const Tensor& x) { return model.decode(t, model.encode(t, x)); }

Tensor predict_next(Tape& t, const LatentModel& model, const Tensor& x) {
  return model.decode(t, model.apply_koopman(t, model.encode(t, x)));
}

LinearLatentModel::LinearLatentModel(Tensor g, Tensor h, Tensor k, Shape input_shape, int m)
    : g_(std::move(g)), h_(std::move(h)), k_(std::move(k)), input_shape_(std::move(input_shape)), m_(m) {
  const std::size_t n = ad::numel(input_shape_);
  if (g_.rank() != 2 || h_.rank() != 2 || k_.rank() != 2 || g_.dim(1) != n || h_.dim(0) != n ||
      h_.dim(1) != g_.dim(0) || k_.dim(0) != g_.dim(0) || k_.dim(1) != g_.dim(0)) {
    throw ShapeError("linear latent model: inconsistent matrix shapes");
  }
  if (m_ < 1) throw ConfigError("linear latent model: m must be >= 1");
}

LinearLatentModel LinearLatentModel::identity(Shape input_shape) {
  const std::size_t n = ad::numel(input_shape);
  auto eye = [n] {
    Tensor e = Tensor::zeros({n, n}, true);
    for (std::size_t i = 0; i < n; ++i) e.data()[i * n + i] = 1.0;
    return e;
  };
  return LinearLatentModel(eye(), eye(), eye(), std::move(input_shape));
}

Tensor LinearLatentModel::encode(Tape& t, const Tensor& x) const {
  if (x.shape() != input_shape_) {
    throw ShapeError("encode: input " + ad::shape_str(x.shape()) + ", model expects " + ad::shape_str(input_shape_));
  }
  return ad::dense(t, ad::reshape(t, x, {x.numel()}), g_);
}

Tensor LinearLatentModel::decode(Tape& t, const Tensor& z) const {
  return ad::reshape(t, ad::dense(t, z, h_), input_shape_);
}

Tensor LinearLatentModel::apply_koopman(Tape& t, const Tensor& z) const {
  Tensor out = z;
  for (int i = 0; i < m_; ++i) out = ad::dense(t, out, k_);
  return out;
}

ad::ParameterList LinearLatentModel::parameters() const { return {{"g", g_}, {"h", h_}, {"koopman.weight", k_}}; }

// ---- convolutional model ----

KoopmanAE::KoopmanAE(const AEConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed, 0x4d4f44454c);
  const auto sizes = config_.spatial_sizes();
  const std::size_t n = config_.channels.size();

  std::size_t c_prev = config_.in_channels;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = config_.channels[i];
    down_.push_back({ad::ResidualBlock(c_prev, c, rng), ad::ResidualBlock(c, c, rng)});
    c_prev = c;
  }
  const std::size_t flat = config_.flatten_size();
  latent1_ = ad::Linear(flat, config_.koopman_dim, true, rng);
  koopman_ = ad::Linear(config_.koopman_dim, config_.koopman_dim, false, rng);
  // identity plus small noise
  {
    const std::size_t d = config_.koopman_dim;
    auto k = koopman_.weight.data();
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) k[i * d + j] = (i == j ? 1.0 : 0.0) + rng.uniform(-0.01, 0.01);
    }
  }
  latent2_ = ad::Linear(config_.koopman_dim, flat, true, rng);

  up_.resize(n);
  for (std::size_t ii = n; ii-- > 0;) {
    const std::size_t c_in = config_.channels[ii];
    const std::size_t c_out = ii > 0 ? config_.channels[ii - 1] : config_.head_channels;
    UpBlock& u = up_[ii];
    u.up = ad::ConvTranspose2d(c_in, c_out, 2, {2, 0}, rng);
    u.res1 = ad::ResidualBlock(c_out, c_out, rng);
    u.res2 = ad::ResidualBlock(c_out, c_out, rng);
    u.out_h = sizes[ii].first;
    u.out_w = sizes[ii].second;
  }
  head_ = ad::Conv2d(config_.head_channels, config_.in_channels, 1, {1, 0}, rng);
}

Tensor KoopmanAE::encode_impl(Tape& t, const Tensor& x, std::vector<ShapeRow>* trace) const {
  const Shape want{config_.in_channels, config_.height, config_.width};
  if (x.shape() != want) {
    throw ShapeError("encode: input " + ad::shape_str(x.shape()) + ", model expects " + ad::shape_str(want));
  }
  if (trace) trace->push_back({"Input", x.shape()});
  Tensor h = x;
  for (std::size_t i = 0; i < down_.size(); ++i) {
    h = down_[i].res1.forward(t, h);
    h = down_[i].res2.forward(t, h);
    h = ad::maxpool2d(t, h);
    if (trace) trace->push_back({"DownBlock " + std::to_string(i + 1), h.shape()});
  }
  h = ad::reshape(t, h, {h.numel()});
  if (trace) {
    trace->push_back({"Flatten", h.shape()});
    trace->push_back({"Latent 1", {latent1_.weight.dim(1), latent1_.weight.dim(0)}});
  }
  return latent1_.forward(t, h);
}

Tensor KoopmanAE::decode_impl(Tape& t, const Tensor& z, std::vector<ShapeRow>* trace) const {
  if (z.shape() != Shape{config_.koopman_dim}) {
    throw ShapeError("decode: latent " + ad::shape_str(z.shape()) + ", model expects [" +
                     std::to_string(config_.koopman_dim) + "]");
  }
  if (trace) trace->push_back({"Latent 2", {latent2_.weight.dim(1), latent2_.weight.dim(0)}});
  Tensor h = latent2_.forward(t, z);
  const auto last = config_.spatial_sizes().back();
  h = ad::reshape(t, h, {config_.channels.back(), last.first, last.second});
  if (trace) trace->push_back({"Reshape", h.shape()});
  for (std::size_t ii = up_.size(); ii-- > 0;) {
    const UpBlock& u = up_[ii];
    h = u.up.forward(t, h, u.out_h, u.out_w);
    h = u.res1.forward(t, h);
    h = u.res2.forward(t, h);
    if (trace) trace->push_back({"UpBlock " + std::to_string(ii + 1), h.shape()});
  }
  h = head_.forward(t, h);
  if (trace) trace->push_back({"Output", h.shape()});
  return h;
}

Tensor KoopmanAE::encode(Tape& t, const Tensor& x) const { return encode_impl(t, x, nullptr); }
Tensor KoopmanAE::decode(Tape& t, const Tensor& z) const { return decode_impl(t, z, nullptr); }

Tensor KoopmanAE::apply_koopman(Tape& t, const Tensor& z) const {
  if (z.shape() != Shape{config_.koopman_dim}) throw ShapeError("apply_koopman: latent " + ad::shape_str(z.shape()));
  Tensor out = z;
  for (int i = 0; i < config_.m; ++i) out = koopman_.forward(t, out);
  return out;
}

ad::ParameterList KoopmanAE::parameters() const {
  ad::ParameterList ps;
  for (std::size_t i = 0; i < down_.size(); ++i) {
    const std::string p = "down" + std::to_string(i + 1);
    down_[i].res1.collect(ps, p + ".res1");
    down_[i].res2.collect(ps, p + ".res2");
  }
  latent1_.collect(ps, "latent1");
  koopman_.collect(ps, "koopman");
  latent2_.collect(ps, "latent2");
  for (std::size_t ii = up_.size(); ii-- > 0;) {
    const std::string p = "up" + std::to_string(ii + 1);
    up_[ii].up.collect(ps, p + ".tconv");
    up_[ii].res1.collect(ps, p + ".res1");
    up_[ii].res2.collect(ps, p + ".res2");
  }
  head_.collect(ps, "head");
  return ps;
}

std::vector<ShapeRow> KoopmanAE::shape_trace() const {
  std::vector<ShapeRow> rows;
  Tape t;
  ad::NoGradScope ng(t);
  const Tensor x = Tensor::zeros({config_.in_channels, config_.height, config_.width});
  Tensor z = encode_impl(t, x, &rows);
  rows.push_back({"K", {config_.koopman_dim, config_.koopman_dim}});
  z = apply_koopman(t, z);
  decode_impl(t, z, &rows);
  return rows;
}

// ---- losses ----

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  recon += o.recon;
  pred += o.pred;
  lin += o.lin;
  noise += o.noise;
  repl += o.repl;
  total += o.total;
  return *this;
}

LossBreakdown LossBreakdown::scaled(double s) const {
  return {recon * s, pred * s, lin * s, noise * s, repl * s, total * s};
}

LossBreakdown LossTerms::values() const {
  return {recon.item(), pred.item(), lin.item(), noise.item(), repl.item(), total.item()};
}

LossTerms compute_losses(Tape& t, const LatentModel& model, const Tensor& x_k, const Tensor& x_k1,
                         const LossWeights& w, const Tensor* x_tilde) {
  if (x_k.shape() != x_k1.shape()) {
    throw ShapeError("compute_losses: pair shapes differ, " + ad::shape_str(x_k.shape()) + " vs " +
                     ad::shape_str(x_k1.shape()));
  }
  LossTerms L;
  const Tensor z_k = model.encode(t, x_k);
  const Tensor z_k1 = model.encode(t, x_k1);
  const Tensor kz = model.apply_koopman(t, z_k);
  const Tensor pred = model.decode(t, kz);
  L.recon = ad::mse(t, x_k, model.decode(t, z_k));
  L.pred = ad::mse(t, x_k1, pred);
  L.lin = ad::mse(t, z_k1, kz);
  if (x_tilde) {
    if (x_tilde->shape() != x_k.shape()) throw ShapeError("compute_losses: x_tilde shape mismatch");
    L.x_tilde = ad::detach(*x_tilde);
  } else {
    L.x_tilde = ad::detach(pred);
  }
  const Tensor z_t = model.encode(t, L.x_tilde);
  L.noise = ad::mse(t, z_t, kz);
  L.repl = ad::mse(t, z_t, z_k1);

  Tensor total = ad::scale(t, L.recon, w.recon);
  total = ad::add(t, total, ad::scale(t, L.pred, w.pred));
  total = ad::add(t, total, ad::scale(t, L.lin, w.lin));
  total = ad::add(t, total, ad::scale(t, L.noise, w.noise));
  total = ad::add(t, total, ad::scale(t, L.repl, w.repl));
  L.total = total;
  return L;
}

std::vector<std::complex<double>> koopman_spectrum(const LatentModel& model) {
  const Tensor& k = model.koopman_matrix();
  const auto d = static_cast<Eigen::Index>(k.dim(0));
  const Eigen::MatrixXd K = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      k.data().data(), d, d);
  Eigen::EigenSolver<Eigen::MatrixXd> es(K, false);
  if (es.info() != Eigen::Success) throw NumericalError("koopman_spectrum: eigensolver did not converge");
  std::vector<std::complex<double>> ev(es.eigenvalues().begin(), es.eigenvalues().end());
  std::stable_sort(ev.begin(), ev.end(), [](const auto& a, const auto& b) {
    const double ma = std::abs(a), mb = std::abs(b);
    if (ma != mb) return ma > mb;
    return std::arg(a) < std::arg(b);
  });
  return ev;
}

// ---- data ----

std::size_t SequenceSet::n_pairs() const {
  std::size_t n = 0;
  for (const auto& tr : trajectories) n += tr.size() > 0 ? tr.size() - 1 : 0;
  return n;
}

SequenceSet make_sequences(std::span<const TrajectoryRecord> records, std::span<const std::size_t> indices,
                           const NormStats& stats, Variable variable, std::size_t nx, std::size_t nz) {
  SequenceSet s;
  s.variable = variable;
  s.stats = stats;
  s.nx = nx;
  s.nz = nz;
  for (std::size_t idx : indices) {
    if (idx >= records.size()) throw DataError("make_sequences: record index out of range");
    std::vector<Tensor> seq;
    for (const State2D& st : records[idx].states) {
      if (st.cells() != nx * nz) throw DataError("make_sequences: state size does not match the grid");
      const TransformedState tf = transform_variables(st);
      seq.push_back(Tensor::from({1, nz, nx}, stats.normalize(tf.get(variable), variable)));
    }
    s.trajectories.push_back(std::move(seq));
  }
  return s;
}

Tensor flip_normalized(const Tensor& x, Variable variable, const NormStats& stats) {
  if (x.rank() != 3) throw ShapeError("flip_normalized: expected [C, H, W], got " + ad::shape_str(x.shape()));
  Field f = flip_x(x.values(), static_cast<int>(x.dim(2)));
  if (variable == Variable::u1) {
    const auto i = static_cast<std::size_t>(variable);
    const double shift = 2.0 * stats.mean[i] / stats.std[i];
    for (double& v : f) v = -v - shift;
  }
  return Tensor::from(x.shape(), std::move(f));
}

// ---- training ----

namespace {

std::vector<std::pair<std::size_t, std::size_t>> all_pairs(const SequenceSet& s) {
  std::vector<std::pair<std::size_t, std::size_t>> p;
  for (std::size_t r = 0; r < s.trajectories.size(); ++r) {
    for (std::size_t k = 0; k + 1 < s.trajectories[r].size(); ++k) p.emplace_back(r, k);
  }
  return p;
}

bool finite(const LossBreakdown& b) {
  return std::isfinite(b.recon) && std::isfinite(b.pred) && std::isfinite(b.lin) && std::isfinite(b.noise) &&
         std::isfinite(b.repl) && std::isfinite(b.total);
}

std::vector<std::vector<double>> snapshot(const ad::ParameterList& ps) {
  std::vector<std::vector<double>> v;
  v.reserve(ps.size());
  for (const auto& p : ps) v.push_back(p.tensor.values());
  return v;
}

void restore(const ad::ParameterList& ps, const std::vector<std::vector<double>>& v) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Tensor t = ps[i].tensor;
    std::copy(v[i].begin(), v[i].end(), t.data().begin());
  }
}

}  // namespace

LossBreakdown evaluate_losses(const LatentModel& model, const SequenceSet& data, const LossWeights& w) {
  const auto pairs = all_pairs(data);
  if (pairs.empty()) throw DataError("evaluate: no consecutive state pairs");
  LossBreakdown acc;
  Tape t;
  ad::NoGradScope ng(t);
  for (const auto& [r, k] : pairs) {
    acc += compute_losses(t, model, data.trajectories[r][k], data.trajectories[r][k + 1], w).values();
  }
  return acc.scaled(1.0 / static_cast<double>(pairs.size()));
}

TrainReport train(KoopmanAE& model, const SequenceSet& train_set, const SequenceSet& val_set,
                  const TrainConfig& cfg, ad::Adam* optimizer, const EpochCallback& on_epoch) {
  if (cfg.batch_size == 0) throw ConfigError("train: batch size must be positive");
  if (cfg.max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
  if (cfg.patience < 0) throw ConfigError("train: patience must be >= 0");
  auto pairs = all_pairs(train_set);
  if (pairs.empty()) throw DataError("train: the training set has no consecutive state pairs");
  const bool has_val = val_set.n_pairs() > 0;

  const ad::ParameterList params = model.parameters();
  std::optional<ad::Adam> local;
  if (!optimizer) {
    local.emplace(params, ad::AdamConfig{cfg.lr});
    optimizer = &*local;
  }

  TrainReport report;
  std::vector<std::vector<double>> best = snapshot(params);
  double best_val = 0.0;
  int since_best = 0;
  Rng rng(cfg.seed, 0x545241494e);

  auto abort = [&](const std::string& why) {
    if (report.best_epoch > 0) restore(params, best);
    report.stop_reason = "non_finite";
    throw TrainingError(why, report);
  };

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    rng.shuffle(pairs.begin(), pairs.end());
    LossBreakdown acc;
    for (std::size_t start = 0; start < pairs.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(pairs.size(), start + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(end - start);
      optimizer->zero_grad();
      for (std::size_t q = start; q < end; ++q) {
        const auto [r, k] = pairs[q];
        Tensor a = train_set.trajectories[r][k];
        Tensor b = train_set.trajectories[r][k + 1];
        if (cfg.flip_augment && rng.coin()) {
          a = flip_normalized(a, train_set.variable, train_set.stats);
          b = flip_normalized(b, train_set.variable, train_set.stats);
        }
        Tape t;
        const LossTerms L = compute_losses(t, model, a, b, cfg.weights);
        const LossBreakdown v = L.values();
        if (!finite(v)) {
          std::ostringstream os;
          os << "train: non-finite loss in epoch " << epoch << " (trajectory " << r << ", pair " << k << ")";
          abort(os.str());
        }
        acc += v;
        t.backward(ad::scale(t, L.total, inv));
      }
      try {
        optimizer->step();
      } catch (const NumericalError& e) {
        abort(std::string("train: epoch ") + std::to_string(epoch) + ": " + e.what());
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train = acc.scaled(1.0 / static_cast<double>(pairs.size()));
    rec.val = has_val ? evaluate_losses(model, val_set, cfg.weights) : rec.train;
    if (!finite(rec.val)) abort("train: non-finite validation loss in epoch " + std::to_string(epoch));
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (report.best_epoch == 0 || rec.val.total < best_val) {
      best_val = rec.val.total;
      report.best_epoch = epoch;
      best = snapshot(params);
      since_best = 0;
    } else {
      ++since_best;
    }
    if (since_best >= cfg.patience) {
      report.stop_reason = "patience";
      break;
    }
  }
  if (report.stop_reason.empty()) report.stop_reason = "max_epochs";
  report.best_val = best_val;
  restore(params, best);
  return report;
}

EvalMetrics evaluate_model(const LatentModel& model, const SequenceSet& data, const LossWeights& w) {
  EvalMetrics m;
  const auto pairs = all_pairs(data);
  if (pairs.empty()) throw DataError("evaluate: no consecutive state pairs");
  Tape t;
  ad::NoGradScope ng(t);
  auto err = [](const Tensor& a, const Tensor& b, double& mse_out, double& l2_out) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
      const double d = a.data()[i] - b.data()[i];
      s += d * d;
    }
    mse_out = s / static_cast<double>(a.numel());
    l2_out = std::sqrt(s);
  };
  for (const auto& [r, k] : pairs) {
    const Tensor& a = data.trajectories[r][k];
    const Tensor& b = data.trajectories[r][k + 1];
    const LossTerms L = compute_losses(t, model, a, b, w);
    m.losses += L.values();
    PairMetrics pm{r, k};
    err(reconstruct(t, model, a), a, pm.recon_mse, pm.recon_l2);
    err(L.x_tilde, b, pm.pred_mse, pm.pred_l2);
    m.samples.push_back(pm);
  }
  const double inv = 1.0 / static_cast<double>(pairs.size());
  m.losses = m.losses.scaled(inv);
  for (const auto& pm : m.samples) {
    m.recon_mse += pm.recon_mse;
    m.recon_l2 += pm.recon_l2;
    m.pred_mse += pm.pred_mse;
    m.pred_l2 += pm.pred_l2;
  }
  m.recon_mse *= inv;
  m.recon_l2 *= inv;
  m.pred_mse *= inv;
  m.pred_l2 *= inv;
  m.n_pairs = pairs.size();
  return m;
}

std::vector<Tensor> rollout(const LatentModel& model, const Tensor& x0, int steps, RolloutMode mode) {
  if (steps < 0) throw ConfigError("rollout: steps must be >= 0");
  Tape t;
  ad::NoGradScope ng(t);
  std::vector<Tensor> out;
  out.reserve(static_cast<std::size_t>(steps) + 1);
  Tensor z = model.encode(t, x0);
  out.push_back(model.decode(t, z));
  auto is_finite = [](const Tensor& v) {
    return std::all_of(v.data().begin(), v.data().end(), [](double e) { return std::isfinite(e); });
  };
  if (!is_finite(out.back())) {
    out.clear();
    return out;
  }
  Tensor x = x0;
  for (int n = 0; n < steps; ++n) {
    Tensor next;
    if (mode == RolloutMode::closed_loop) {
      next = predict_next(t, model, x);
      x = next;
    } else {
      z = model.apply_koopman(t, z);
      next = model.decode(t, z);
    }
    if (!is_finite(next)) break;
    out.push_back(next);
  }
  return out;
}

}  // namespace kbub
