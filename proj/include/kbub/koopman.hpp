#pragma once

// Convolutional Koopman autoencoder: encoder g, linear latent advance K^m,
// decoder g^-1, the five-term training objective and its training loop.

#include <complex>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "kbub/nn.hpp"
#include "kbub/scenario.hpp"

namespace kbub {

struct LossWeights {
  double recon = 1.0;
  double pred = 1.0;
  double lin = 1.0;
  double noise = 1.0;
  double repl = 1.0;
};

struct AEConfig {
  std::size_t in_channels = 1;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<std::size_t> channels{8, 16};  // one DownBlock/UpBlock per entry
  std::size_t koopman_dim = 64;
  std::size_t head_channels = 4;             // channels of the last UpBlock
  int m = 1;                                 // applications of K per advance

  static AEConfig desk();
  static AEConfig paper();

  void validate() const;
  // Spatial size entering DownBlock i, plus the final pooled size at the end.
  std::vector<std::pair<std::size_t, std::size_t>> spatial_sizes() const;
  std::size_t flatten_size() const;
};

class LatentModel {
 public:
  virtual ~LatentModel() = default;
  virtual ad::Tensor encode(ad::Tape& t, const ad::Tensor& x) const = 0;
  virtual ad::Tensor decode(ad::Tape& t, const ad::Tensor& z) const = 0;
  // z' = K^m z
  virtual ad::Tensor apply_koopman(ad::Tape& t, const ad::Tensor& z) const = 0;
  virtual const ad::Tensor& koopman_matrix() const = 0;
  virtual ad::ParameterList parameters() const = 0;
};

// decode(encode(x)); K is bypassed.
ad::Tensor reconstruct(ad::Tape& t, const LatentModel& model, const ad::Tensor& x);
// decode(K^m encode(x))
ad::Tensor predict_next(ad::Tape& t, const LatentModel& model, const ad::Tensor& x);

// g(x) = G vec(x), g^-1(z) = reshape(H z), advance K^m. Handy for tests and as
// a linear baseline.
class LinearLatentModel : public LatentModel {
 public:
  LinearLatentModel(ad::Tensor g, ad::Tensor h, ad::Tensor k, ad::Shape input_shape, int m = 1);
  static LinearLatentModel identity(ad::Shape input_shape);

  ad::Tensor encode(ad::Tape& t, const ad::Tensor& x) const override;
  ad::Tensor decode(ad::Tape& t, const ad::Tensor& z) const override;
  ad::Tensor apply_koopman(ad::Tape& t, const ad::Tensor& z) const override;
  const ad::Tensor& koopman_matrix() const override { return k_; }
  ad::ParameterList parameters() const override;

 private:
  ad::Tensor g_, h_, k_;
  ad::Shape input_shape_;
  int m_;
};

struct ShapeRow {
  std::string layer;
  ad::Shape shape;
};

class KoopmanAE : public LatentModel {
 public:
  KoopmanAE(const AEConfig& config, std::uint64_t seed);

  ad::Tensor encode(ad::Tape& t, const ad::Tensor& x) const override;
  ad::Tensor decode(ad::Tape& t, const ad::Tensor& z) const override;
  ad::Tensor apply_koopman(ad::Tape& t, const ad::Tensor& z) const override;
  const ad::Tensor& koopman_matrix() const override { return koopman_.weight; }
  ad::ParameterList parameters() const override;

  const AEConfig& config() const { return config_; }
  ad::Conv2d& head() { return head_; }

  // Forward pass without recording. Rows: Input, DownBlock 1..n, Flatten,
  // Latent 1, K, Latent 2, Reshape, UpBlock n..1, Output. Linear rows carry
  // the [n_in, n_out] map size.
  std::vector<ShapeRow> shape_trace() const;

 private:
  struct DownBlock {
    ad::ResidualBlock res1, res2;
  };
  struct UpBlock {
    ad::ConvTranspose2d up;
    ad::ResidualBlock res1, res2;
    std::size_t out_h = 0, out_w = 0;
  };

  ad::Tensor encode_impl(ad::Tape& t, const ad::Tensor& x, std::vector<ShapeRow>* trace) const;
  ad::Tensor decode_impl(ad::Tape& t, const ad::Tensor& z, std::vector<ShapeRow>* trace) const;

  AEConfig config_;
  std::vector<DownBlock> down_;
  ad::Linear latent1_;
  ad::Linear koopman_;  // bias-free
  ad::Linear latent2_;
  std::vector<UpBlock> up_;  // up_[i] restores the input size of down_[i]
  ad::Conv2d head_;
};

struct LossBreakdown {
  double recon = 0.0;
  double pred = 0.0;
  double lin = 0.0;
  double noise = 0.0;
  double repl = 0.0;
  double total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown scaled(double s) const;
  bool operator==(const LossBreakdown&) const = default;
};

struct LossTerms {
  ad::Tensor recon, pred, lin, noise, repl, total;
  ad::Tensor x_tilde;  // predicted next state, detached
  LossBreakdown values() const;
};

// The five losses for one consecutive pair and their weighted total.
// x~ = decode(K^m encode(x_k)) enters the noise and replay terms as a constant.
// Passing `x_tilde` fixes it instead of recomputing it from the current
// parameters (needed for finite-difference checks).
LossTerms compute_losses(ad::Tape& t, const LatentModel& model, const ad::Tensor& x_k, const ad::Tensor& x_k1,
                         const LossWeights& w, const ad::Tensor* x_tilde = nullptr);

// Eigenvalues of K, modulus descending, then argument ascending.
std::vector<std::complex<double>> koopman_spectrum(const LatentModel& model);

// ---- data ----

// One normalized variable of every saved state, as [1, nz, nx] tensors.
struct SequenceSet {
  std::vector<std::vector<ad::Tensor>> trajectories;
  Variable variable = Variable::theta;
  NormStats stats;
  std::size_t nx = 0, nz = 0;

  std::size_t n_pairs() const;
};

SequenceSet make_sequences(std::span<const TrajectoryRecord> records, std::span<const std::size_t> indices,
                           const NormStats& stats, Variable variable, std::size_t nx, std::size_t nz);

// Mirror of a normalized single-variable field. For u1 the physical value
// changes sign, so the normalized value maps to -z - 2 mean / std.
ad::Tensor flip_normalized(const ad::Tensor& x, Variable variable, const NormStats& stats);

// ---- training ----

struct TrainConfig {
  LossWeights weights;
  double lr = 1e-4;
  int max_epochs = 50;
  int patience = 10;
  std::size_t batch_size = 16;
  bool flip_augment = true;
  std::uint64_t seed = 0;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  LossBreakdown train;
  LossBreakdown val;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val = 0.0;
  std::string stop_reason;  // "patience", "max_epochs" or "non_finite"
};

// Raised when a loss or gradient goes non-finite. The model holds the best
// parameters seen so far; `report` covers the completed epochs.
class TrainingError : public NumericalError {
 public:
  TrainingError(const std::string& what, TrainReport report) : NumericalError(what), report_(std::move(report)) {}
  const TrainReport& report() const { return report_; }

 private:
  TrainReport report_;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Adam on the weighted objective, gradients averaged over each mini-batch of
// pairs. Validation runs after every epoch; training stops once the
// validation total has not improved for `patience` epochs (patience 0 stops
// after the first). The best parameters are restored at the end. The
// optimizer is exposed so its state can be checkpointed.
TrainReport train(KoopmanAE& model, const SequenceSet& train_set, const SequenceSet& val_set,
                  const TrainConfig& config, ad::Adam* optimizer = nullptr, const EpochCallback& on_epoch = {});

// Mean loss breakdown over every consecutive pair, no augmentation.
LossBreakdown evaluate_losses(const LatentModel& model, const SequenceSet& data, const LossWeights& w);

struct PairMetrics {
  std::size_t trajectory = 0;  // position within the SequenceSet
  std::size_t pair = 0;        // k of the pair (x_k, x_k+1)
  double recon_mse = 0.0;      // reconstruction of x_k
  double pred_mse = 0.0;       // prediction of x_k+1
  double recon_l2 = 0.0;
  double pred_l2 = 0.0;
};

struct EvalMetrics {
  std::vector<PairMetrics> samples;
  LossBreakdown losses;
  // means of the per-pair values
  double recon_mse = 0.0;
  double pred_mse = 0.0;
  double recon_l2 = 0.0;    // 2-norm of the reconstruction error
  double pred_l2 = 0.0;     // 2-norm of the one-step prediction error
  std::size_t n_pairs = 0;
};

EvalMetrics evaluate_model(const LatentModel& model, const SequenceSet& data, const LossWeights& w);

// Closed loop: x_{n+1} = predict_next(x_n), each decoded state re-encoded.
// Latent: z_{n+1} = K^m z_n from z_0 = encode(x_0), each z decoded.
// Element 0 is the reconstruction of x0, element n the n-th prediction.
// Stops early, before the first non-finite state; a full run has steps + 1.
enum class RolloutMode { closed_loop, latent };
std::vector<ad::Tensor> rollout(const LatentModel& model, const ad::Tensor& x0, int steps,
                                RolloutMode mode = RolloutMode::closed_loop);

}  // namespace kbub
