#pragma once

// Dense f64 tensors with tape-based reverse-mode differentiation.
//
// Every op takes the Tape it records onto. An op records a backward rule only
// when the tape is recording and at least one input requires a gradient;
// otherwise it is a plain forward computation. Tape::backward replays the
// rules in reverse order and then clears the tape.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "kbub/error.hpp"

namespace kbub::ad {

using Shape = std::vector<std::size_t>;

// 64-byte aligned storage. Eigen picks its vectorized peeling from the data
// address, so a fixed alignment keeps results bitwise reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until a gradient arrives
  bool requires_grad = false;

  Buffer& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<double> data() { return node_->value; }
  std::span<const double> data() const { return node_->value; }
  std::vector<double> values() const { return {node_->value.begin(), node_->value.end()}; }
  double item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad();
  void drop_grad() { node_->grad.clear(); }

  // Deep copy without autograd history.
  Tensor clone() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  bool same(const Tensor& o) const { return node_ == o.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  friend Tensor make_tensor(Shape, Buffer, bool);

  std::shared_ptr<detail::Node> node_;
};

Tensor make_tensor(Shape shape, Buffer values, bool requires_grad);
Tensor make_tensor(Shape shape, const std::vector<double>& values, bool requires_grad);

class Tape {
 public:
  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }
  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  // True when an op over `inputs` must record a backward rule.
  bool tracks(std::initializer_list<const Tensor*> inputs) const;
  void push(std::function<void()> backward_rule) { ops_.push_back(std::move(backward_rule)); }

  // Requires a scalar loss and a non-empty tape. Seeds d(loss) = 1, replays
  // the rules in reverse, then clears the tape. Leaf gradients accumulate.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> ops_;
  bool recording_ = true;
};

// Suspends recording for its lifetime.
class NoGradScope {
 public:
  explicit NoGradScope(Tape& tape) : tape_(tape), prev_(tape.recording()) { tape.set_recording(false); }
  ~NoGradScope() { tape_.set_recording(prev_); }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape& tape_;
  bool prev_;
};

// ---- elementwise and reductions ----
Tensor add(Tape& t, const Tensor& a, const Tensor& b);
Tensor sub(Tape& t, const Tensor& a, const Tensor& b);
Tensor mul(Tape& t, const Tensor& a, const Tensor& b);
Tensor scale(Tape& t, const Tensor& a, double s);
Tensor relu(Tape& t, const Tensor& a);  // d/dx = 0 at x = 0
Tensor sum(Tape& t, const Tensor& a);
Tensor mse(Tape& t, const Tensor& a, const Tensor& b);
Tensor reshape(Tape& t, const Tensor& a, Shape shape);
Tensor detach(const Tensor& a);

// ---- linear layers ----

// y = W x (+ b). x: [n_in], W: [n_out, n_in], b: [n_out].
Tensor dense(Tape& t, const Tensor& x, const Tensor& w, const Tensor* b = nullptr);

struct ConvGeometry {
  int stride = 1;
  int padding = 1;
};

// Cross-correlation with zero padding. x: [C_in, H, W], k: [C_out, C_in, kh, kw],
// bias: [C_out]. Output: [C_out, (H + 2p - kh) / s + 1, (W + 2p - kw) / s + 1].
Tensor conv2d(Tape& t, const Tensor& x, const Tensor& k, const Tensor* bias = nullptr, ConvGeometry geom = {});

// Transpose of conv2d with the same geometry: x: [C_in, H, W],
// k: [C_in, C_out, kh, kw], natural output (H - 1) s - 2p + kh per axis.
// `out_h`/`out_w` select the natural size (0 or equal) or one more, in which
// case one trailing zero row/column is appended.
Tensor conv_transpose2d(Tape& t, const Tensor& x, const Tensor& k, const Tensor* bias = nullptr,
                        ConvGeometry geom = {2, 0}, std::size_t out_h = 0, std::size_t out_w = 0);

// 2x2 window, stride 2, floor semantics. Gradient goes to the first maximum.
Tensor maxpool2d(Tape& t, const Tensor& x);

// ---- finite-difference checking ----

struct GradCheckOptions {
  double h = 1e-6;          // step is h * max(1, |p|)
  double denom_floor = 1e-4; // relative error = |a - n| / max(|a|, |n|, floor)
  std::size_t max_coords_per_param = 0;  // 0 checks every coordinate
  std::uint64_t seed = 0;   // picks the sampled coordinates
  // When the one-sided slopes disagree by more than kink_tol (relative) the
  // step straddles a ReLU/max kink; it is shrunk 4x up to this many times.
  int kink_refinements = 6;
  double kink_tol = 1e-5;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t param_index = 0;
  std::size_t coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coords_refined = 0;
  std::size_t coords_checked = 0;
};

// `loss_fn` builds a scalar loss from the current values of `params` on the
// given tape. Analytic gradients come from one backward pass; numeric ones
// from central differences with recording disabled.
GradCheckResult gradient_check(const std::function<Tensor(Tape&)>& loss_fn, std::vector<Tensor> params,
                               const GradCheckOptions& opts = {});

}  // namespace kbub::ad
