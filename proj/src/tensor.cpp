#include "kbub/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "kbub/random.hpp"

namespace kbub::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using NodePtr = std::shared_ptr<detail::Node>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op, const char* what) {
  if (a.rank() != rank) {
    std::ostringstream os;
    os << op << ": " << what << " must have rank " << rank << ", got " << shape_str(a.shape());
    throw ShapeError(os.str());
  }
}

// Geometry of one spatial axis of a convolution.
std::size_t conv_out(std::size_t in, std::size_t k, int stride, int pad, const char* op) {
  const long span = static_cast<long>(in) + 2L * pad - static_cast<long>(k);
  if (span < 0 || stride <= 0) {
    throw ShapeError(std::string(op) + ": kernel does not fit the padded input");
  }
  return static_cast<std::size_t>(span / stride + 1);
}

struct ConvDims {
  std::size_t c, h, w;    // image channels and size
  std::size_t kh, kw;
  std::size_t oh, ow;     // output grid
  int stride, pad;
};

// cols[(c * kh + ki) * kw + kj, oy * ow + ox] = x[c, oy * s - p + ki, ox * s - p + kj]
void im2col(const double* x, const ConvDims& d, double* cols) {
  const std::size_t n = d.oh * d.ow;
  for (std::size_t c = 0; c < d.c; ++c) {
    for (std::size_t ki = 0; ki < d.kh; ++ki) {
      for (std::size_t kj = 0; kj < d.kw; ++kj) {
        double* row = cols + ((c * d.kh + ki) * d.kw + kj) * n;
        for (std::size_t oy = 0; oy < d.oh; ++oy) {
          const long iy = static_cast<long>(oy) * d.stride - d.pad + static_cast<long>(ki);
          double* out = row + oy * d.ow;
          if (iy < 0 || iy >= static_cast<long>(d.h)) {
            std::fill(out, out + d.ow, 0.0);
            continue;
          }
          const double* src = x + (c * d.h + static_cast<std::size_t>(iy)) * d.w;
          for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const long ix = static_cast<long>(ox) * d.stride - d.pad + static_cast<long>(kj);
            out[ox] = (ix < 0 || ix >= static_cast<long>(d.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates cols into x.
void col2im(const double* cols, const ConvDims& d, double* x) {
  const std::size_t n = d.oh * d.ow;
  for (std::size_t c = 0; c < d.c; ++c) {
    for (std::size_t ki = 0; ki < d.kh; ++ki) {
      for (std::size_t kj = 0; kj < d.kw; ++kj) {
        const double* row = cols + ((c * d.kh + ki) * d.kw + kj) * n;
        for (std::size_t oy = 0; oy < d.oh; ++oy) {
          const long iy = static_cast<long>(oy) * d.stride - d.pad + static_cast<long>(ki);
          if (iy < 0 || iy >= static_cast<long>(d.h)) continue;
          double* dst = x + (c * d.h + static_cast<std::size_t>(iy)) * d.w;
          const double* in = row + oy * d.ow;
          for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const long ix = static_cast<long>(ox) * d.stride - d.pad + static_cast<long>(kj);
            if (ix >= 0 && ix < static_cast<long>(d.w)) dst[ix] += in[ox];
          }
        }
      }
    }
  }
}

void accumulate(detail::Node& n, const Buffer& g) {
  auto& dst = n.ensure_grad();
  for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t k = 0; k < shape.size(); ++k) {
    if (k) s += ", ";
    s += std::to_string(shape[k]);
  }
  return s + "]";
}

Tensor make_tensor(Shape shape, const std::vector<double>& values, bool requires_grad) {
  return make_tensor(std::move(shape), Buffer(values.begin(), values.end()), requires_grad);
}

Tensor make_tensor(Shape shape, Buffer values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) +
                     " values");
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = ad::numel(shape);
  return make_tensor(std::move(shape), Buffer(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = ad::numel(shape);
  return make_tensor(std::move(shape), Buffer(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return make_tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double v) { return make_tensor({}, Buffer{v}, false); }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::clone() const { return make_tensor(node_->shape, node_->value, node_->requires_grad); }

bool Tape::tracks(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  for (const Tensor* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + (loss.defined() ? shape_str(loss.shape()) : "<none>"));
  }
  if (ops_.empty()) throw NumericalError("backward: no recorded operations (tape empty or already consumed)");
  if (!loss.requires_grad()) throw NumericalError("backward: loss does not depend on any tracked tensor");
  auto& g = loss.node()->ensure_grad();
  g[0] += 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  ops_.clear();
}

// ---- elementwise ----

namespace {

// Result tensor of a tracked op, requiring grad iff tracked.
Tensor result(Shape shape, Buffer v, bool tracked) { return make_tensor(std::move(shape), std::move(v), tracked); }

}  // namespace

Tensor add(Tape& t, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Buffer v(a.numel());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = a.data()[k] + b.data()[k];
  const bool tr = t.tracks({&a, &b});
  Tensor out = result(a.shape(), std::move(v), tr);
  if (tr) {
    t.push([an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      if (an->requires_grad) accumulate(*an, on->grad);
      if (bn->requires_grad) accumulate(*bn, on->grad);
    });
  }
  return out;
}

Tensor sub(Tape& t, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Buffer v(a.numel());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = a.data()[k] - b.data()[k];
  const bool tr = t.tracks({&a, &b});
  Tensor out = result(a.shape(), std::move(v), tr);
  if (tr) {
    t.push([an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      if (an->requires_grad) accumulate(*an, on->grad);
      if (bn->requires_grad) {
        auto& g = bn->ensure_grad();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] -= on->grad[k];
      }
    });
  }
  return out;
}

Tensor mul(Tape& t, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Buffer v(a.numel());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = a.data()[k] * b.data()[k];
  const bool tr = t.tracks({&a, &b});
  Tensor out = result(a.shape(), std::move(v), tr);
  if (tr) {
    t.push([an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        auto& g = an->ensure_grad();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += on->grad[k] * bn->value[k];
      }
      if (bn->requires_grad) {
        auto& g = bn->ensure_grad();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += on->grad[k] * an->value[k];
      }
    });
  }
  return out;
}

Tensor scale(Tape& t, const Tensor& a, double s) {
  Buffer v(a.numel());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = a.data()[k] * s;
  const bool tr = t.tracks({&a});
  Tensor out = result(a.shape(), std::move(v), tr);
  if (tr) {
    t.push([an = a.node(), on = out.node(), s] {
      if (on->grad.empty()) return;
      auto& g = an->ensure_grad();
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += on->grad[k] * s;
    });
  }
  return out;
}

Tensor relu(Tape& t, const Tensor& a) {
  Buffer v(a.numel());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = a.data()[k] > 0.0 ? a.data()[k] : 0.0;
  const bool tr = t.tracks({&a});
  Tensor out = result(a.shape(), std::move(v), tr);
  if (tr) {
    t.push([an = a.node(), on = out.node()] {
      if (on->grad.empty()) return;
      auto& g = an->ensure_grad();
      for (std::size_t k = 0; k < g.size(); ++k) {
        if (an->value[k] > 0.0) g[k] += on->grad[k];
      }
    });
  }
  return out;
}

Tensor sum(Tape& t, const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  const bool tr = t.tracks({&a});
  Tensor out = result({}, {s}, tr);
  if (tr) {
    t.push([an = a.node(), on = out.node()] {
      if (on->grad.empty()) return;
      auto& g = an->ensure_grad();
      for (double& x : g) x += on->grad[0];
    });
  }
  return out;
}

Tensor mse(Tape& t, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  if (a.numel() == 0) throw ShapeError("mse: empty tensors");
  const auto n = static_cast<double>(a.numel());
  double s = 0.0;
  for (std::size_t k = 0; k < a.numel(); ++k) {
    const double d = a.data()[k] - b.data()[k];
    s += d * d;
  }
  const bool tr = t.tracks({&a, &b});
  Tensor out = result({}, {s / n}, tr);
  if (tr) {
    t.push([an = a.node(), bn = b.node(), on = out.node(), n] {
      if (on->grad.empty()) return;
      const double c = 2.0 * on->grad[0] / n;
      if (an->requires_grad) {
        auto& g = an->ensure_grad();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += c * (an->value[k] - bn->value[k]);
      }
      if (bn->requires_grad) {
        auto& g = bn->ensure_grad();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] -= c * (an->value[k] - bn->value[k]);
      }
    });
  }
  return out;
}

Tensor reshape(Tape& t, const Tensor& a, Shape shape) {
  if (ad::numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  const bool tr = t.tracks({&a});
  Tensor out = result(std::move(shape), a.node()->value, tr);
  if (tr) {
    t.push([an = a.node(), on = out.node()] {
      if (on->grad.empty()) return;
      accumulate(*an, on->grad);
    });
  }
  return out;
}

Tensor detach(const Tensor& a) { return make_tensor(a.shape(), a.values(), false); }

// ---- linear layers ----

Tensor dense(Tape& t, const Tensor& x, const Tensor& w, const Tensor* b) {
  require_rank(x, 1, "dense", "input");
  require_rank(w, 2, "dense", "weight");
  if (w.dim(1) != x.dim(0)) {
    throw ShapeError("dense: weight " + shape_str(w.shape()) + " cannot multiply input " + shape_str(x.shape()));
  }
  const std::size_t n_out = w.dim(0);
  const std::size_t n_in = w.dim(1);
  if (b && b->defined() && b->shape() != Shape{n_out}) {
    throw ShapeError("dense: bias " + shape_str(b->shape()) + " does not match weight " + shape_str(w.shape()));
  }
  Buffer v(n_out);
  Eigen::Map<Eigen::VectorXd> y(v.data(), static_cast<Eigen::Index>(n_out));
  const CMapMat W(w.data().data(), static_cast<Eigen::Index>(n_out), static_cast<Eigen::Index>(n_in));
  const Eigen::Map<const Eigen::VectorXd> X(x.data().data(), static_cast<Eigen::Index>(n_in));
  y.noalias() = W * X;
  const bool has_b = b && b->defined();
  if (has_b) {
    for (std::size_t k = 0; k < n_out; ++k) v[k] += b->data()[k];
  }
  const bool tr = t.tracks({&x, &w, b});
  Tensor out = result({n_out}, std::move(v), tr);
  if (tr) {
    t.push([xn = x.node(), wn = w.node(), bn = has_b ? b->node() : NodePtr{}, on = out.node(), n_out, n_in] {
      if (on->grad.empty()) return;
      const auto ro = static_cast<Eigen::Index>(n_out);
      const auto ri = static_cast<Eigen::Index>(n_in);
      const Eigen::Map<const Eigen::VectorXd> gy(on->grad.data(), ro);
      if (wn->requires_grad) {
        MapMat gw(wn->ensure_grad().data(), ro, ri);
        gw.noalias() += gy * Eigen::Map<const Eigen::VectorXd>(xn->value.data(), ri).transpose();
      }
      if (xn->requires_grad) {
        Eigen::Map<Eigen::VectorXd> gx(xn->ensure_grad().data(), ri);
        gx.noalias() += CMapMat(wn->value.data(), ro, ri).transpose() * gy;
      }
      if (bn && bn->requires_grad) accumulate(*bn, on->grad);
    });
  }
  return out;
}

Tensor conv2d(Tape& t, const Tensor& x, const Tensor& k, const Tensor* bias, ConvGeometry geom) {
  require_rank(x, 3, "conv2d", "input");
  require_rank(k, 4, "conv2d", "kernel");
  if (k.dim(1) != x.dim(0)) {
    throw ShapeError("conv2d: kernel " + shape_str(k.shape()) + " expects " + std::to_string(k.dim(1)) +
                     " input channels, input is " + shape_str(x.shape()));
  }
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), k.dim(2), k.dim(3), 0, 0, geom.stride, geom.padding};
  d.oh = conv_out(d.h, d.kh, geom.stride, geom.padding, "conv2d");
  d.ow = conv_out(d.w, d.kw, geom.stride, geom.padding, "conv2d");
  const std::size_t co = k.dim(0);
  const std::size_t kk = d.c * d.kh * d.kw;
  const std::size_t n = d.oh * d.ow;
  const bool has_b = bias && bias->defined();
  if (has_b && bias->shape() != Shape{co}) throw ShapeError("conv2d: bias shape " + shape_str(bias->shape()));

  Buffer cols(kk * n);
  im2col(x.data().data(), d, cols.data());
  Buffer v(co * n);
  MapMat Y(v.data(), static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(n));
  Y.noalias() = CMapMat(k.data().data(), static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(kk)) *
                CMapMat(cols.data(), static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(n));
  if (has_b) {
    for (std::size_t c = 0; c < co; ++c) {
      const double bc = bias->data()[c];
      for (std::size_t q = 0; q < n; ++q) v[c * n + q] += bc;
    }
  }
  const bool tr = t.tracks({&x, &k, bias});
  Tensor out = result({co, d.oh, d.ow}, std::move(v), tr);
  if (tr) {
    t.push([xn = x.node(), kn = k.node(), bn = has_b ? bias->node() : NodePtr{}, on = out.node(),
            cols = std::move(cols), d, co, kk, n] {
      if (on->grad.empty()) return;
      const auto eco = static_cast<Eigen::Index>(co);
      const auto ekk = static_cast<Eigen::Index>(kk);
      const auto en = static_cast<Eigen::Index>(n);
      const CMapMat gy(on->grad.data(), eco, en);
      if (kn->requires_grad) {
        MapMat gk(kn->ensure_grad().data(), eco, ekk);
        gk.noalias() += gy * CMapMat(cols.data(), ekk, en).transpose();
      }
      if (bn && bn->requires_grad) {
        auto& gb = bn->ensure_grad();
        for (std::size_t c = 0; c < co; ++c) gb[c] += gy.row(static_cast<Eigen::Index>(c)).sum();
      }
      if (xn->requires_grad) {
        RowMat gcols(ekk, en);
        gcols.noalias() = CMapMat(kn->value.data(), eco, ekk).transpose() * gy;
        col2im(gcols.data(), d, xn->ensure_grad().data());
      }
    });
  }
  return out;
}

Tensor conv_transpose2d(Tape& t, const Tensor& x, const Tensor& k, const Tensor* bias, ConvGeometry geom,
                        std::size_t out_h, std::size_t out_w) {
  require_rank(x, 3, "conv_transpose2d", "input");
  require_rank(k, 4, "conv_transpose2d", "kernel");
  if (k.dim(0) != x.dim(0)) {
    throw ShapeError("conv_transpose2d: kernel " + shape_str(k.shape()) + " expects " + std::to_string(k.dim(0)) +
                     " input channels, input is " + shape_str(x.shape()));
  }
  if (geom.stride <= 0 || geom.padding < 0) throw ShapeError("conv_transpose2d: invalid stride or padding");
  const std::size_t ci = x.dim(0);
  const std::size_t co = k.dim(1);
  const long nh = (static_cast<long>(x.dim(1)) - 1) * geom.stride - 2L * geom.padding + static_cast<long>(k.dim(2));
  const long nw = (static_cast<long>(x.dim(2)) - 1) * geom.stride - 2L * geom.padding + static_cast<long>(k.dim(3));
  if (nh <= 0 || nw <= 0) throw ShapeError("conv_transpose2d: empty output");
  // the image grid of the adjoint convolution
  ConvDims d{co, static_cast<std::size_t>(nh), static_cast<std::size_t>(nw), k.dim(2), k.dim(3), x.dim(1), x.dim(2),
             geom.stride, geom.padding};
  const std::size_t th = out_h == 0 ? d.h : out_h;
  const std::size_t tw = out_w == 0 ? d.w : out_w;
  if ((th != d.h && th != d.h + 1) || (tw != d.w && tw != d.w + 1)) {
    std::ostringstream os;
    os << "conv_transpose2d: target " << th << "x" << tw << " is not reachable from natural size " << d.h << "x"
       << d.w << " (allowed: natural or one more)";
    throw ShapeError(os.str());
  }
  const std::size_t kk = co * d.kh * d.kw;
  const std::size_t n = d.oh * d.ow;
  const bool has_b = bias && bias->defined();
  if (has_b && bias->shape() != Shape{co}) throw ShapeError("conv_transpose2d: bias shape " + shape_str(bias->shape()));

  RowMat cols(static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(n));
  cols.noalias() = CMapMat(k.data().data(), static_cast<Eigen::Index>(ci), static_cast<Eigen::Index>(kk)).transpose() *
                   CMapMat(x.data().data(), static_cast<Eigen::Index>(ci), static_cast<Eigen::Index>(n));
  Buffer nat(co * d.h * d.w, 0.0);
  col2im(cols.data(), d, nat.data());
  if (has_b) {
    for (std::size_t c = 0; c < co; ++c) {
      for (std::size_t q = 0; q < d.h * d.w; ++q) nat[c * d.h * d.w + q] += bias->data()[c];
    }
  }
  Buffer v;
  if (th == d.h && tw == d.w) {
    v = std::move(nat);
  } else {
    v.assign(co * th * tw, 0.0);
    for (std::size_t c = 0; c < co; ++c) {
      for (std::size_t y = 0; y < d.h; ++y) {
        std::copy_n(nat.data() + (c * d.h + y) * d.w, d.w, v.data() + (c * th + y) * tw);
      }
    }
  }
  const bool tr = t.tracks({&x, &k, bias});
  Tensor out = result({co, th, tw}, std::move(v), tr);
  if (tr) {
    t.push([xn = x.node(), kn = k.node(), bn = has_b ? bias->node() : NodePtr{}, on = out.node(), d, ci, co, kk, n,
            th, tw] {
      if (on->grad.empty()) return;
      // crop the gradient to the natural grid
      Buffer gnat(co * d.h * d.w);
      for (std::size_t c = 0; c < co; ++c) {
        for (std::size_t y = 0; y < d.h; ++y) {
          std::copy_n(on->grad.data() + (c * th + y) * tw, d.w, gnat.data() + (c * d.h + y) * d.w);
        }
      }
      if (bn && bn->requires_grad) {
        auto& gb = bn->ensure_grad();
        for (std::size_t c = 0; c < co; ++c) {
          double s = 0.0;
          for (std::size_t q = 0; q < d.h * d.w; ++q) s += gnat[c * d.h * d.w + q];
          gb[c] += s;
        }
      }
      const auto eci = static_cast<Eigen::Index>(ci);
      const auto ekk = static_cast<Eigen::Index>(kk);
      const auto en = static_cast<Eigen::Index>(n);
      RowMat gcols(ekk, en);
      im2col(gnat.data(), d, gcols.data());
      if (kn->requires_grad) {
        MapMat gk(kn->ensure_grad().data(), eci, ekk);
        gk.noalias() += CMapMat(xn->value.data(), eci, en) * gcols.transpose();
      }
      if (xn->requires_grad) {
        MapMat gx(xn->ensure_grad().data(), eci, en);
        gx.noalias() += CMapMat(kn->value.data(), eci, ekk) * gcols;
      }
    });
  }
  return out;
}

Tensor maxpool2d(Tape& t, const Tensor& x) {
  require_rank(x, 3, "maxpool2d", "input");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < 2 || w < 2) throw ShapeError("maxpool2d: input " + shape_str(x.shape()) + " is smaller than 2x2");
  const std::size_t oh = h / 2, ow = w / 2;
  Buffer v(c * oh * ow);
  std::vector<std::size_t> arg(v.size());
  const double* xs = x.data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (ch * h + 2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t q = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
            if (xs[q] > xs[best]) best = q;
          }
        }
        const std::size_t o = (ch * oh + oy) * ow + ox;
        v[o] = xs[best];
        arg[o] = best;
      }
    }
  }
  const bool tr = t.tracks({&x});
  Tensor out = result({c, oh, ow}, std::move(v), tr);
  if (tr) {
    t.push([xn = x.node(), on = out.node(), arg = std::move(arg)] {
      if (on->grad.empty()) return;
      auto& g = xn->ensure_grad();
      for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += on->grad[o];
    });
  }
  return out;
}

// ---- finite differences ----

GradCheckResult gradient_check(const std::function<Tensor(Tape&)>& loss_fn, std::vector<Tensor> params,
                               const GradCheckOptions& opts) {
  if (!(opts.h > 0.0)) throw ConfigError("gradient_check: h must be positive");
  for (Tensor& p : params) {
    if (!p.requires_grad()) throw ConfigError("gradient_check: every parameter must require a gradient");
    p.drop_grad();
  }
  Tape tape;
  {
    Tensor loss = loss_fn(tape);
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) {
    analytic.emplace_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                       : std::vector<double>(p.numel(), 0.0));
  }

  auto eval = [&] {
    NoGradScope ng(tape);
    const double f = loss_fn(tape).item();
    tape.clear();
    return f;
  };

  GradCheckResult res;
  const double f0 = eval();
  Rng rng(opts.seed, 0x4743);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    std::vector<std::size_t> coords(p.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_param > 0 && coords.size() > opts.max_coords_per_param) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(opts.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t q : coords) {
      double& v = p.data()[q];
      const double orig = v;
      double step = opts.h * std::max(1.0, std::abs(orig));
      double num = 0.0, best_gap = 0.0;
      for (int attempt = 0; attempt <= opts.kink_refinements; ++attempt, step *= 0.25) {
        const double vp = orig + step;
        const double vm = orig - step;
        v = vp;
        const double fp = eval();
        v = vm;
        const double fm = eval();
        v = orig;
        const double right = (fp - f0) / (vp - orig);
        const double left = (f0 - fm) / (orig - vm);
        // slack for the rounding noise of one-sided differences at this step
        const double noise = 64.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(f0)) / step;
        const double allowed = opts.kink_tol * std::max({std::abs(right), std::abs(left), opts.denom_floor}) + noise;
        const double gap = std::abs(right - left) / allowed;
        if (attempt == 0 || gap < best_gap) {
          best_gap = gap;
          num = (fp - fm) / (vp - vm);
        }
        if (gap <= 1.0) break;
        if (attempt == 0) ++res.coords_refined;
      }
      const double ana = analytic[pi][q];
      const double err = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), opts.denom_floor});
      ++res.coords_checked;
      if (res.coords_checked == 1 || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.param_index = pi;
        res.coord = q;
        res.analytic = ana;
        res.numeric = num;
      }
    }
  }
  return res;
}

}  // namespace kbub::ad
