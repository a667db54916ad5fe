#include "kbub/nn.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include "kbub/byte_io.hpp"
#include "kbub/dataset.hpp"

namespace kbub::ad {

void init_fan_in_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
}

Linear::Linear(std::size_t n_in, std::size_t n_out, bool with_bias, Rng& rng) {
  weight = Tensor::zeros({n_out, n_in}, true);
  init_fan_in_uniform(weight, n_in, rng);
  if (with_bias) {
    bias = Tensor::zeros({n_out}, true);
    init_fan_in_uniform(bias, n_in, rng);
  }
}

Tensor Linear::forward(Tape& t, const Tensor& x) const { return dense(t, x, weight, bias.defined() ? &bias : nullptr); }

void Linear::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

Conv2d::Conv2d(std::size_t c_in, std::size_t c_out, std::size_t kernel, ConvGeometry g, Rng& rng) : geom(g) {
  const std::size_t fan_in = c_in * kernel * kernel;
  weight = Tensor::zeros({c_out, c_in, kernel, kernel}, true);
  bias = Tensor::zeros({c_out}, true);
  init_fan_in_uniform(weight, fan_in, rng);
  init_fan_in_uniform(bias, fan_in, rng);
}

Tensor Conv2d::forward(Tape& t, const Tensor& x) const { return conv2d(t, x, weight, &bias, geom); }

void Conv2d::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

ConvTranspose2d::ConvTranspose2d(std::size_t c_in, std::size_t c_out, std::size_t kernel, ConvGeometry g, Rng& rng)
    : geom(g) {
  // each output pixel of a stride-k, k x k transposed conv sees c_in inputs
  const std::size_t fan_in = c_in * kernel * kernel / static_cast<std::size_t>(g.stride * g.stride);
  weight = Tensor::zeros({c_in, c_out, kernel, kernel}, true);
  bias = Tensor::zeros({c_out}, true);
  init_fan_in_uniform(weight, std::max<std::size_t>(fan_in, 1), rng);
  init_fan_in_uniform(bias, std::max<std::size_t>(fan_in, 1), rng);
}

Tensor ConvTranspose2d::forward(Tape& t, const Tensor& x, std::size_t out_h, std::size_t out_w) const {
  return conv_transpose2d(t, x, weight, &bias, geom, out_h, out_w);
}

void ConvTranspose2d::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

ResidualBlock::ResidualBlock(std::size_t c_in, std::size_t c_out, Rng& rng)
    : conv1(c_in, c_out, 3, {1, 1}, rng), conv2(c_out, c_out, 3, {1, 1}, rng) {
  if (c_in != c_out) skip.emplace(c_in, c_out, 1, ConvGeometry{1, 0}, rng);
}

Tensor ResidualBlock::forward(Tape& t, const Tensor& x) const {
  const Tensor h = relu(t, conv1.forward(t, x));
  const Tensor y = conv2.forward(t, h);
  const Tensor s = skip ? skip->forward(t, x) : x;
  return relu(t, add(t, y, s));
}

void ResidualBlock::collect(ParameterList& out, const std::string& prefix) const {
  conv1.collect(out, prefix + ".conv1");
  conv2.collect(out, prefix + ".conv2");
  if (skip) skip->collect(out, prefix + ".skip");
}

void zero_grads(const ParameterList& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

std::size_t parameter_count(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

// ---- Adam ----

Adam::Adam(ParameterList params, AdamConfig config) : params_(std::move(params)), config_(config) {
  if (!(config_.lr > 0.0) || !(config_.beta1 >= 0.0 && config_.beta1 < 1.0) ||
      !(config_.beta2 >= 0.0 && config_.beta2 < 1.0) || !(config_.eps > 0.0)) {
    throw ConfigError("adam: invalid hyperparameters");
  }
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void Adam::step() {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericalError("adam: non-finite gradient in parameter '" + p.name + "'");
    }
  }
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor p = params_[i].tensor;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      const double mh = m[k] / c1;
      const double vh = v[k] / c2;
      w[k] -= config_.lr * mh / (std::sqrt(vh) + config_.eps);
    }
  }
}

ParameterList Adam::state() const {
  ParameterList out;
  out.push_back({"step", Tensor::from({1}, {static_cast<double>(t_)})});
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.push_back({"m/" + params_[i].name, Tensor::from(params_[i].tensor.shape(), m_[i])});
    out.push_back({"v/" + params_[i].name, Tensor::from(params_[i].tensor.shape(), v_[i])});
  }
  return out;
}

void Adam::load_state(const ParameterList& state) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& s : state) by_name[s.name] = &s.tensor;
  auto find = [&](const std::string& name, const Shape& shape) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("optimizer state: missing '" + name + "'");
    if (it->second->shape() != shape) {
      throw ShapeError("optimizer state: '" + name + "' has shape " + shape_str(it->second->shape()) + ", expected " +
                       shape_str(shape));
    }
    return *it->second;
  };
  const double step = find("step", {1}).values()[0];
  if (!(step >= 0.0) || step != std::floor(step)) throw DataError("optimizer state: bad step counter");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i] = find("m/" + params_[i].name, params_[i].tensor.shape()).values();
    v_[i] = find("v/" + params_[i].name, params_[i].tensor.shape()).values();
  }
  t_ = static_cast<std::uint64_t>(step);
}

// ---- checkpoints ----

namespace {
constexpr char kMagic[4] = {'K', 'P', 'R', 'M'};
}

std::vector<std::uint8_t> encode_parameters(const ParameterList& params) {
  ByteWriter w;
  w.str(std::string(kMagic, 4));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    if (p.name.size() > 0xFFFF) throw ConfigError("checkpoint: parameter name too long");
    if (p.tensor.rank() > 0xFF) throw ConfigError("checkpoint: rank too large");
    w.u16(static_cast<std::uint16_t>(p.name.size()));
    w.str(p.name);
    w.u8(static_cast<std::uint8_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : p.tensor.data()) w.f64(v);
  }
  w.u32(crc32(w.data()));
  return std::move(w).take();
}

ParameterList decode_parameters(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::string(reinterpret_cast<const char*>(bytes.data()), 4) != std::string(kMagic, 4)) {
    throw DataError("checkpoint: bad magic (expected \"KPRM\")");
  }
  if (bytes.size() < 16) throw DataError("checkpoint: truncated");
  const std::uint32_t stored = static_cast<std::uint32_t>(bytes[bytes.size() - 4]) |
                               static_cast<std::uint32_t>(bytes[bytes.size() - 3]) << 8 |
                               static_cast<std::uint32_t>(bytes[bytes.size() - 2]) << 16 |
                               static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24;
  const auto body = bytes.first(bytes.size() - 4);
  ByteReader r(body, "checkpoint");
  r.skip(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  if (crc32(body) != stored) throw DataError("checkpoint: checksum mismatch");
  const std::uint32_t count = r.u32();
  ParameterList out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16();
    std::string name = r.str(len);
    const std::uint8_t rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    const std::size_t n = numel(shape);
    if (r.remaining() / 8 < n) throw DataError("checkpoint: truncated payload for '" + name + "'");
    std::vector<double> v(n);
    for (double& x : v) x = r.f64();
    out.push_back({std::move(name), Tensor::from(std::move(shape), std::move(v), true)});
  }
  if (r.remaining() != 0) throw DataError("checkpoint: trailing bytes");
  return out;
}

void save_parameters(const std::filesystem::path& path, const ParameterList& params) {
  write_file(path, encode_parameters(params));
}

ParameterList load_parameters(const std::filesystem::path& path) { return decode_parameters(read_file(path)); }

void assign_parameters(const ParameterList& dst, const ParameterList& src) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& s : src) by_name[s.name] = &s.tensor;
  if (by_name.size() != dst.size() || src.size() != dst.size()) {
    std::ostringstream os;
    os << "parameters: expected " << dst.size() << " tensors, checkpoint has " << src.size();
    throw ShapeError(os.str());
  }
  for (const auto& d : dst) {
    auto it = by_name.find(d.name);
    if (it == by_name.end()) throw ShapeError("parameters: checkpoint lacks '" + d.name + "'");
    if (it->second->shape() != d.tensor.shape()) {
      throw ShapeError("parameters: '" + d.name + "' has shape " + shape_str(it->second->shape()) + ", model expects " +
                       shape_str(d.tensor.shape()));
    }
  }
  for (const auto& d : dst) {
    Tensor t = d.tensor;
    const auto& v = by_name[d.name]->values();
    std::copy(v.begin(), v.end(), t.data().begin());
  }
}

}  // namespace kbub::ad
