#pragma once

// Layers built on the tensor engine, named parameter lists, Adam and the
// parameter checkpoint format.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "kbub/random.hpp"
#include "kbub/tensor.hpp"

namespace kbub::ad {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParameterList = std::vector<NamedTensor>;

// Uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)].
void init_fan_in_uniform(Tensor& t, std::size_t fan_in, Rng& rng);

struct Linear {
  Tensor weight;  // [n_out, n_in]
  Tensor bias;    // [n_out]; undefined for a bias-free layer

  Linear() = default;
  Linear(std::size_t n_in, std::size_t n_out, bool with_bias, Rng& rng);
  Tensor forward(Tape& t, const Tensor& x) const;
  void collect(ParameterList& out, const std::string& prefix) const;
};

struct Conv2d {
  Tensor weight;  // [C_out, C_in, k, k]
  Tensor bias;    // [C_out]
  ConvGeometry geom;

  Conv2d() = default;
  Conv2d(std::size_t c_in, std::size_t c_out, std::size_t kernel, ConvGeometry geom, Rng& rng);
  Tensor forward(Tape& t, const Tensor& x) const;
  void collect(ParameterList& out, const std::string& prefix) const;
};

struct ConvTranspose2d {
  Tensor weight;  // [C_in, C_out, k, k]
  Tensor bias;    // [C_out]
  ConvGeometry geom{2, 0};

  ConvTranspose2d() = default;
  ConvTranspose2d(std::size_t c_in, std::size_t c_out, std::size_t kernel, ConvGeometry geom, Rng& rng);
  Tensor forward(Tape& t, const Tensor& x, std::size_t out_h = 0, std::size_t out_w = 0) const;
  void collect(ParameterList& out, const std::string& prefix) const;
};

// relu(conv2(relu(conv1(x))) + skip(x)), 3x3 convolutions with padding 1;
// skip is the identity or a 1x1 convolution when the channel count changes.
struct ResidualBlock {
  Conv2d conv1;
  Conv2d conv2;
  std::optional<Conv2d> skip;

  ResidualBlock() = default;
  ResidualBlock(std::size_t c_in, std::size_t c_out, Rng& rng);
  Tensor forward(Tape& t, const Tensor& x) const;
  void collect(ParameterList& out, const std::string& prefix) const;
};

void zero_grads(const ParameterList& params);
std::size_t parameter_count(const ParameterList& params);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(ParameterList params, AdamConfig config);

  // One update from the accumulated gradients. Parameters without a gradient
  // buffer are skipped. Throws NumericalError naming the parameter when a
  // gradient is not finite; no parameter is modified in that case.
  void step();
  void zero_grad() { zero_grads(params_); }

  std::uint64_t steps() const { return t_; }
  const AdamConfig& config() const { return config_; }
  const ParameterList& parameters() const { return params_; }

  // Moments as "m/<name>", "v/<name>" plus a one-element "step" tensor.
  ParameterList state() const;
  void load_state(const ParameterList& state);

 private:
  ParameterList params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::uint64_t t_ = 0;
};

// ---- checkpoint format ----
// "KPRM" | version u32 | count u32 | per tensor: name length u16, name bytes,
// rank u8, dims u32 x rank, f64 payload | CRC-32 of all preceding bytes.
// Little-endian throughout.

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_parameters(const ParameterList& params);
ParameterList decode_parameters(std::span<const std::uint8_t> bytes);
void save_parameters(const std::filesystem::path& path, const ParameterList& params);
ParameterList load_parameters(const std::filesystem::path& path);

// Copies values into `dst` by name; names and shapes must match exactly.
void assign_parameters(const ParameterList& dst, const ParameterList& src);

}  // namespace kbub::ad
