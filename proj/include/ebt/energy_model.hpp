// ebt/energy_model.hpp
//
// Learnable energy E(z, y) over flattened action trajectories y, with a
// context encoder z = f(x) over a flattened observation window.
//
// Two backbones share one parameter registry: an MLP on concat(z, y), and a
// small transformer whose action-step tokens self-attend and cross-attend to
// context tokens carved out of z. The same network with a noise head
// (one output per action coordinate) is the diffusion baseline's denoiser.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ebt/rng.hpp"
#include "ebt/tensor.hpp"

namespace ebt::model {

using ad::Tensor;

enum class Backbone : std::uint32_t { mlp = 0, transformer = 1 };
enum class Head : std::uint32_t { energy = 0, noise = 1 };

std::string to_string(Backbone b);
Backbone backbone_from_string(const std::string& s);

struct Architecture {
  Backbone backbone = Backbone::mlp;
  Head head = Head::energy;
  std::size_t obs_dim = 6;
  std::size_t history = 2;
  std::size_t horizon = 8;
  std::size_t action_dim = 2;
  std::size_t embed_dim = 64;
  std::size_t encoder_hidden = 128;
  std::size_t mlp_width = 256;
  std::size_t mlp_depth = 3;
  std::size_t tf_width = 64;
  std::size_t tf_blocks = 2;
  std::size_t tf_heads = 4;
  std::size_t context_tokens = 4;
  // Scale applied to the fan-in init of the scalar energy head.
  double head_init_scale = 0.01;

  std::size_t window_size() const { return history * obs_dim; }
  std::size_t action_size() const { return horizon * action_dim; }
  std::size_t output_size() const { return head == Head::energy ? 1 : action_size(); }
  void validate() const;
  bool operator==(const Architecture&) const = default;
};

// h x d_o states, row-major, environment units.
struct ObservationWindow {
  std::size_t history = 0;
  std::size_t obs_dim = 0;
  std::vector<double> states;
};

// n x d_a actions, row-major.
struct ActionTrajectory {
  std::size_t horizon = 0;
  std::size_t action_dim = 0;
  std::vector<double> actions;
  bool normalized = false;

  double at(std::size_t step, std::size_t dim) const { return actions[step * action_dim + dim]; }
};

// Raised when a forward pass produces a non-finite activation.
class LayerError : public std::runtime_error {
 public:
  LayerError(std::size_t layer, const std::string& name, const std::string& cause);
  std::size_t layer() const { return layer_; }

 private:
  std::size_t layer_;
};

// What the sampler and inference need from an energy. Batched: windows are
// [B, window_size], z is [B, d_z], y is [B, action_size]; energy returns [B].
class EnergyFunction {
 public:
  virtual ~EnergyFunction() = default;
  virtual Tensor encode(const Tensor& windows) const = 0;
  virtual Tensor energy(const Tensor& z, const Tensor& y) const = 0;
  virtual std::size_t window_size() const = 0;
  virtual std::size_t action_size() const = 0;
};

struct EnergyAndGrad {
  Tensor energy;  // [B]
  Tensor grad;    // [B, action_size], d(sum E)/dy
};

// dE/dy for every row. With create_graph the gradient stays differentiable
// with respect to the parameters (and z), for use inside a training loss.
EnergyAndGrad energy_grad(const EnergyFunction& f, const Tensor& z, const Tensor& y,
                          bool create_graph);

// E = 1/2 ||y - mu||^2. A parameter-free test double with a known minimum.
class QuadraticEnergy final : public EnergyFunction {
 public:
  QuadraticEnergy(std::vector<double> mu, std::size_t window_size);
  Tensor encode(const Tensor& windows) const override;
  Tensor energy(const Tensor& z, const Tensor& y) const override;
  std::size_t window_size() const override { return window_size_; }
  std::size_t action_size() const override { return mu_.numel(); }
  const Tensor& mu() const { return mu_; }

 private:
  Tensor mu_;
  std::size_t window_size_;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

class EnergyModel final : public EnergyFunction {
 public:
  // Fan-in scaled Gaussian weights, zero biases.
  EnergyModel(const Architecture& arch, Rng& rng);
  // Takes ownership of the given tensors; names and shapes must match `arch`.
  EnergyModel(const Architecture& arch, const std::vector<NamedTensor>& params);

  // Deep copies: parameters are never shared between instances.
  EnergyModel(const EnergyModel& other);
  EnergyModel& operator=(const EnergyModel& other);
  EnergyModel(EnergyModel&&) noexcept = default;
  EnergyModel& operator=(EnergyModel&&) noexcept = default;

  Tensor encode(const Tensor& windows) const override;
  Tensor energy(const Tensor& z, const Tensor& y) const override;
  // Raw head output, [B, output_size].
  Tensor forward(const Tensor& z, const Tensor& y) const;

  std::size_t window_size() const override { return arch_.window_size(); }
  std::size_t action_size() const override { return arch_.action_size(); }
  const Architecture& arch() const { return arch_; }

  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::vector<Tensor> parameter_tensors() const;
  std::size_t parameter_count() const;
  const Tensor& param(const std::string& name) const;

 private:
  void register_shapes();
  Tensor encode_impl(const Tensor& windows) const;
  Tensor mlp_forward(const Tensor& z, const Tensor& y) const;
  Tensor transformer_forward(const Tensor& z, const Tensor& y) const;
  Tensor attention(const Tensor& q_in, const Tensor& kv_in, const std::string& prefix) const;

  Architecture arch_;
  std::vector<NamedTensor> params_;
  std::vector<std::pair<std::string, ad::Shape>> layout_;
  std::vector<double> init_std_;
};

// Builds [B, window_size] / [B, action_size] tensors from typed records.
Tensor stack_windows(const std::vector<ObservationWindow>& windows);
Tensor stack_actions(const std::vector<ActionTrajectory>& trajectories);

// ---------------------------------------------------------------------------
// Checkpoint file (all integers and floats little-endian):
//
//   magic      8 bytes  "EBTCKPT1"
//   version    u32      1
//   arch       14 x u32 backbone, head, obs_dim, history, horizon, action_dim,
//                       embed_dim, encoder_hidden, mlp_width, mlp_depth,
//                       tf_width, tf_blocks, tf_heads, context_tokens
//              f64      head_init_scale
//   count      u32      number of tensors (parameters, then extras)
//   table      count x { u32 name_len, name bytes, u32 rank, rank x u64 dim }
//   payload    f64 values of every tensor, in table order
//
// Extras are named tensors stored alongside the weights (the harness keeps
// the action normalization statistics there, under "extra/...").

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Architecture arch;
  std::vector<NamedTensor> params;
  std::vector<NamedTensor> extras;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> encode_checkpoint(const EnergyModel& model,
                                            const std::vector<NamedTensor>& extras = {});
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::filesystem::path& path, const EnergyModel& model,
                     const std::vector<NamedTensor>& extras = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ebt::model
