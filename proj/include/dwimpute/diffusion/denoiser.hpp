#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "dwimpute/nn/layers.hpp"
#include "dwimpute/volume.hpp"
#include "json.hpp"

namespace dwimpute::diffusion {

/// Architecture of the conditional 3D residual U-Net. Channel widths and the
/// time-embedding width are divided by width_scale; width_scale = 1 is the
/// full-size (128, 128, 256) network.
struct DenoiserSpec {
  std::array<int, 3> channel_widths{128, 128, 256};
  int width_scale = 1;
  bool attention_at_final_encoder_stage = true;
  int in_channels = 2;
  int out_channels = 1;
  int residual_blocks_per_stage = 2;
  int norm_groups = 8;
  int time_embedding_dim = 512;
  Dims input_dims{16, 16, 16};

  std::array<int, 3> widths() const;
  int time_dim() const;
  /// Throws std::invalid_argument on invariant violations.
  void validate() const;

  bool operator==(const DenoiserSpec&) const = default;
};

void to_json(nlohmann::json& j, const DenoiserSpec& s);
void from_json(const nlohmann::json& j, DenoiserSpec& s);

/// Sinusoidal timestep embedding, [cos(t f_i), sin(t f_i)] with
/// f_i = exp(-ln(10000) i / (dim / 2)). Returns (N, dim).
template <typename T>
nn::Tensor<T> timestep_embedding(std::span<const int> timesteps, int dim);

template <typename T>
class ResidualBlock {
 public:
  ResidualBlock(const std::string& name, int in_channels, int out_channels, int time_dim, int groups, Rng& rng);

  /// temb_act: SiLU of the time embedding, (N, time_dim).
  nn::Tensor<T> forward(const nn::Tensor<T>& x, const nn::Tensor<T>& temb_act);
  /// Adds the time-embedding gradient into d_temb_act.
  nn::Tensor<T> backward(const nn::Tensor<T>& dy, nn::Tensor<T>& d_temb_act);
  void collect(nn::ParamList<T>& out);

 private:
  nn::GroupNorm<T> norm1_;
  nn::SiLU<T> act1_;
  nn::Conv3d<T> conv1_;
  nn::Linear<T> time_proj_;
  nn::GroupNorm<T> norm2_;
  nn::SiLU<T> act2_;
  nn::Conv3d<T> conv2_;
  std::optional<nn::Conv3d<T>> skip_;
};

/// Noise predictor: (N, 2, D, H, W) volumes [T1, noisy FA] plus N timesteps
/// -> (N, 1, D, H, W) predicted noise. Three stages, stride-2 convolutions
/// between them, self-attention at the deepest stage and its decoder mirror,
/// nearest + conv upsampling and concatenative skips.
template <typename T>
class Denoiser {
 public:
  Denoiser(const DenoiserSpec& spec, std::uint64_t seed);
  ~Denoiser();
  Denoiser(Denoiser&&) noexcept;
  Denoiser& operator=(Denoiser&&) noexcept;

  nn::Tensor<T> forward(const nn::Tensor<T>& x, std::span<const int> timesteps);
  void backward(const nn::Tensor<T>& dy);

  nn::ParamList<T> parameters();
  std::int64_t num_parameters();
  const DenoiserSpec& spec() const { return spec_; }

 private:
  struct Impl;
  DenoiserSpec spec_;
  std::unique_ptr<Impl> impl_;
};

}  // namespace dwimpute::diffusion
