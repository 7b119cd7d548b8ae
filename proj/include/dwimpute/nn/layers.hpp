#pragma once

// Layers with explicit forward/backward passes. Each forward caches what its
// backward needs; a layer instance is therefore used once per forward pass.
// Backward accumulates into Param::grad and returns the input gradient.

#include <cstdint>
#include <string>
#include <vector>

#include "dwimpute/nn/tensor.hpp"
#include "dwimpute/rng.hpp"

namespace dwimpute::nn {

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, Shape shape) : name(std::move(n)), value(shape), grad(shape) {}
  void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
using ParamList = std::vector<Param<T>*>;

template <typename T>
void zero_grads(const ParamList<T>& params) {
  for (auto* p : params) p->zero_grad();
}

template <typename T>
std::int64_t count_parameters(const ParamList<T>& params) {
  std::int64_t n = 0;
  for (const auto* p : params) n += p->value.numel();
  return n;
}

/// PyTorch-style default init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
void uniform_fan_in(Tensor<T>& t, std::int64_t fan_in, Rng& rng);

template <typename T>
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(const std::string& name, int in_channels, int out_channels, int kernel, int stride, int pad, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x);
  /// Returns an empty tensor when input gradients are disabled.
  Tensor<T> backward(const Tensor<T>& dy);

  void set_input_grad(bool on) { input_grad_ = on; }
  void zero_init();
  void collect(ParamList<T>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

 private:
  int in_ = 0, out_ = 0, kernel_ = 3, stride_ = 1, pad_ = 1;
  bool input_grad_ = true;
  Param<T> weight_, bias_;
  Tensor<T> x_;
};

template <typename T>
class GroupNorm {
 public:
  GroupNorm() = default;
  /// The effective group count is gcd(groups, channels).
  GroupNorm(const std::string& name, int channels, int groups, double eps = 1e-5);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamList<T>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }
  int groups() const { return groups_; }

 private:
  int channels_ = 0, groups_ = 1;
  double eps_ = 1e-5;
  Param<T> gamma_, beta_;
  Tensor<T> x_, mean_, rstd_;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in_features, int out_features, Rng& rng);

  /// x: (N, in) -> (N, out).
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamList<T>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  int in_ = 0, out_ = 0;
  Param<T> weight_, bias_;
  Tensor<T> x_;
};

template <typename T>
class SiLU {
 public:
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);

 private:
  Tensor<T> x_;
};

template <typename T>
class ReLU {
 public:
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);

 private:
  Tensor<T> y_;
};

template <typename T>
class MaxPool3d {
 public:
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);

 private:
  Shape in_shape_;
  std::vector<std::int64_t> argmax_;
};

template <typename T>
class UpsampleNearest2 {
 public:
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);

 private:
  Shape in_shape_;
};

/// (N, C, ...) -> (N, C)
template <typename T>
class GlobalAvgPool {
 public:
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);

 private:
  Shape in_shape_;
};

/// Inverted dropout; identity when not training or rate == 0.
template <typename T>
class Dropout {
 public:
  Dropout() = default;
  explicit Dropout(double rate) : rate_(rate) {}

  Tensor<T> forward(const Tensor<T>& x, bool training, Rng& rng);
  Tensor<T> backward(const Tensor<T>& dy);

 private:
  double rate_ = 0.0;
  std::vector<T> mask_;
};

/// Single-head self-attention over the flattened spatial positions, with a
/// pre-norm and a residual connection: y = x + proj(attn(norm(x))).
template <typename T>
class SpatialSelfAttention {
 public:
  SpatialSelfAttention() = default;
  SpatialSelfAttention(const std::string& name, int channels, int groups, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamList<T>& out);

 private:
  int channels_ = 0;
  GroupNorm<T> norm_;
  Conv3d<T> q_, k_, v_, proj_;
  Tensor<T> q_out_, k_out_, v_out_, attn_;  // attn_: (N, S, S) softmax rows
};

/// Channel concatenation of (N, Ca, ...) and (N, Cb, ...).
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// Inverse of concat_channels for gradients.
template <typename T>
void split_channels(const Tensor<T>& d, std::int64_t ca, Tensor<T>& da, Tensor<T>& db);

}  // namespace dwimpute::nn
