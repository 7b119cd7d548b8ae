#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dwimpute/nn/layers.hpp"
#include "dwimpute/volume.hpp"
#include "json.hpp"

namespace dwimpute::classifier {

enum class Modality { T1, DWI, Both };

/// "T1", "DWI", "T1+DWI".
std::string to_string(Modality m);
/// Accepts the display names and the CLI spellings t1, dwi, both (any case).
Modality modality_from_string(const std::string& s);

struct BackboneSpec {
  std::array<int, 5> block_widths{32, 64, 128, 256, 256};
  int head_width = 64;
  int width_scale = 1;
  double dropout_rate = 0.2;
  int norm_groups = 8;
  int num_classes = 3;
  int conv_kernel = 3;
  Dims input_dims{32, 32, 32};

  std::array<int, 5> widths() const;
  int head() const;
  /// Whether block i max-pools. A block pools only while every axis stays
  /// >= 2 afterwards.
  std::array<bool, 5> pooling() const;
  /// Throws std::invalid_argument on invariant violations, including an
  /// input too small for a single pooling step.
  void validate() const;

  bool operator==(const BackboneSpec&) const = default;
};

void to_json(nlohmann::json& j, const BackboneSpec& s);
void from_json(const nlohmann::json& j, BackboneSpec& s);

/// Five [conv3 -> group norm -> max pool -> ReLU] blocks, then
/// conv1 -> group norm -> ReLU -> global average pool. (N, 1, D, H, W) -> (N, head).
template <typename T>
class Trunk {
 public:
  Trunk(const std::string& name, const BackboneSpec& spec, Rng& rng);

  nn::Tensor<T> forward(const nn::Tensor<T>& x);
  nn::Tensor<T> backward(const nn::Tensor<T>& dy);
  void collect(nn::ParamList<T>& out);

 private:
  std::array<bool, 5> pool_{};
  std::array<nn::Conv3d<T>, 5> conv_;
  std::array<nn::GroupNorm<T>, 5> norm_;
  std::array<nn::MaxPool3d<T>, 5> maxpool_;
  std::array<nn::ReLU<T>, 5> relu_;
  nn::Conv3d<T> head_conv_;
  nn::GroupNorm<T> head_norm_;
  nn::ReLU<T> head_relu_;
  nn::GlobalAvgPool<T> gap_;
};

/// Unimodal: trunk -> dropout -> affine. Bimodal: one trunk per modality,
/// each followed by dropout, features concatenated -> affine. Produces
/// logits; probabilities come from softmax().
template <typename T>
class ClassifierNet {
 public:
  ClassifierNet(const BackboneSpec& spec, Modality modality, std::uint64_t seed);

  /// `b` is the DWI input for the bimodal model and ignored otherwise.
  nn::Tensor<T> forward(const nn::Tensor<T>& a, const nn::Tensor<T>* b, bool training, Rng& rng);
  void backward(const nn::Tensor<T>& dlogits);

  nn::ParamList<T> parameters();
  const BackboneSpec& spec() const { return spec_; }
  Modality modality() const { return modality_; }

 private:
  BackboneSpec spec_;
  Modality modality_;
  std::vector<Trunk<T>> trunks_;
  std::vector<nn::Dropout<T>> dropouts_;
  nn::Linear<T> fc_;
};

/// Row-wise softmax of (N, K) logits, computed in double.
std::vector<double> softmax_rows(std::span<const double> logits, int k);

/// Mean categorical cross-entropy of (N, K) logits against labels; fills
/// `dlogits` with the gradient of the mean.
template <typename T>
double cross_entropy(const nn::Tensor<T>& logits, std::span<const int> labels, nn::Tensor<T>* dlogits);

}  // namespace dwimpute::classifier
