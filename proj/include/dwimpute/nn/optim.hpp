#pragma once

#include <cmath>
#include <vector>

#include "dwimpute/nn/layers.hpp"

namespace dwimpute::nn {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled (AdamW) decay: p <- p * (1 - lr * weight_decay) before the
  /// Adam update. Zero gives plain Adam.
  double weight_decay = 0.0;
};

template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.numel(), 0.0);
      v_.emplace_back(p->value.numel(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, t_);
    const double bc2 = 1.0 - std::pow(opts_.beta2, t_);
    const double step_size = opts_.learning_rate / bc1;
    const double decay = 1.0 - opts_.learning_rate * opts_.weight_decay;
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& value = params_[k]->value;
      const auto& grad = params_[k]->grad;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::int64_t i = 0; i < value.numel(); ++i) {
        const double g = grad[i];
        m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g;
        v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g * g;
        double p = value[i];
        if (opts_.weight_decay != 0.0) p *= decay;
        p -= step_size * m[i] / (std::sqrt(v[i] / bc2) + opts_.eps);
        value[i] = static_cast<T>(p);
      }
    }
  }

  void zero_grad() { zero_grads(params_); }
  long steps() const { return t_; }

 private:
  ParamList<T> params_;
  AdamOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace dwimpute::nn
