#include "dwimpute/nn/layers.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <numeric>

#include "dwimpute/nn/kernels.hpp"

namespace dwimpute::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require_rank5(const Shape& s, const char* who) {
  if (s.size() != 5) throw std::invalid_argument(std::string(who) + ": expected (N, C, D, H, W), got " + shape_string(s));
}

}  // namespace

template <typename T>
void uniform_fan_in(Tensor<T>& t, std::int64_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.values()) v = static_cast<T>(bound * (2.0 * uniform01(rng) - 1.0));
}

// ---- Conv3d -----------------------------------------------------------------

template <typename T>
Conv3d<T>::Conv3d(const std::string& name, int in_channels, int out_channels, int kernel, int stride, int pad,
                  Rng& rng)
    : in_(in_channels),
      out_(out_channels),
      kernel_(kernel),
      stride_(stride),
      pad_(pad),
      weight_(name + ".weight", {out_channels, in_channels, kernel, kernel, kernel}),
      bias_(name + ".bias", {out_channels}) {
  const std::int64_t fan_in = static_cast<std::int64_t>(in_channels) * kernel * kernel * kernel;
  uniform_fan_in(weight_.value, fan_in, rng);
  uniform_fan_in(bias_.value, fan_in, rng);
}

template <typename T>
void Conv3d<T>::zero_init() {
  weight_.value.fill(T(0));
  bias_.value.fill(T(0));
}

template <typename T>
Tensor<T> Conv3d<T>::forward(const Tensor<T>& x) {
  require_rank5(x.shape(), "Conv3d");
  if (x.dim(1) != in_) throw std::invalid_argument("Conv3d: channel mismatch in " + weight_.name);
  kernels::Conv3dGeometry g{x.dim(0), in_, out_, x.dim(2), x.dim(3), x.dim(4), kernel_, stride_, pad_};
  Tensor<T> y({g.batch, g.out_channels, g.out_d(), g.out_h(), g.out_w()});
  kernels::conv3d_forward(g, x.data(), weight_.value.data(), bias_.value.data(), y.data());
  x_ = x;
  return y;
}

template <typename T>
Tensor<T> Conv3d<T>::backward(const Tensor<T>& dy) {
  kernels::Conv3dGeometry g{x_.dim(0), in_, out_, x_.dim(2), x_.dim(3), x_.dim(4), kernel_, stride_, pad_};
  Tensor<T> dx;
  if (input_grad_) dx = Tensor<T>(x_.shape());
  kernels::conv3d_backward(g, x_.data(), weight_.value.data(), dy.data(), input_grad_ ? dx.data() : nullptr,
                           weight_.grad.data(), bias_.grad.data());
  return dx;
}

// ---- GroupNorm --------------------------------------------------------------

template <typename T>
GroupNorm<T>::GroupNorm(const std::string& name, int channels, int groups, double eps)
    : channels_(channels),
      groups_(std::gcd(groups, channels)),
      eps_(eps),
      gamma_(name + ".weight", {channels}),
      beta_(name + ".bias", {channels}) {
  gamma_.value.fill(T(1));
}

template <typename T>
Tensor<T> GroupNorm<T>::forward(const Tensor<T>& x) {
  if (x.rank() < 2 || x.dim(1) != channels_) throw std::invalid_argument("GroupNorm: channel mismatch");
  const std::int64_t n = x.dim(0);
  Tensor<T> y(x.shape());
  mean_ = Tensor<T>({n, groups_});
  rstd_ = Tensor<T>({n, groups_});
  kernels::group_norm_forward(n, channels_, x.spatial(), groups_, x.data(), gamma_.value.data(), beta_.value.data(),
                              eps_, y.data(), mean_.data(), rstd_.data());
  x_ = x;
  return y;
}

template <typename T>
Tensor<T> GroupNorm<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dx(x_.shape());
  kernels::group_norm_backward(x_.dim(0), channels_, x_.spatial(), groups_, x_.data(), gamma_.value.data(),
                               mean_.data(), rstd_.data(), dy.data(), dx.data(), gamma_.grad.data(), beta_.grad.data());
  return dx;
}

// ---- Linear -----------------------------------------------------------------

template <typename T>
Linear<T>::Linear(const std::string& name, int in_features, int out_features, Rng& rng)
    : in_(in_features),
      out_(out_features),
      weight_(name + ".weight", {out_features, in_features}),
      bias_(name + ".bias", {out_features}) {
  uniform_fan_in(weight_.value, in_features, rng);
  uniform_fan_in(bias_.value, in_features, rng);
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) {
  if (x.rank() != 2 || x.dim(1) != in_) throw std::invalid_argument("Linear: expected (N, " + std::to_string(in_) + ")");
  const std::int64_t n = x.dim(0);
  Tensor<T> y({n, out_});
  for (std::int64_t s = 0; s < n; ++s)
    for (int o = 0; o < out_; ++o) {
      double acc = bias_.value[o];
      for (int i = 0; i < in_; ++i) acc += static_cast<double>(weight_.value[o * in_ + i]) * x[s * in_ + i];
      y[s * out_ + o] = static_cast<T>(acc);
    }
  x_ = x;
  return y;
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& dy) {
  const std::int64_t n = x_.dim(0);
  Tensor<T> dx({n, in_});
  for (std::int64_t s = 0; s < n; ++s)
    for (int o = 0; o < out_; ++o) {
      const T g = dy[s * out_ + o];
      bias_.grad[o] += g;
      for (int i = 0; i < in_; ++i) {
        weight_.grad[o * in_ + i] += g * x_[s * in_ + i];
        dx[s * in_ + i] += g * weight_.value[o * in_ + i];
      }
    }
  return dx;
}

// ---- Activations --------------------------------------------------------------

template <typename T>
Tensor<T> SiLU<T>::forward(const Tensor<T>& x) {
  x_ = x;
  Tensor<T> y(x.shape());
  const std::int64_t n = x.numel();
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] / (T(1) + std::exp(-x[i]));
  return y;
}

template <typename T>
Tensor<T> SiLU<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dx(x_.shape());
  const std::int64_t n = x_.numel();
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    const T s = T(1) / (T(1) + std::exp(-x_[i]));
    dx[i] = dy[i] * (s + x_[i] * s * (T(1) - s));
  }
  return dx;
}

template <typename T>
Tensor<T> ReLU<T>::forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  y_ = y;
  return y;
}

template <typename T>
Tensor<T> ReLU<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dx(y_.shape());
  for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] = y_[i] > T(0) ? dy[i] : T(0);
  return dx;
}

// ---- Pooling / resampling -----------------------------------------------------

template <typename T>
Tensor<T> MaxPool3d<T>::forward(const Tensor<T>& x) {
  require_rank5(x.shape(), "MaxPool3d");
  in_shape_ = x.shape();
  Tensor<T> y({x.dim(0), x.dim(1), x.dim(2) / 2, x.dim(3) / 2, x.dim(4) / 2});
  argmax_.assign(static_cast<std::size_t>(y.numel()), 0);
  kernels::max_pool3d_forward(x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4), x.data(), y.data(), argmax_.data());
  return y;
}

template <typename T>
Tensor<T> MaxPool3d<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dx(in_shape_);
  kernels::max_pool3d_backward(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3], in_shape_[4], dy.data(),
                               argmax_.data(), dx.data());
  return dx;
}

template <typename T>
Tensor<T> UpsampleNearest2<T>::forward(const Tensor<T>& x) {
  require_rank5(x.shape(), "UpsampleNearest2");
  in_shape_ = x.shape();
  Tensor<T> y({x.dim(0), x.dim(1), 2 * x.dim(2), 2 * x.dim(3), 2 * x.dim(4)});
  kernels::upsample_nearest2_forward(x.dim(0) * x.dim(1), x.dim(2), x.dim(3), x.dim(4), x.data(), y.data());
  return y;
}

template <typename T>
Tensor<T> UpsampleNearest2<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dx(in_shape_);
  kernels::upsample_nearest2_backward(in_shape_[0] * in_shape_[1], in_shape_[2], in_shape_[3], in_shape_[4],
                                      dy.data(), dx.data());
  return dx;
}

template <typename T>
Tensor<T> GlobalAvgPool<T>::forward(const Tensor<T>& x) {
  in_shape_ = x.shape();
  const std::int64_t nc = x.dim(0) * x.dim(1), s = x.spatial();
  Tensor<T> y({x.dim(0), x.dim(1)});
  for (std::int64_t p = 0; p < nc; ++p) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < s; ++i) acc += x[p * s + i];
    y[p] = static_cast<T>(acc / s);
  }
  return y;
}

template <typename T>
Tensor<T> GlobalAvgPool<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dx(in_shape_);
  const std::int64_t s = dx.spatial();
  for (std::int64_t p = 0; p < dy.numel(); ++p) {
    const T g = dy[p] / static_cast<T>(s);
    for (std::int64_t i = 0; i < s; ++i) dx[p * s + i] = g;
  }
  return dx;
}

template <typename T>
Tensor<T> Dropout<T>::forward(const Tensor<T>& x, bool training, Rng& rng) {
  if (!training || rate_ <= 0.0) {
    mask_.clear();
    return x;
  }
  const T scale = static_cast<T>(1.0 / (1.0 - rate_));
  mask_.resize(static_cast<std::size_t>(x.numel()));
  Tensor<T> y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    mask_[i] = uniform01(rng) >= rate_ ? scale : T(0);
    y[i] = x[i] * mask_[i];
  }
  return y;
}

template <typename T>
Tensor<T> Dropout<T>::backward(const Tensor<T>& dy) {
  if (mask_.empty()) return dy;
  Tensor<T> dx(dy.shape());
  for (std::int64_t i = 0; i < dy.numel(); ++i) dx[i] = dy[i] * mask_[i];
  return dx;
}

// ---- Attention ------------------------------------------------------------------

template <typename T>
SpatialSelfAttention<T>::SpatialSelfAttention(const std::string& name, int channels, int groups, Rng& rng)
    : channels_(channels),
      norm_(name + ".norm", channels, groups),
      q_(name + ".to_q", channels, channels, 1, 1, 0, rng),
      k_(name + ".to_k", channels, channels, 1, 1, 0, rng),
      v_(name + ".to_v", channels, channels, 1, 1, 0, rng),
      proj_(name + ".proj", channels, channels, 1, 1, 0, rng) {}

template <typename T>
void SpatialSelfAttention<T>::collect(ParamList<T>& out) {
  norm_.collect(out);
  q_.collect(out);
  k_.collect(out);
  v_.collect(out);
  proj_.collect(out);
}

template <typename T>
Tensor<T> SpatialSelfAttention<T>::forward(const Tensor<T>& x) {
  const std::int64_t n = x.dim(0), c = channels_, s = x.spatial();
  const Tensor<T> h = norm_.forward(x);
  q_out_ = q_.forward(h);
  k_out_ = k_.forward(h);
  v_out_ = v_.forward(h);
  attn_ = Tensor<T>({n, s, s});
  Tensor<T> o(x.shape());
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(c)));
  for (std::int64_t b = 0; b < n; ++b) {
    Eigen::Map<const RowMat<T>> Qt(q_out_.data() + b * c * s, c, s);
    Eigen::Map<const RowMat<T>> Kt(k_out_.data() + b * c * s, c, s);
    Eigen::Map<const RowMat<T>> Vt(v_out_.data() + b * c * s, c, s);
    Eigen::Map<RowMat<T>> A(attn_.data() + b * s * s, s, s);
    A.noalias() = (Qt.transpose() * Kt) * scale;
    for (std::int64_t i = 0; i < s; ++i) {
      const T m = A.row(i).maxCoeff();
      A.row(i) = (A.row(i).array() - m).exp();
      A.row(i) /= A.row(i).sum();
    }
    Eigen::Map<RowMat<T>> Ot(o.data() + b * c * s, c, s);
    Ot.noalias() = Vt * A.transpose();
  }
  return proj_.forward(o) + x;
}

template <typename T>
Tensor<T> SpatialSelfAttention<T>::backward(const Tensor<T>& dy) {
  const std::int64_t n = dy.dim(0), c = channels_, s = dy.spatial();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(c)));
  const Tensor<T> dO = proj_.backward(dy);
  Tensor<T> dq(dy.shape()), dk(dy.shape()), dv(dy.shape());
  for (std::int64_t b = 0; b < n; ++b) {
    Eigen::Map<const RowMat<T>> Qt(q_out_.data() + b * c * s, c, s);
    Eigen::Map<const RowMat<T>> Kt(k_out_.data() + b * c * s, c, s);
    Eigen::Map<const RowMat<T>> Vt(v_out_.data() + b * c * s, c, s);
    Eigen::Map<const RowMat<T>> A(attn_.data() + b * s * s, s, s);
    Eigen::Map<const RowMat<T>> dOt(dO.data() + b * c * s, c, s);
    Eigen::Map<RowMat<T>>(dv.data() + b * c * s, c, s).noalias() = dOt * A;
    RowMat<T> dA = dOt.transpose() * Vt;
    RowMat<T> dS(s, s);
    for (std::int64_t i = 0; i < s; ++i) {
      const T dot = (dA.row(i).array() * A.row(i).array()).sum();
      dS.row(i) = A.row(i).array() * (dA.row(i).array() - dot);
    }
    Eigen::Map<RowMat<T>>(dq.data() + b * c * s, c, s).noalias() = (Kt * dS.transpose()) * scale;
    Eigen::Map<RowMat<T>>(dk.data() + b * c * s, c, s).noalias() = (Qt * dS) * scale;
  }
  Tensor<T> dh = q_.backward(dq);
  dh += k_.backward(dk);
  dh += v_.backward(dv);
  Tensor<T> dx = norm_.backward(dh);
  dx += dy;
  return dx;
}

// ---- Channel concat ---------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || a.dim(0) != b.dim(0) || a.spatial() != b.spatial()) {
    throw std::invalid_argument("concat_channels: incompatible shapes " + shape_string(a.shape()) + " and " +
                                shape_string(b.shape()));
  }
  Shape shape = a.shape();
  shape[1] = a.dim(1) + b.dim(1);
  Tensor<T> out(shape);
  const std::int64_t n = a.dim(0), sa = a.dim(1) * a.spatial(), sb = b.dim(1) * b.spatial();
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy(a.data() + i * sa, a.data() + (i + 1) * sa, out.data() + i * (sa + sb));
    std::copy(b.data() + i * sb, b.data() + (i + 1) * sb, out.data() + i * (sa + sb) + sa);
  }
  return out;
}

template <typename T>
void split_channels(const Tensor<T>& d, std::int64_t ca, Tensor<T>& da, Tensor<T>& db) {
  Shape sa = d.shape(), sb = d.shape();
  sa[1] = ca;
  sb[1] = d.dim(1) - ca;
  da = Tensor<T>(sa);
  db = Tensor<T>(sb);
  const std::int64_t n = d.dim(0), na = ca * d.spatial(), nb = sb[1] * d.spatial();
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy(d.data() + i * (na + nb), d.data() + i * (na + nb) + na, da.data() + i * na);
    std::copy(d.data() + i * (na + nb) + na, d.data() + (i + 1) * (na + nb), db.data() + i * nb);
  }
}

#define DWIMPUTE_INSTANTIATE(T)                                                                \
  template void uniform_fan_in<T>(Tensor<T>&, std::int64_t, Rng&);                             \
  template class Conv3d<T>;                                                                    \
  template class GroupNorm<T>;                                                                 \
  template class Linear<T>;                                                                    \
  template class SiLU<T>;                                                                      \
  template class ReLU<T>;                                                                      \
  template class MaxPool3d<T>;                                                                 \
  template class UpsampleNearest2<T>;                                                          \
  template class GlobalAvgPool<T>;                                                             \
  template class Dropout<T>;                                                                   \
  template class SpatialSelfAttention<T>;                                                      \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                   \
  template void split_channels<T>(const Tensor<T>&, std::int64_t, Tensor<T>&, Tensor<T>&);

DWIMPUTE_INSTANTIATE(float)
DWIMPUTE_INSTANTIATE(double)
#undef DWIMPUTE_INSTANTIATE

}  // namespace dwimpute::nn
