#pragma once

// Compute kernels for the volumetric layers. The functions in
// dwimpute::nn::kernels are the OpenMP-parallel production path; the ones in
// dwimpute::nn::kernels::reference are plain serial loops kept as a test
// oracle and benchmark baseline. Both sets share signatures.
//
// Parallel kernels never split a floating-point reduction across threads, so
// results are bitwise independent of the thread count.

#include <cstdint>

namespace dwimpute::nn::kernels {

struct Conv3dGeometry {
  std::int64_t batch = 1;
  std::int64_t in_channels = 1;
  std::int64_t out_channels = 1;
  std::int64_t in_d = 1, in_h = 1, in_w = 1;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  std::int64_t out_d() const { return (in_d + 2 * pad - kernel) / stride + 1; }
  std::int64_t out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  std::int64_t out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
  std::int64_t in_spatial() const { return in_d * in_h * in_w; }
  std::int64_t out_spatial() const { return out_d() * out_h() * out_w(); }
  std::int64_t patch() const { return in_channels * kernel * kernel * kernel; }
};

/// y = conv(x, w) + b. x: (N, Cin, D, H, W); w: (Cout, Cin, k, k, k); y: (N, Cout, D', H', W').
template <typename T>
void conv3d_forward(const Conv3dGeometry& g, const T* x, const T* w, const T* b, T* y);

/// dx is overwritten unless null; dw and db are accumulated.
template <typename T>
void conv3d_backward(const Conv3dGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw, T* db);

/// Per-(sample, group) normalization; writes mean and reciprocal std (N*G each).
template <typename T>
void group_norm_forward(std::int64_t n, std::int64_t c, std::int64_t spatial, std::int64_t groups, const T* x,
                        const T* gamma, const T* beta, double eps, T* y, T* mean, T* rstd);

/// dx is overwritten; dgamma and dbeta are accumulated.
template <typename T>
void group_norm_backward(std::int64_t n, std::int64_t c, std::int64_t spatial, std::int64_t groups, const T* x,
                         const T* gamma, const T* mean, const T* rstd, const T* dy, T* dx, T* dgamma, T* dbeta);

/// 2x2x2 max pooling with stride 2 (floor). argmax holds flat input offsets.
template <typename T>
void max_pool3d_forward(std::int64_t n, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w, const T* x,
                        T* y, std::int64_t* argmax);

/// dx is overwritten.
template <typename T>
void max_pool3d_backward(std::int64_t n, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w, const T* dy,
                         const std::int64_t* argmax, T* dx);

/// Nearest-neighbour x2 upsampling of (N*C, D, H, W).
template <typename T>
void upsample_nearest2_forward(std::int64_t nc, std::int64_t d, std::int64_t h, std::int64_t w, const T* x, T* y);

template <typename T>
void upsample_nearest2_backward(std::int64_t nc, std::int64_t d, std::int64_t h, std::int64_t w, const T* dy, T* dx);

namespace reference {

template <typename T>
void conv3d_forward(const Conv3dGeometry& g, const T* x, const T* w, const T* b, T* y);
template <typename T>
void conv3d_backward(const Conv3dGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw, T* db);
template <typename T>
void group_norm_forward(std::int64_t n, std::int64_t c, std::int64_t spatial, std::int64_t groups, const T* x,
                        const T* gamma, const T* beta, double eps, T* y, T* mean, T* rstd);
template <typename T>
void group_norm_backward(std::int64_t n, std::int64_t c, std::int64_t spatial, std::int64_t groups, const T* x,
                         const T* gamma, const T* mean, const T* rstd, const T* dy, T* dx, T* dgamma, T* dbeta);
template <typename T>
void max_pool3d_forward(std::int64_t n, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w, const T* x,
                        T* y, std::int64_t* argmax);
template <typename T>
void max_pool3d_backward(std::int64_t n, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w, const T* dy,
                         const std::int64_t* argmax, T* dx);
template <typename T>
void upsample_nearest2_forward(std::int64_t nc, std::int64_t d, std::int64_t h, std::int64_t w, const T* x, T* y);
template <typename T>
void upsample_nearest2_backward(std::int64_t nc, std::int64_t d, std::int64_t h, std::int64_t w, const T* dy, T* dx);

}  // namespace reference

}  // namespace dwimpute::nn::kernels
