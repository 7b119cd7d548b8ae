#include "dwimpute/nn/kernels.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace dwimpute::nn::kernels {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

// Output columns per GEMM tile. Fixed so the summation order inside each tile
// never depends on the thread count.
constexpr std::int64_t kTile = 1024;

bool is_pointwise(const Conv3dGeometry& g) { return g.kernel == 1 && g.stride == 1 && g.pad == 0; }

// Fills col (patch x len, row-major) with the receptive fields of output
// positions [p0, p0 + len) of one sample.
template <typename T>
void im2col_tile(const Conv3dGeometry& g, const T* x, std::int64_t p0, std::int64_t len, T* col) {
  const std::int64_t oh = g.out_h(), ow = g.out_w();
  const int k = g.kernel;
  const std::int64_t z0 = p0 / (oh * ow);
  const std::int64_t y0 = (p0 / ow) % oh;
  const std::int64_t x0 = p0 % ow;
  for (std::int64_t ci = 0; ci < g.in_channels; ++ci) {
    const T* xc = x + ci * g.in_spatial();
    for (int kd = 0; kd < k; ++kd)
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw) {
          T* row = col + (((ci * k + kd) * k + kh) * k + kw) * len;
          std::int64_t z = z0, yy = y0, xx = x0;
          for (std::int64_t j = 0; j < len; ++j) {
            const std::int64_t id = z * g.stride - g.pad + kd;
            const std::int64_t ih = yy * g.stride - g.pad + kh;
            const std::int64_t iw = xx * g.stride - g.pad + kw;
            const bool inside = id >= 0 && ih >= 0 && iw >= 0 && id < g.in_d && ih < g.in_h && iw < g.in_w;
            row[j] = inside ? xc[(id * g.in_h + ih) * g.in_w + iw] : T(0);
            if (++xx == ow) {
              xx = 0;
              if (++yy == oh) {
                yy = 0;
                ++z;
              }
            }
          }
        }
  }
}

// Scatters dcol (patch x out_spatial) into dx for one sample; one thread per
// input channel so no two threads touch the same voxel.
template <typename T>
void col2im(const Conv3dGeometry& g, const T* dcol, T* dx) {
  const std::int64_t od = g.out_d(), oh = g.out_h(), ow = g.out_w();
  const std::int64_t ps = g.out_spatial();
  const int k = g.kernel;
#pragma omp parallel for schedule(static)
  for (std::int64_t ci = 0; ci < g.in_channels; ++ci) {
    T* xc = dx + ci * g.in_spatial();
    std::fill(xc, xc + g.in_spatial(), T(0));
    for (int kd = 0; kd < k; ++kd)
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw) {
          const T* row = dcol + (((ci * k + kd) * k + kh) * k + kw) * ps;
          for (std::int64_t z = 0; z < od; ++z) {
            const std::int64_t id = z * g.stride - g.pad + kd;
            if (id < 0 || id >= g.in_d) continue;
            for (std::int64_t yy = 0; yy < oh; ++yy) {
              const std::int64_t ih = yy * g.stride - g.pad + kh;
              if (ih < 0 || ih >= g.in_h) continue;
              const T* r = row + (z * oh + yy) * ow;
              T* dst = xc + (id * g.in_h + ih) * g.in_w;
              for (std::int64_t xx = 0; xx < ow; ++xx) {
                const std::int64_t iw = xx * g.stride - g.pad + kw;
                if (iw >= 0 && iw < g.in_w) dst[iw] += r[xx];
              }
            }
          }
        }
  }
}

}  // namespace

template <typename T>
void conv3d_forward(const Conv3dGeometry& g, const T* x, const T* w, const T* b, T* y) {
  const std::int64_t ps = g.out_spatial();
  const std::int64_t patch = g.patch();
  const std::int64_t tiles = (ps + kTile - 1) / kTile;
  const bool pointwise = is_pointwise(g);
  Eigen::Map<const RowMat<T>> W(w, g.out_channels, patch);

  for (std::int64_t n = 0; n < g.batch; ++n) {
    const T* xn = x + n * g.in_channels * g.in_spatial();
    T* yn = y + n * g.out_channels * ps;
#pragma omp parallel
    {
      std::vector<T> col(pointwise ? 0 : patch * std::min(kTile, ps));
#pragma omp for schedule(static)
      for (std::int64_t t = 0; t < tiles; ++t) {
        const std::int64_t p0 = t * kTile;
        const std::int64_t len = std::min(kTile, ps - p0);
        StridedMap<T> Y(yn + p0, g.out_channels, len, Eigen::OuterStride<>(ps));
        if (pointwise) {
          ConstStridedMap<T> C(xn + p0, patch, len, Eigen::OuterStride<>(ps));
          Y.noalias() = W * C;
        } else {
          im2col_tile(g, xn, p0, len, col.data());
          ConstStridedMap<T> C(col.data(), patch, len, Eigen::OuterStride<>(len));
          Y.noalias() = W * C;
        }
        if (b) {
          for (std::int64_t co = 0; co < g.out_channels; ++co) Y.row(co).array() += b[co];
        }
      }
    }
  }
}

template <typename T>
void conv3d_backward(const Conv3dGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw, T* db) {
  const std::int64_t ps = g.out_spatial();
  const std::int64_t patch = g.patch();
  const std::int64_t tiles = (ps + kTile - 1) / kTile;
  const bool pointwise = is_pointwise(g);
  Eigen::Map<const RowMat<T>> W(w, g.out_channels, patch);
  Eigen::Map<RowMat<T>> dW(dw, g.out_channels, patch);

  std::vector<T> partial(static_cast<std::size_t>(tiles * g.out_channels * patch));
  std::vector<T> dcol(dx && !pointwise ? patch * ps : 0);

  for (std::int64_t n = 0; n < g.batch; ++n) {
    const T* xn = x + n * g.in_channels * g.in_spatial();
    const T* dyn = dy + n * g.out_channels * ps;

    if (db) {
      for (std::int64_t co = 0; co < g.out_channels; ++co) {
        double s = 0.0;
        for (std::int64_t p = 0; p < ps; ++p) s += dyn[co * ps + p];
        db[co] += static_cast<T>(s);
      }
    }

#pragma omp parallel
    {
      std::vector<T> col(pointwise ? 0 : patch * std::min(kTile, ps));
#pragma omp for schedule(static)
      for (std::int64_t t = 0; t < tiles; ++t) {
        const std::int64_t p0 = t * kTile;
        const std::int64_t len = std::min(kTile, ps - p0);
        ConstStridedMap<T> dY(dyn + p0, g.out_channels, len, Eigen::OuterStride<>(ps));
        Eigen::Map<RowMat<T>> part(partial.data() + t * g.out_channels * patch, g.out_channels, patch);
        if (pointwise) {
          ConstStridedMap<T> C(xn + p0, patch, len, Eigen::OuterStride<>(ps));
          part.noalias() = dY * C.transpose();
        } else {
          im2col_tile(g, xn, p0, len, col.data());
          ConstStridedMap<T> C(col.data(), patch, len, Eigen::OuterStride<>(len));
          part.noalias() = dY * C.transpose();
        }
        if (dx) {
          if (pointwise) {
            StridedMap<T> dX(dx + n * g.in_channels * g.in_spatial() + p0, patch, len, Eigen::OuterStride<>(ps));
            dX.noalias() = W.transpose() * dY;
          } else {
            StridedMap<T> dC(dcol.data() + p0, patch, len, Eigen::OuterStride<>(ps));
            dC.noalias() = W.transpose() * dY;
          }
        }
      }
    }
    for (std::int64_t t = 0; t < tiles; ++t) {
      dW += Eigen::Map<const RowMat<T>>(partial.data() + t * g.out_channels * patch, g.out_channels, patch);
    }
    if (dx && !pointwise) col2im(g, dcol.data(), dx + n * g.in_channels * g.in_spatial());
  }
}

template <typename T>
void group_norm_forward(std::int64_t n, std::int64_t c, std::int64_t spatial, std::int64_t groups, const T* x,
                        const T* gamma, const T* beta, double eps, T* y, T* mean, T* rstd) {
  const std::int64_t cg = c / groups;
  const std::int64_t count = cg * spatial;
#pragma omp parallel for schedule(static)
  for (std::int64_t sg = 0; sg < n * groups; ++sg) {
    const std::int64_t s = sg / groups, g = sg % groups;
    const T* base = x + (s * c + g * cg) * spatial;
    double sum = 0.0;
    for (std::int64_t i = 0; i < count; ++i) sum += base[i];
    const double mu = sum / count;
    double var = 0.0;
    for (std::int64_t i = 0; i < count; ++i) {
      const double d = base[i] - mu;
      var += d * d;
    }
    var /= count;
    const double r = 1.0 / std::sqrt(var + eps);
    mean[sg] = static_cast<T>(mu);
    rstd[sg] = static_cast<T>(r);
    for (std::int64_t cc = 0; cc < cg; ++cc) {
      const std::int64_t ch = g * cg + cc;
      const double scale = r * gamma[ch];
      const double shift = beta[ch] - mu * scale;
      const T* xi = x + (s * c + ch) * spatial;
      T* yi = y + (s * c + ch) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) yi[i] = static_cast<T>(xi[i] * scale + shift);
    }
  }
}

template <typename T>
void group_norm_backward(std::int64_t n, std::int64_t c, std::int64_t spatial, std::int64_t groups, const T* x,
                         const T* gamma, const T* mean, const T* rstd, const T* dy, T* dx, T* dgamma, T* dbeta) {
  const std::int64_t cg = c / groups;
  const double count = static_cast<double>(cg * spatial);
  std::vector<double> pg(n * c), pb(n * c);
#pragma omp parallel for schedule(static)
  for (std::int64_t sg = 0; sg < n * groups; ++sg) {
    const std::int64_t s = sg / groups, g = sg % groups;
    const double mu = mean[sg];
    const double r = rstd[sg];
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (std::int64_t cc = 0; cc < cg; ++cc) {
      const std::int64_t ch = g * cg + cc;
      const T* xi = x + (s * c + ch) * spatial;
      const T* di = dy + (s * c + ch) * spatial;
      double sg_acc = 0.0, sb_acc = 0.0;
      for (std::int64_t i = 0; i < spatial; ++i) {
        const double xhat = (xi[i] - mu) * r;
        sg_acc += di[i] * xhat;
        sb_acc += di[i];
      }
      pg[s * c + ch] = sg_acc;
      pb[s * c + ch] = sb_acc;
      sum_dxhat += sb_acc * gamma[ch];
      sum_dxhat_xhat += sg_acc * gamma[ch];
    }
    const double m1 = sum_dxhat / count;
    const double m2 = sum_dxhat_xhat / count;
    for (std::int64_t cc = 0; cc < cg; ++cc) {
      const std::int64_t ch = g * cg + cc;
      const T* xi = x + (s * c + ch) * spatial;
      const T* di = dy + (s * c + ch) * spatial;
      T* out = dx + (s * c + ch) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) {
        const double xhat = (xi[i] - mu) * r;
        out[i] = static_cast<T>(r * (static_cast<double>(di[i]) * gamma[ch] - m1 - xhat * m2));
      }
    }
  }
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double a = 0.0, b = 0.0;
    for (std::int64_t s = 0; s < n; ++s) {
      a += pg[s * c + ch];
      b += pb[s * c + ch];
    }
    dgamma[ch] += static_cast<T>(a);
    dbeta[ch] += static_cast<T>(b);
  }
}

template <typename T>
void max_pool3d_forward(std::int64_t n, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w, const T* x,
                        T* y, std::int64_t* argmax) {
  const std::int64_t od = d / 2, oh = h / 2, ow = w / 2;
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < n * c; ++p) {
    for (std::int64_t z = 0; z < od; ++z)
      for (std::int64_t yy = 0; yy < oh; ++yy)
        for (std::int64_t xx = 0; xx < ow; ++xx) {
          std::int64_t best_i = ((p * d + 2 * z) * h + 2 * yy) * w + 2 * xx;
          T best = x[best_i];
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int e = 0; e < 2; ++e) {
                const std::int64_t i = ((p * d + 2 * z + a) * h + 2 * yy + b) * w + 2 * xx + e;
                if (x[i] > best) {
                  best = x[i];
                  best_i = i;
                }
              }
          const std::int64_t o = ((p * od + z) * oh + yy) * ow + xx;
          y[o] = best;
          argmax[o] = best_i;
        }
  }
}

template <typename T>
void max_pool3d_backward(std::int64_t n, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w, const T* dy,
                         const std::int64_t* argmax, T* dx) {
  const std::int64_t plane_in = d * h * w;
  const std::int64_t plane_out = (d / 2) * (h / 2) * (w / 2);
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < n * c; ++p) {
    std::fill(dx + p * plane_in, dx + (p + 1) * plane_in, T(0));
    for (std::int64_t o = p * plane_out; o < (p + 1) * plane_out; ++o) dx[argmax[o]] += dy[o];
  }
}

template <typename T>
void upsample_nearest2_forward(std::int64_t nc, std::int64_t d, std::int64_t h, std::int64_t w, const T* x, T* y) {
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < nc; ++p) {
    const T* xp = x + p * d * h * w;
    T* yp = y + p * 8 * d * h * w;
    for (std::int64_t z = 0; z < 2 * d; ++z)
      for (std::int64_t yy = 0; yy < 2 * h; ++yy) {
        const T* src = xp + ((z / 2) * h + yy / 2) * w;
        T* dst = yp + (z * 2 * h + yy) * 2 * w;
        for (std::int64_t xx = 0; xx < w; ++xx) {
          dst[2 * xx] = src[xx];
          dst[2 * xx + 1] = src[xx];
        }
      }
  }
}

template <typename T>
void upsample_nearest2_backward(std::int64_t nc, std::int64_t d, std::int64_t h, std::int64_t w, const T* dy, T* dx) {
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < nc; ++p) {
    T* xp = dx + p * d * h * w;
    const T* yp = dy + p * 8 * d * h * w;
    std::fill(xp, xp + d * h * w, T(0));
    for (std::int64_t z = 0; z < 2 * d; ++z)
      for (std::int64_t yy = 0; yy < 2 * h; ++yy) {
        T* dst = xp + ((z / 2) * h + yy / 2) * w;
        const T* src = yp + (z * 2 * h + yy) * 2 * w;
        for (std::int64_t xx = 0; xx < w; ++xx) dst[xx] += src[2 * xx] + src[2 * xx + 1];
      }
  }
}

#define DWIMPUTE_INSTANTIATE(T)                                                                                    \
  template void conv3d_forward<T>(const Conv3dGeometry&, const T*, const T*, const T*, T*);                        \
  template void conv3d_backward<T>(const Conv3dGeometry&, const T*, const T*, const T*, T*, T*, T*);               \
  template void group_norm_forward<T>(std::int64_t, std::int64_t, std::int64_t, std::int64_t, const T*, const T*,  \
                                      const T*, double, T*, T*, T*);                                               \
  template void group_norm_backward<T>(std::int64_t, std::int64_t, std::int64_t, std::int64_t, const T*, const T*, \
                                       const T*, const T*, const T*, T*, T*, T*);                                  \
  template void max_pool3d_forward<T>(std::int64_t, std::int64_t, std::int64_t, std::int64_t, std::int64_t,        \
                                      const T*, T*, std::int64_t*);                                                \
  template void max_pool3d_backward<T>(std::int64_t, std::int64_t, std::int64_t, std::int64_t, std::int64_t,       \
                                       const T*, const std::int64_t*, T*);                                         \
  template void upsample_nearest2_forward<T>(std::int64_t, std::int64_t, std::int64_t, std::int64_t, const T*, T*); \
  template void upsample_nearest2_backward<T>(std::int64_t, std::int64_t, std::int64_t, std::int64_t, const T*, T*);

DWIMPUTE_INSTANTIATE(float)
DWIMPUTE_INSTANTIATE(double)
#undef DWIMPUTE_INSTANTIATE

}  // namespace dwimpute::nn::kernels
