#include <cmath>
#include <limits>
#include <vector>

#include "dwimpute/nn/kernels.hpp"

namespace dwimpute::nn::kernels::reference {

template <typename T>
void conv3d_forward(const Conv3dGeometry& g, const T* x, const T* w, const T* b, T* y) {
  const std::int64_t od = g.out_d(), oh = g.out_h(), ow = g.out_w();
  const int k = g.kernel;
  for (std::int64_t n = 0; n < g.batch; ++n)
    for (std::int64_t co = 0; co < g.out_channels; ++co)
      for (std::int64_t z = 0; z < od; ++z)
        for (std::int64_t yy = 0; yy < oh; ++yy)
          for (std::int64_t xx = 0; xx < ow; ++xx) {
            double acc = b ? static_cast<double>(b[co]) : 0.0;
            for (std::int64_t ci = 0; ci < g.in_channels; ++ci)
              for (int kd = 0; kd < k; ++kd)
                for (int kh = 0; kh < k; ++kh)
                  for (int kw = 0; kw < k; ++kw) {
                    const std::int64_t id = z * g.stride - g.pad + kd;
                    const std::int64_t ih = yy * g.stride - g.pad + kh;
                    const std::int64_t iw = xx * g.stride - g.pad + kw;
                    if (id < 0 || ih < 0 || iw < 0 || id >= g.in_d || ih >= g.in_h || iw >= g.in_w) continue;
                    const T xv = x[(((n * g.in_channels + ci) * g.in_d + id) * g.in_h + ih) * g.in_w + iw];
                    const T wv = w[(((co * g.in_channels + ci) * k + kd) * k + kh) * k + kw];
                    acc += static_cast<double>(xv) * static_cast<double>(wv);
                  }
            y[(((n * g.out_channels + co) * od + z) * oh + yy) * ow + xx] = static_cast<T>(acc);
          }
}

template <typename T>
void conv3d_backward(const Conv3dGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw, T* db) {
  const std::int64_t od = g.out_d(), oh = g.out_h(), ow = g.out_w();
  const int k = g.kernel;
  std::vector<double> gx(dx ? g.batch * g.in_channels * g.in_spatial() : 0, 0.0);
  std::vector<double> gw(g.out_channels * g.patch(), 0.0);
  std::vector<double> gb(g.out_channels, 0.0);
  for (std::int64_t n = 0; n < g.batch; ++n)
    for (std::int64_t co = 0; co < g.out_channels; ++co)
      for (std::int64_t z = 0; z < od; ++z)
        for (std::int64_t yy = 0; yy < oh; ++yy)
          for (std::int64_t xx = 0; xx < ow; ++xx) {
            const double go = dy[(((n * g.out_channels + co) * od + z) * oh + yy) * ow + xx];
            gb[co] += go;
            for (std::int64_t ci = 0; ci < g.in_channels; ++ci)
              for (int kd = 0; kd < k; ++kd)
                for (int kh = 0; kh < k; ++kh)
                  for (int kw = 0; kw < k; ++kw) {
                    const std::int64_t id = z * g.stride - g.pad + kd;
                    const std::int64_t ih = yy * g.stride - g.pad + kh;
                    const std::int64_t iw = xx * g.stride - g.pad + kw;
                    if (id < 0 || ih < 0 || iw < 0 || id >= g.in_d || ih >= g.in_h || iw >= g.in_w) continue;
                    const std::int64_t xi = (((n * g.in_channels + ci) * g.in_d + id) * g.in_h + ih) * g.in_w + iw;
                    const std::int64_t wi = (((co * g.in_channels + ci) * k + kd) * k + kh) * k + kw;
                    gw[wi] += go * x[xi];
                    if (dx) gx[xi] += go * w[wi];
                  }
          }
  if (dx)
    for (std::size_t i = 0; i < gx.size(); ++i) dx[i] = static_cast<T>(gx[i]);
  for (std::size_t i = 0; i < gw.size(); ++i) dw[i] += static_cast<T>(gw[i]);
  if (db)
    for (std::size_t i = 0; i < gb.size(); ++i) db[i] += static_cast<T>(gb[i]);
}

template <typename T>
void group_norm_forward(std::int64_t n, std::int64_t c, std::int64_t spatial, std::int64_t groups, const T* x,
                        const T* gamma, const T* beta, double eps, T* y, T* mean, T* rstd) {
  const std::int64_t cg = c / groups;
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t g = 0; g < groups; ++g) {
      const std::int64_t count = cg * spatial;
      const T* base = x + (s * c + g * cg) * spatial;
      double sum = 0.0;
      for (std::int64_t i = 0; i < count; ++i) sum += base[i];
      const double mu = sum / count;
      double var = 0.0;
      for (std::int64_t i = 0; i < count; ++i) var += (base[i] - mu) * (base[i] - mu);
      var /= count;
      const double r = 1.0 / std::sqrt(var + eps);
      mean[s * groups + g] = static_cast<T>(mu);
      rstd[s * groups + g] = static_cast<T>(r);
      for (std::int64_t cc = 0; cc < cg; ++cc) {
        const std::int64_t ch = g * cg + cc;
        for (std::int64_t i = 0; i < spatial; ++i) {
          const std::int64_t idx = (s * c + ch) * spatial + i;
          y[idx] = static_cast<T>((x[idx] - mu) * r * gamma[ch] + beta[ch]);
        }
      }
    }
}

template <typename T>
void group_norm_backward(std::int64_t n, std::int64_t c, std::int64_t spatial, std::int64_t groups, const T* x,
                         const T* gamma, const T* mean, const T* rstd, const T* dy, T* dx, T* dgamma, T* dbeta) {
  const std::int64_t cg = c / groups;
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t g = 0; g < groups; ++g) {
      const double mu = mean[s * groups + g];
      const double r = rstd[s * groups + g];
      const double count = static_cast<double>(cg * spatial);
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (std::int64_t cc = 0; cc < cg; ++cc) {
        const std::int64_t ch = g * cg + cc;
        for (std::int64_t i = 0; i < spatial; ++i) {
          const std::int64_t idx = (s * c + ch) * spatial + i;
          const double xhat = (x[idx] - mu) * r;
          const double dxhat = static_cast<double>(dy[idx]) * gamma[ch];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
          dgamma[ch] += static_cast<T>(dy[idx] * xhat);
          dbeta[ch] += dy[idx];
        }
      }
      for (std::int64_t cc = 0; cc < cg; ++cc) {
        const std::int64_t ch = g * cg + cc;
        for (std::int64_t i = 0; i < spatial; ++i) {
          const std::int64_t idx = (s * c + ch) * spatial + i;
          const double xhat = (x[idx] - mu) * r;
          const double dxhat = static_cast<double>(dy[idx]) * gamma[ch];
          dx[idx] = static_cast<T>(r * (dxhat - sum_dxhat / count - xhat * sum_dxhat_xhat / count));
        }
      }
    }
}

template <typename T>
void max_pool3d_forward(std::int64_t n, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w, const T* x,
                        T* y, std::int64_t* argmax) {
  const std::int64_t od = d / 2, oh = h / 2, ow = w / 2;
  for (std::int64_t p = 0; p < n * c; ++p)
    for (std::int64_t z = 0; z < od; ++z)
      for (std::int64_t yy = 0; yy < oh; ++yy)
        for (std::int64_t xx = 0; xx < ow; ++xx) {
          T best = -std::numeric_limits<T>::infinity();
          std::int64_t best_i = -1;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int e = 0; e < 2; ++e) {
                const std::int64_t i = ((p * d + 2 * z + a) * h + 2 * yy + b) * w + 2 * xx + e;
                if (best_i < 0 || x[i] > best) {
                  best = x[i];
                  best_i = i;
                }
              }
          const std::int64_t o = ((p * od + z) * oh + yy) * ow + xx;
          y[o] = best;
          argmax[o] = best_i;
        }
}

template <typename T>
void max_pool3d_backward(std::int64_t n, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w, const T* dy,
                         const std::int64_t* argmax, T* dx) {
  for (std::int64_t i = 0; i < n * c * d * h * w; ++i) dx[i] = T(0);
  const std::int64_t out = n * c * (d / 2) * (h / 2) * (w / 2);
  for (std::int64_t o = 0; o < out; ++o) dx[argmax[o]] += dy[o];
}

template <typename T>
void upsample_nearest2_forward(std::int64_t nc, std::int64_t d, std::int64_t h, std::int64_t w, const T* x, T* y) {
  for (std::int64_t p = 0; p < nc; ++p)
    for (std::int64_t z = 0; z < 2 * d; ++z)
      for (std::int64_t yy = 0; yy < 2 * h; ++yy)
        for (std::int64_t xx = 0; xx < 2 * w; ++xx)
          y[((p * 2 * d + z) * 2 * h + yy) * 2 * w + xx] = x[((p * d + z / 2) * h + yy / 2) * w + xx / 2];
}

template <typename T>
void upsample_nearest2_backward(std::int64_t nc, std::int64_t d, std::int64_t h, std::int64_t w, const T* dy, T* dx) {
  for (std::int64_t i = 0; i < nc * d * h * w; ++i) dx[i] = T(0);
  for (std::int64_t p = 0; p < nc; ++p)
    for (std::int64_t z = 0; z < 2 * d; ++z)
      for (std::int64_t yy = 0; yy < 2 * h; ++yy)
        for (std::int64_t xx = 0; xx < 2 * w; ++xx)
          dx[((p * d + z / 2) * h + yy / 2) * w + xx / 2] += dy[((p * 2 * d + z) * 2 * h + yy) * 2 * w + xx];
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

}  // namespace dwimpute::nn::kernels::reference
