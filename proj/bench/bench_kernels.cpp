// Parallel kernels against the serial reference at U-Net-like geometries.
// Args: channels, spatial edge.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <random>
#include <vector>

#include "dwimpute/nn/kernels.hpp"

namespace k = dwimpute::nn::kernels;
namespace ref = dwimpute::nn::kernels::reference;

namespace {

std::vector<float> noise(std::size_t n, unsigned seed) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  std::vector<float> v(n);
  for (auto& x : v) x = u(gen);
  return v;
}

k::Conv3dGeometry geometry(const benchmark::State& st) {
  k::Conv3dGeometry g;
  g.batch = 2;
  g.in_channels = g.out_channels = st.range(0);
  g.in_d = g.in_h = g.in_w = st.range(1);
  return g;
}

template <bool Parallel>
void conv_forward(benchmark::State& st) {
  const auto g = geometry(st);
  const auto x = noise(g.batch * g.in_channels * g.in_spatial(), 1);
  const auto w = noise(g.out_channels * g.patch(), 2);
  const auto b = noise(g.out_channels, 3);
  std::vector<float> y(g.batch * g.out_channels * g.out_spatial());
  for (auto _ : st) {
    if constexpr (Parallel) k::conv3d_forward(g, x.data(), w.data(), b.data(), y.data());
    else ref::conv3d_forward(g, x.data(), w.data(), b.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(y.size()) * g.patch());
}

template <bool Parallel>
void conv_backward(benchmark::State& st) {
  const auto g = geometry(st);
  const auto x = noise(g.batch * g.in_channels * g.in_spatial(), 1);
  const auto w = noise(g.out_channels * g.patch(), 2);
  const auto dy = noise(g.batch * g.out_channels * g.out_spatial(), 3);
  std::vector<float> dx(x.size()), dw(w.size()), db(g.out_channels);
  for (auto _ : st) {
    if constexpr (Parallel) k::conv3d_backward(g, x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data());
    else ref::conv3d_backward(g, x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data());
    benchmark::DoNotOptimize(dx.data());
  }
}

template <bool Parallel>
void group_norm(benchmark::State& st) {
  const std::int64_t n = 2, c = st.range(0), e = st.range(1), sp = e * e * e, groups = 8;
  const auto x = noise(n * c * sp, 1), dy = noise(n * c * sp, 2);
  const std::vector<float> gamma(c, 1.f), beta(c, 0.f);
  std::vector<float> y(x.size()), dx(x.size()), mean(n * groups), rstd(n * groups), dg(c), dbeta(c);
  for (auto _ : st) {
    if constexpr (Parallel) {
      k::group_norm_forward<float>(n, c, sp, groups, x.data(), gamma.data(), beta.data(), 1e-5, y.data(), mean.data(), rstd.data());
      k::group_norm_backward<float>(n, c, sp, groups, x.data(), gamma.data(), mean.data(), rstd.data(), dy.data(), dx.data(), dg.data(), dbeta.data());
    } else {
      ref::group_norm_forward<float>(n, c, sp, groups, x.data(), gamma.data(), beta.data(), 1e-5, y.data(), mean.data(), rstd.data());
      ref::group_norm_backward<float>(n, c, sp, groups, x.data(), gamma.data(), mean.data(), rstd.data(), dy.data(), dx.data(), dg.data(), dbeta.data());
    }
    benchmark::DoNotOptimize(dx.data());
  }
}

template <bool Parallel>
void pool_upsample(benchmark::State& st) {
  const std::int64_t nc = 2 * st.range(0), e = st.range(1), h = e / 2;
  const auto x = noise(nc * e * e * e, 1), dy = noise(nc * h * h * h, 2);
  std::vector<float> y(dy.size()), dx(x.size()), up(x.size()), dup(dy.size());
  std::vector<std::int64_t> arg(dy.size());
  for (auto _ : st) {
    if constexpr (Parallel) {
      k::max_pool3d_forward<float>(1, nc, e, e, e, x.data(), y.data(), arg.data());
      k::max_pool3d_backward<float>(1, nc, e, e, e, dy.data(), arg.data(), dx.data());
      k::upsample_nearest2_forward<float>(nc, h, h, h, y.data(), up.data());
      k::upsample_nearest2_backward<float>(nc, h, h, h, x.data(), dup.data());
    } else {
      ref::max_pool3d_forward<float>(1, nc, e, e, e, x.data(), y.data(), arg.data());
      ref::max_pool3d_backward<float>(1, nc, e, e, e, dy.data(), arg.data(), dx.data());
      ref::upsample_nearest2_forward<float>(nc, h, h, h, y.data(), up.data());
      ref::upsample_nearest2_backward<float>(nc, h, h, h, x.data(), dup.data());
    }
    benchmark::DoNotOptimize(dup.data());
  }
}

void shapes(benchmark::internal::Benchmark* b) {
  b->Args({16, 16})->Args({16, 24})->Args({32, 12})->Unit(benchmark::kMillisecond);
}

}  // namespace

BENCHMARK(conv_forward<true>)->Name("conv3d_forward/parallel")->Apply(shapes);
BENCHMARK(conv_forward<false>)->Name("conv3d_forward/reference")->Apply(shapes);
BENCHMARK(conv_backward<true>)->Name("conv3d_backward/parallel")->Apply(shapes);
BENCHMARK(conv_backward<false>)->Name("conv3d_backward/reference")->Apply(shapes);
BENCHMARK(group_norm<true>)->Name("group_norm/parallel")->Apply(shapes);
BENCHMARK(group_norm<false>)->Name("group_norm/reference")->Apply(shapes);

BENCHMARK(pool_upsample<true>)->Name("pool_upsample/parallel")->Apply(shapes);
BENCHMARK(pool_upsample<false>)->Name("pool_upsample/reference")->Apply(shapes);

BENCHMARK_MAIN();
