#include <cmath>

#include "doctest.h"
#include "dwimpute/diffusion/ddpm.hpp"
#include "dwimpute/nn/param_io.hpp"
#include "dwimpute/phantom.hpp"
#include "support.hpp"

using namespace dwimpute;
using namespace dwimpute::diffusion;

namespace {

// ---- analytic parameter tally ----------------------------------------------------------

std::int64_t conv(std::int64_t ci, std::int64_t co, std::int64_t k) { return co * ci * k * k * k + co; }
std::int64_t gn(std::int64_t c) { return 2 * c; }
std::int64_t linear(std::int64_t i, std::int64_t o) { return i * o + o; }
std::int64_t res(std::int64_t ci, std::int64_t co, std::int64_t t) {
  return gn(ci) + conv(ci, co, 3) + linear(t, co) + gn(co) + conv(co, co, 3) + (ci != co ? conv(ci, co, 1) : 0);
}
std::int64_t attn(std::int64_t c) { return gn(c) + 4 * conv(c, c, 1); }

std::int64_t denoiser_tally(std::int64_t w0, std::int64_t w1, std::int64_t w2, std::int64_t t, int rb) {
  std::int64_t n = linear(w0, t) + linear(t, t) + conv(2, w0, 3);
  // encoder
  n += rb * res(w0, w0, t) + conv(w0, w0, 3);
  n += res(w0, w1, t) + (rb - 1) * res(w1, w1, t) + conv(w1, w1, 3);
  n += res(w1, w2, t) + (rb - 1) * res(w2, w2, t) + rb * attn(w2);
  // middle
  n += 2 * res(w2, w2, t) + attn(w2);
  // decoder
  n += res(2 * w2, w2, t) + (rb - 1) * res(w2, w2, t) + rb * attn(w2) + conv(w2, w1, 3);
  n += res(2 * w1, w1, t) + (rb - 1) * res(w1, w1, t) + conv(w1, w0, 3);
  n += res(2 * w0, w0, t) + (rb - 1) * res(w0, w0, t);
  // output head
  n += gn(w0) + conv(w0, 1, 3);
  return n;
}

DenoiserSpec small_spec(int n, int width_scale, int rb = 2) {
  DenoiserSpec s;
  s.width_scale = width_scale;
  s.residual_blocks_per_stage = rb;
  s.input_dims = {n, n, n};
  return s;
}

template <typename T>
nn::Tensor<T> random_input(int batch, int n, Rng& rng) {
  nn::Tensor<T> x({batch, 2, n, n, n});
  for (auto& v : x.values()) v = static_cast<T>(support::uniform(rng, 0, 1));
  return x;
}

class ZeroPredictor final : public NoisePredictor {
 public:
  nn::Tensor<float> predict(const nn::Tensor<float>& input, std::span<const int>) override {
    ++calls;
    return nn::Tensor<float>({input.dim(0), 1, input.dim(2), input.dim(3), input.dim(4)});
  }
  int calls = 0;
};

DdpmCheckpoint untrained_checkpoint(int n, int width_scale, int timesteps) {
  DdpmCheckpoint c;
  c.spec = small_spec(n, width_scale, 1);
  c.schedule_params = {timesteps, 1e-3, 0.2};
  Denoiser<float> net(c.spec, 5);
  c.weights = nn::flatten_params(net.parameters());
  return c;
}

std::vector<VolumePair> phantom_pairs(int count, int n, std::uint64_t seed) {
  PhantomSpec spec;
  spec.dims = {n, n, n};
  std::vector<VolumePair> out;
  for (int i = 0; i < count; ++i) {
    auto s = generate_subject(spec, kAllDiagnoses[i % 3], derive_seed(seed, static_cast<std::uint64_t>(i)), "s");
    out.push_back({s.t1, s.fa});
  }
  return out;
}

}  // namespace

// ---- schedule --------------------------------------------------------------------------

TEST_CASE("scaled-linear schedule endpoints and midpoint") {
  const auto s = scaled_linear_schedule(1000, 5e-4, 1.95e-2);
  CHECK(s.betas.front() == 5e-4);
  CHECK(s.betas.back() == 1.95e-2);
  const double r = std::sqrt(5e-4) + (499.0 / 999.0) * (std::sqrt(1.95e-2) - std::sqrt(5e-4));
  CHECK(s.betas[499] == doctest::Approx(r * r).epsilon(1e-14));
  CHECK(std::abs(s.betas[499] - 6.556e-3) <= 1e-5);
}

TEST_CASE("schedule monotonicity and alpha identities on random valid inputs") {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const int t = support::uniform_int(rng, 2, 1200);
    const double b0 = std::exp(support::uniform(rng, std::log(1e-5), std::log(1e-2)));
    const double b1 = std::min(0.999, b0 * std::exp(support::uniform(rng, 0.1, 5.0)));
    const auto s = scaled_linear_schedule(t, b0, b1);
    REQUIRE(s.betas.size() == static_cast<std::size_t>(t));
    CHECK(s.betas.front() == b0);
    CHECK(s.betas.back() == b1);
    for (int i = 0; i < t; ++i) {
      CHECK(s.alphas[i] == 1.0 - s.betas[i]);
      if (i > 0) {
        CHECK(s.betas[i] > s.betas[i - 1]);
        CHECK(s.alpha_bars[i] < s.alpha_bars[i - 1]);
      }
      CHECK(s.alpha_bars[i] > 0.0);
    }
  }
}

TEST_CASE("schedule rejects invalid inputs") {
  CHECK_THROWS_AS(scaled_linear_schedule(1, 1e-4, 1e-2), std::invalid_argument);
  CHECK_THROWS_AS(scaled_linear_schedule(10, 0.0, 1e-2), std::invalid_argument);
  CHECK_THROWS_AS(scaled_linear_schedule(10, 1e-2, 1e-3), std::invalid_argument);
  CHECK_THROWS_AS(scaled_linear_schedule(10, 1e-2, 1.0), std::invalid_argument);
}

// ---- forward process -------------------------------------------------------------------

TEST_CASE("forward_noise closed form") {
  NoiseSchedule s;
  s.timesteps = 1;
  s.betas = {0.75};
  s.alphas = {0.25};
  s.alpha_bars = {0.25};
  const Dims d{1, 1, 1};
  const auto x = forward_noise(support::constant_volume(d, 1.0f), 0, support::constant_volume(d, 1.0f), s);
  CHECK(x.voxels()[0] == doctest::Approx(0.5 + std::sqrt(0.75)).epsilon(1e-7));
  CHECK(x.range_tag() == RangeTag::raw);

  const auto sched = scaled_linear_schedule(1000, 5e-4, 1.95e-2);
  Rng rng(3);
  const auto x0 = support::random_volume({3, 3, 3}, rng);
  const auto zero = forward_noise(x0, 600, Volume3D({3, 3, 3}, {}, RangeTag::raw), sched);
  for (std::size_t i = 0; i < x0.size(); ++i) {
    CHECK(zero.voxels()[i] == doctest::Approx(std::sqrt(sched.alpha_bars[600]) * x0.voxels()[i]).epsilon(1e-6));
  }
  for (int t = 0; t < 1000; ++t) {
    const double a = std::sqrt(sched.alpha_bars[t]);
    CHECK(a * a + (1.0 - sched.alpha_bars[t]) == doctest::Approx(1.0).epsilon(1e-15));
  }
}

TEST_CASE("forward process moments within 4 standard errors") {
  const auto s = scaled_linear_schedule(1000, 5e-4, 1.95e-2);
  const int n = 20000;
  Rng rng(2);
  Volume3D x0 = support::constant_volume({1, 1, n}, 1.0f);
  for (int t : {10, 500, 990}) {
    Volume3D eps({1, 1, n}, {}, RangeTag::raw);
    for (auto& v : eps.voxels()) v = static_cast<float>(standard_normal(rng));
    const auto xt = forward_noise(x0, t, eps, s);
    double mean = 0, var = 0;
    for (float v : xt.voxels()) mean += v / n;
    for (float v : xt.voxels()) var += (v - mean) * (v - mean) / (n - 1);
    const double sigma2 = 1.0 - s.alpha_bars[t];
    CHECK(std::abs(mean - std::sqrt(s.alpha_bars[t])) <= 4 * std::sqrt(sigma2 / n));
    CHECK(std::abs(var - sigma2) <= 4 * sigma2 * std::sqrt(2.0 / (n - 1)));
  }
}

// ---- denoiser --------------------------------------------------------------------------

TEST_CASE("denoiser output shape over dims and width scales") {
  Rng rng(4);
  for (int n : {8, 16, 24}) {
    for (int ws : {4, 8}) {
      CAPTURE(n);
      CAPTURE(ws);
      Denoiser<float> net(small_spec(n, ws), 1);
      const int t[] = {3, 917};
      const auto y = net.forward(random_input<float>(2, n, rng), t);
      CHECK(y.shape() == nn::Shape{2, 1, n, n, n});
    }
  }
}

TEST_CASE("denoiser parameter count matches the analytic tally") {
  // width_scale 8: widths (16, 16, 32), time embedding 64.
  Denoiser<float> net(small_spec(16, 8), 1);
  CHECK(net.num_parameters() == denoiser_tally(16, 16, 32, 64, 2));
  Denoiser<float> one(small_spec(16, 8, 1), 1);
  CHECK(one.num_parameters() == denoiser_tally(16, 16, 32, 64, 1));
  Denoiser<float> full(small_spec(16, 1), 1);
  CHECK(full.num_parameters() == denoiser_tally(128, 128, 256, 512, 2));
}

TEST_CASE("denoiser init is seeded") {
  Denoiser<float> a(small_spec(8, 8), 42), b(small_spec(8, 8), 42), c(small_spec(8, 8), 43);
  CHECK(nn::flatten_params(a.parameters()) == nn::flatten_params(b.parameters()));
  CHECK(nn::flatten_params(a.parameters()) != nn::flatten_params(c.parameters()));
}

TEST_CASE("DenoiserSpec validation") {
  auto s = small_spec(10, 8);
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = small_spec(8, 8);
  s.out_channels = 2;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = small_spec(8, 0);
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  nlohmann::json j = small_spec(16, 4);
  CHECK(j.get<DenoiserSpec>() == small_spec(16, 4));
}

TEST_CASE("timestep embedding is [cos, sin] of geometric frequencies") {
  const int t[] = {0, 7};
  const auto e = timestep_embedding<double>(t, 8);
  CHECK(e.shape() == nn::Shape{2, 8});
  for (int i = 0; i < 4; ++i) {
    const double f = std::exp(-std::log(10000.0) * i / 4.0);
    CHECK(e[i] == doctest::Approx(1.0));
    CHECK(e[4 + i] == doctest::Approx(0.0));
    CHECK(e[8 + i] == doctest::Approx(std::cos(7 * f)));
    CHECK(e[8 + 4 + i] == doctest::Approx(std::sin(7 * f)));
  }
}

TEST_CASE("DDPM loss gradients agree with finite differences (64-bit)") {
  Rng rng(5);
  auto spec = small_spec(8, 16, 1);
  Denoiser<double> net(spec, 3);
  auto params = net.parameters();
  // The output conv starts at zero, which would zero every upstream gradient.
  for (auto* p : params)
    if (p->name.rfind("out.conv", 0) == 0)
      for (auto& v : p->value.values()) v = 0.05 * support::uniform(rng, -1, 1);
  const auto input = random_input<double>(2, 8, rng);
  nn::Tensor<double> eps({2, 1, 8, 8, 8});
  for (auto& v : eps.values()) v = standard_normal(rng);
  const int t[] = {5, 400};

  nn::zero_grads(params);
  noise_prediction_loss(net, input, t, eps, true);
  const auto samples = support::check_gradients(
      params, [&] { return noise_prediction_loss(net, input, t, eps, false); }, 24, rng);
  int checked = 0;
  for (const auto& g : samples) {
    CAPTURE(g.param);
    CAPTURE(g.analytic);
    CAPTURE(g.numeric);
    CHECK(g.rel_error <= 1e-2);
    ++checked;
  }
  CHECK(checked >= 10);
}

TEST_CASE("untrained denoiser loss is near 1") {
  Rng rng(6);
  Denoiser<float> net(small_spec(16, 8, 1), 9);
  const auto input = random_input<float>(4, 16, rng);
  nn::Tensor<float> eps({4, 1, 16, 16, 16});
  for (auto& v : eps.values()) v = static_cast<float>(standard_normal(rng));
  const int t[] = {1, 100, 500, 999};
  const double loss = noise_prediction_loss(net, input, t, eps, false);
  CHECK(loss > 0.7);
  CHECK(loss < 1.3);
}

// ---- training and sampling -------------------------------------------------------------

TEST_CASE("DDPM training is deterministic for a fixed seed") {
  const auto pairs = phantom_pairs(3, 8, 1);
  DdpmTrainConfig cfg;
  cfg.epochs = 2;
  cfg.learning_rate = 1e-3;
  cfg.seed = 77;
  const ScheduleParams sched{100, 1e-3, 0.2};
  const auto a = train_ddpm(pairs, cfg, small_spec(8, 16, 1), sched, pairs);
  const auto b = train_ddpm(pairs, cfg, small_spec(8, 16, 1), sched, pairs);
  CHECK(a.step_losses == b.step_losses);
  CHECK(a.weights == b.weights);
  CHECK(a.val_losses.size() == 2);
  CHECK(a.epoch_losses.size() == 2);
  CHECK(a.step_losses.size() == 4);
  CHECK(a.epochs_completed == 2);
  double tail = 0;
  for (double v : a.step_losses) tail += v / a.step_losses.size();
  CHECK(a.final_loss == doctest::Approx(tail));
  cfg.seed = 78;
  CHECK(train_ddpm(pairs, cfg, small_spec(8, 16, 1), sched).step_losses != a.step_losses);
}

TEST_CASE("DDPM training config validation") {
  DdpmTrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.learning_rate = -1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK_THROWS(train_ddpm({}, DdpmTrainConfig{}, small_spec(8, 16), {}));
}

TEST_CASE("reverse step with a zero noise estimate") {
  const auto s = scaled_linear_schedule(50, 1e-3, 0.2);
  Rng rng(7);
  std::vector<float> x(64), z(64), zero(64, 0.0f);
  for (auto& v : x) v = static_cast<float>(support::uniform(rng, -2, 2));
  for (auto& v : z) v = static_cast<float>(standard_normal(rng));
  for (int t : {0, 1, 25, 49}) {
    auto y = x;
    reverse_step(y, zero, z, t, s);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double expect = x[i] / std::sqrt(s.alphas[t]) + (t > 0 ? std::sqrt(s.betas[t]) * z[i] : 0.0);
      CHECK(y[i] == doctest::Approx(expect).epsilon(1e-6));
    }
  }
  CHECK_THROWS_AS(reverse_step(x, zero, z, 50, s), std::out_of_range);
}

TEST_CASE("clipped reverse step equals the plain step when the x0 estimate is in range") {
  const auto s = scaled_linear_schedule(50, 1e-3, 0.2);
  Rng rng(8);
  for (int t : {1, 10, 49}) {
    std::vector<float> x(32), eps(32), z(32);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double x0 = support::uniform(rng, 0.05, 0.95);
      eps[i] = static_cast<float>(standard_normal(rng));
      x[i] = static_cast<float>(std::sqrt(s.alpha_bars[t]) * x0 + std::sqrt(1 - s.alpha_bars[t]) * eps[i]);
      z[i] = static_cast<float>(standard_normal(rng));
    }
    auto a = x, b = x;
    reverse_step(a, eps, z, t, s, false);
    reverse_step(b, eps, z, t, s, true);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-4));
  }
}

TEST_CASE("sampling contract: shape, range, determinism and batch independence") {
  const auto ckpt = untrained_checkpoint(8, 16, 20);
  Rng rng(9);
  const auto t1a = support::random_volume({8, 8, 8}, rng), t1b = support::random_volume({8, 8, 8}, rng);
  const auto s1 = sample_conditional(t1a, ckpt, 11);
  const auto s2 = sample_conditional(t1a, ckpt, 11);
  const auto s3 = sample_conditional(t1a, ckpt, 12);
  CHECK(s1.dims() == t1a.dims());
  CHECK(s1.range_tag() == RangeTag::unit);
  for (float v : s1.voxels()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  CHECK(s1 == s2);
  CHECK_FALSE(s1 == s3);

  DenoiserPredictor predictor(ckpt);
  const Volume3D* t1s[] = {&t1b, &t1a};
  const std::uint64_t seeds[] = {5, 11};
  SampleOptions batched;
  batched.batch_size = 2;
  const auto both = sample_conditional(predictor, ckpt.schedule(), t1s, seeds, batched);
  CHECK(both[1] == s1);
  CHECK(both[0] == sample_conditional(t1b, ckpt, 5));
}

TEST_CASE("sampling with a zero predictor follows the closed-form chain") {
  const auto s = scaled_linear_schedule(10, 1e-3, 0.2);
  ZeroPredictor zero;
  Volume3D t1({2, 2, 2}, {}, RangeTag::unit);
  const Volume3D* t1s[] = {&t1};
  const std::uint64_t seeds[] = {3};
  const auto out = sample_conditional(zero, s, t1s, seeds);
  CHECK(zero.calls == 10);

  // Replay: x_T ~ N(0, 1), then z at every t > 0, from one generator per volume.
  Rng rng(3);
  std::vector<double> x(8);
  for (auto& v : x) v = static_cast<float>(standard_normal(rng));
  for (int t = 9; t >= 0; --t) {
    std::vector<double> z(8, 0.0);
    if (t > 0)
      for (auto& v : z) v = static_cast<float>(standard_normal(rng));
    for (int i = 0; i < 8; ++i) x[i] = static_cast<float>(x[i] / std::sqrt(s.alphas[t]) + std::sqrt(s.betas[t]) * z[i]);
  }
  for (int i = 0; i < 8; ++i) CHECK(out[0].voxels()[i] == doctest::Approx(std::clamp(x[i], 0.0, 1.0)).epsilon(1e-5));
}

TEST_CASE("evaluate_translation with identical and blank stubs") {
  Rng rng(10);
  std::vector<VolumePair> test;
  for (int i = 0; i < 3; ++i) test.push_back({support::random_volume({8, 8, 8}, rng), support::random_volume({8, 8, 8}, rng)});
  const auto same = evaluate_translation(test, [&](const Volume3D&, std::size_t i) { return test[i].fa; });
  CHECK(same.ssim3d == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(same.mse == 0.0);
  CHECK(same.l1 == 0.0);
  CHECK(std::isinf(same.psnr_db));
  CHECK(same.per_pair.size() == 3);

  const auto blank = evaluate_translation(test, [&](const Volume3D& t1, std::size_t) {
    return Volume3D(t1.dims(), t1.spacing(), RangeTag::unit);
  });
  double expect = 0;
  for (const auto& p : test) {
    double s = 0;
    for (float v : p.fa.voxels()) s += static_cast<double>(v) * v;
    expect += s / p.fa.size() / test.size();
  }
  CHECK(blank.mse == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("checkpoint save/load round trip") {
  support::TempDir tmp("ckpt");
  auto c = untrained_checkpoint(8, 16, 30);
  c.epochs_completed = 3;
  c.final_loss = 0.25;
  c.seed = 99;
  c.config_hash = "abc";
  c.step_losses = {1.0, 0.5};
  c.epoch_losses = {0.75};
  c.val_losses = {0.8};
  save_checkpoint(c, tmp.path());
  CHECK(std::filesystem::exists(tmp / "weights.bin"));
  CHECK(std::filesystem::exists(tmp / "meta.json"));
  const auto back = load_checkpoint(tmp.path());
  CHECK(back.spec == c.spec);
  CHECK(back.schedule_params == c.schedule_params);
  CHECK(back.weights == c.weights);
  CHECK(back.epochs_completed == 3);
  CHECK(back.final_loss == 0.25);
  CHECK(back.seed == 99);
  CHECK(back.config_hash == "abc");
  CHECK(back.step_losses == c.step_losses);
  CHECK(back.val_losses == c.val_losses);
  CHECK_THROWS(load_checkpoint(tmp / "missing"));
}
