#include "dwimpute/diffusion/ddpm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "dwimpute/nn/optim.hpp"
#include "dwimpute/nn/param_io.hpp"

namespace dwimpute::diffusion {

using nn::Tensor;

void DdpmTrainConfig::validate() const {
  if (epochs <= 0 || batch_size <= 0 || !(learning_rate > 0.0)) {
    throw std::invalid_argument("DdpmTrainConfig: epochs, batch_size and learning_rate must be positive");
  }
}

void to_json(nlohmann::json& j, const DdpmTrainConfig& c) {
  j = nlohmann::json{
      {"epochs", c.epochs}, {"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DdpmTrainConfig& c) {
  c = DdpmTrainConfig{};
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
}

// ---- checkpoint I/O ---------------------------------------------------------------

void save_checkpoint(const DdpmCheckpoint& ckpt, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nn::write_blob(ckpt.weights, dir / "weights.bin");
  Denoiser<float> probe(ckpt.spec, 0);
  nlohmann::json meta{
      {"format", "dwimpute-ddpm"},
      {"format_version", 1},
      {"spec", ckpt.spec},
      {"schedule", ckpt.schedule_params},
      {"epochs_completed", ckpt.epochs_completed},
      {"final_loss", ckpt.final_loss},
      {"seed", ckpt.seed},
      {"config_hash", ckpt.config_hash},
      {"loss_history", {{"step", ckpt.step_losses}, {"epoch", ckpt.epoch_losses}, {"val", ckpt.val_losses}}},
      {"weights_file", "weights.bin"},
      {"param_count", ckpt.weights.size()},
      {"layout", nn::param_layout(probe.parameters())},
  };
  std::ofstream out(dir / "meta.json");
  out << meta.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + (dir / "meta.json").string());
}

DdpmCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw std::runtime_error("checkpoint meta.json not found in " + dir.string());
  const nlohmann::json meta = nlohmann::json::parse(in);
  if (meta.value("format", "") != "dwimpute-ddpm") {
    throw std::runtime_error(dir.string() + " is not a DDPM checkpoint");
  }
  DdpmCheckpoint c;
  c.spec = meta.at("spec").get<DenoiserSpec>();
  c.schedule_params = meta.at("schedule").get<ScheduleParams>();
  c.epochs_completed = meta.value("epochs_completed", 0);
  c.final_loss = meta.value("final_loss", 0.0);
  c.seed = meta.value("seed", std::uint64_t{0});
  c.config_hash = meta.value("config_hash", "");
  const auto& h = meta.at("loss_history");
  c.step_losses = h.at("step").get<std::vector<double>>();
  c.epoch_losses = h.at("epoch").get<std::vector<double>>();
  c.val_losses = h.at("val").get<std::vector<double>>();
  c.weights = nn::read_blob(dir / meta.value("weights_file", "weights.bin"));
  Denoiser<float> probe(c.spec, 0);
  nn::unflatten_params(c.weights, probe.parameters());
  return c;
}

// ---- training -------------------------------------------------------------------------

template <typename T>
double noise_prediction_loss(Denoiser<T>& net, const Tensor<T>& input, std::span<const int> timesteps,
                             const Tensor<T>& eps, bool backward) {
  const Tensor<T> out = net.forward(input, timesteps);
  out.check_same(eps);
  const auto n = out.numel();
  double loss = 0.0;
  Tensor<T> dy(out.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(out[i]) - static_cast<double>(eps[i]);
    loss += d * d;
    dy[i] = static_cast<T>(2.0 * d / static_cast<double>(n));
  }
  if (backward) net.backward(dy);
  return loss / static_cast<double>(n);
}

template <typename T>
Tensor<T> make_denoiser_input(std::span<const Volume3D* const> t1, std::span<const Volume3D* const> fa,
                              std::span<const int> timesteps, const Tensor<T>& eps, const NoiseSchedule& schedule) {
  const auto b = static_cast<std::int64_t>(t1.size());
  const Dims& d = t1[0]->dims();
  const auto s = static_cast<std::int64_t>(d.count());
  Tensor<T> x({b, 2, d.nx, d.ny, d.nz});
  for (std::int64_t i = 0; i < b; ++i) {
    const double a = std::sqrt(schedule.alpha_bars[timesteps[i]]);
    const double sd = std::sqrt(1.0 - schedule.alpha_bars[timesteps[i]]);
    const auto tv = t1[i]->voxels();
    const auto fv = fa[i]->voxels();
    T* c0 = x.data() + (i * 2) * s;
    T* c1 = c0 + s;
    const T* e = eps.data() + i * s;
    for (std::int64_t k = 0; k < s; ++k) {
      c0[k] = static_cast<T>(tv[k]);
      c1[k] = static_cast<T>(a * fv[k] + sd * e[k]);
    }
  }
  return x;
}

namespace {

void check_pairs(const std::vector<VolumePair>& pairs, const Dims& dims, const char* what) {
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    if (!(p.t1.dims() == dims) || !(p.fa.dims() == dims)) {
      throw std::invalid_argument(std::string(what) + " pair " + std::to_string(i) + " has dims " +
                                  to_string(p.t1.dims()) + "/" + to_string(p.fa.dims()) + ", expected " +
                                  to_string(dims));
    }
    if (p.t1.range_tag() != RangeTag::unit || p.fa.range_tag() != RangeTag::unit) {
      throw std::invalid_argument(std::string(what) + " pair " + std::to_string(i) + " is not unit-range");
    }
  }
}

struct NoiseBatch {
  std::vector<int> timesteps;
  Tensor<float> eps;
};

NoiseBatch draw_noise(Rng& rng, std::int64_t batch, const Dims& d, int timesteps) {
  NoiseBatch nb;
  nb.eps = Tensor<float>({batch, 1, d.nx, d.ny, d.nz});
  for (std::int64_t i = 0; i < batch; ++i) nb.timesteps.push_back(static_cast<int>(uniform_below(rng, timesteps)));
  for (auto& v : nb.eps.values()) v = static_cast<float>(standard_normal(rng));
  return nb;
}

}  // namespace

DdpmCheckpoint train_ddpm(const std::vector<VolumePair>& paired, const DdpmTrainConfig& cfg, DenoiserSpec spec,
                          const ScheduleParams& schedule_params, const std::vector<VolumePair>& val,
                          const TrainHooks& hooks) {
  cfg.validate();
  if (paired.empty()) throw std::invalid_argument("train_ddpm: empty training set");
  const Dims dims = paired.front().t1.dims();
  check_pairs(paired, dims, "training");
  check_pairs(val, dims, "validation");
  spec.input_dims = dims;
  spec.validate();

  const NoiseSchedule schedule = make_schedule(schedule_params);
  Denoiser<float> net(spec, derive_seed(cfg.seed, "init"));
  const auto params = net.parameters();
  nn::Adam<float> opt(params, nn::AdamOptions{.learning_rate = cfg.learning_rate});
  Rng rng(derive_seed(cfg.seed, "train"));

  DdpmCheckpoint ckpt;
  ckpt.spec = spec;
  ckpt.schedule_params = schedule_params;
  ckpt.seed = cfg.seed;

  std::vector<std::size_t> order(paired.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    int epoch_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Volume3D*> t1, fa;
      for (std::size_t k = start; k < end; ++k) {
        t1.push_back(&paired[order[k]].t1);
        fa.push_back(&paired[order[k]].fa);
      }
      const NoiseBatch nb = draw_noise(rng, static_cast<std::int64_t>(t1.size()), dims, schedule.timesteps);
      const Tensor<float> input = make_denoiser_input<float>(t1, fa, nb.timesteps, nb.eps, schedule);
      opt.zero_grad();
      const double loss = noise_prediction_loss(net, input, nb.timesteps, nb.eps, true);
      if (!std::isfinite(loss)) throw std::runtime_error("train_ddpm: loss diverged at epoch " + std::to_string(epoch));
      opt.step();
      ckpt.step_losses.push_back(loss);
      epoch_sum += loss;
      ++epoch_steps;
    }
    const double epoch_mean = epoch_sum / epoch_steps;
    ckpt.epoch_losses.push_back(epoch_mean);

    if (!val.empty()) {
      Rng vrng(derive_seed(cfg.seed, "val"));
      double vsum = 0.0;
      for (std::size_t start = 0; start < val.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(val.size(), start + static_cast<std::size_t>(cfg.batch_size));
        std::vector<const Volume3D*> t1, fa;
        for (std::size_t k = start; k < end; ++k) {
          t1.push_back(&val[k].t1);
          fa.push_back(&val[k].fa);
        }
        const NoiseBatch nb = draw_noise(vrng, static_cast<std::int64_t>(t1.size()), dims, schedule.timesteps);
        const Tensor<float> input = make_denoiser_input<float>(t1, fa, nb.timesteps, nb.eps, schedule);
        vsum += noise_prediction_loss(net, input, nb.timesteps, nb.eps, false) * static_cast<double>(t1.size());
      }
      ckpt.val_losses.push_back(vsum / static_cast<double>(val.size()));
    }
    ckpt.epochs_completed = epoch;
    if (hooks.on_epoch) hooks.on_epoch(epoch, epoch_mean);
  }

  const std::size_t tail = std::min<std::size_t>(10, ckpt.step_losses.size());
  ckpt.final_loss =
      std::accumulate(ckpt.step_losses.end() - static_cast<std::ptrdiff_t>(tail), ckpt.step_losses.end(), 0.0) /
      static_cast<double>(tail);
  ckpt.weights = nn::flatten_params(params);
  return ckpt;
}

// ---- sampling -----------------------------------------------------------------------

DenoiserPredictor::DenoiserPredictor(const DdpmCheckpoint& ckpt) : net_(ckpt.spec, 0) {
  nn::unflatten_params(ckpt.weights, net_.parameters());
}

Tensor<float> DenoiserPredictor::predict(const Tensor<float>& input, std::span<const int> timesteps) {
  return net_.forward(input, timesteps);
}

void reverse_step(std::span<float> x, std::span<const float> eps_hat, std::span<const float> z, int t,
                  const NoiseSchedule& s, bool clip_x0) {
  if (t < 0 || t >= s.timesteps) throw std::out_of_range("reverse_step: timestep out of range");
  if (eps_hat.size() != x.size() || (t > 0 && z.size() != x.size())) {
    throw std::invalid_argument("reverse_step: size mismatch");
  }
  const double beta = s.betas[t];
  const double alpha = s.alphas[t];
  const double ab = s.alpha_bars[t];
  const double sigma = std::sqrt(beta);
  if (!clip_x0) {
    const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
    const double eps_coef = beta / std::sqrt(1.0 - ab);
    for (std::size_t i = 0; i < x.size(); ++i) {
      double v = inv_sqrt_alpha * (x[i] - eps_coef * eps_hat[i]);
      if (t > 0) v += sigma * z[i];
      x[i] = static_cast<float>(v);
    }
    return;
  }
  const double ab_prev = t > 0 ? s.alpha_bars[t - 1] : 1.0;
  const double c_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
  const double c_xt = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
  const double sqrt_ab = std::sqrt(ab), sqrt_1mab = std::sqrt(1.0 - ab);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = std::clamp((x[i] - sqrt_1mab * eps_hat[i]) / sqrt_ab, 0.0, 1.0);
    double v = c_x0 * x0 + c_xt * x[i];
    if (t > 0) v += sigma * z[i];
    x[i] = static_cast<float>(v);
  }
}

std::vector<Volume3D> sample_conditional(NoisePredictor& predictor, const NoiseSchedule& schedule,
                                         std::span<const Volume3D* const> t1, std::span<const std::uint64_t> seeds,
                                         const SampleOptions& opts) {
  if (t1.size() != seeds.size()) throw std::invalid_argument("sample_conditional: one seed per volume required");
  if (opts.batch_size < 1) throw std::invalid_argument("sample_conditional: batch_size must be positive");
  std::vector<Volume3D> out;
  out.reserve(t1.size());
  for (std::size_t start = 0; start < t1.size(); start += opts.batch_size) {
    const std::size_t end = std::min(t1.size(), start + static_cast<std::size_t>(opts.batch_size));
    const auto b = static_cast<std::int64_t>(end - start);
    const Dims d = t1[start]->dims();
    const auto s = static_cast<std::int64_t>(d.count());
    for (std::size_t k = start; k < end; ++k) {
      if (!(t1[k]->dims() == d)) throw std::invalid_argument("sample_conditional: T1 dims differ within a batch");
    }

    std::vector<Rng> rngs;
    Tensor<float> input({b, 2, d.nx, d.ny, d.nz});
    for (std::int64_t i = 0; i < b; ++i) {
      rngs.emplace_back(seeds[start + i]);
      const auto tv = t1[start + i]->voxels();
      std::copy(tv.begin(), tv.end(), input.data() + (2 * i) * s);
      float* x = input.data() + (2 * i + 1) * s;
      for (std::int64_t k = 0; k < s; ++k) x[k] = static_cast<float>(standard_normal(rngs[i]));
    }

    std::vector<int> steps(static_cast<std::size_t>(b));
    std::vector<float> z(static_cast<std::size_t>(s));
    for (int t = schedule.timesteps - 1; t >= 0; --t) {
      std::fill(steps.begin(), steps.end(), t);
      const Tensor<float> eps = predictor.predict(input, steps);
      for (std::int64_t i = 0; i < b; ++i) {
        if (t > 0)
          for (auto& v : z) v = static_cast<float>(standard_normal(rngs[i]));
        std::span<float> x(input.data() + (2 * i + 1) * s, static_cast<std::size_t>(s));
        std::span<const float> e(eps.data() + i * s, static_cast<std::size_t>(s));
        reverse_step(x, e, z, t, schedule, opts.clip_intermediate_x0);
      }
    }

    for (std::int64_t i = 0; i < b; ++i) {
      const float* x = input.data() + (2 * i + 1) * s;
      std::vector<float> v(x, x + s);
      for (auto& e : v) e = std::clamp(e, 0.0f, 1.0f);
      out.emplace_back(d, t1[start + i]->spacing(), std::move(v), RangeTag::unit);
    }
  }
  return out;
}

Volume3D sample_conditional(const Volume3D& t1, const DdpmCheckpoint& ckpt, std::uint64_t seed,
                            const SampleOptions& opts) {
  if (!(t1.dims() == ckpt.spec.input_dims)) {
    throw std::invalid_argument("sample_conditional: T1 dims " + to_string(t1.dims()) + " differ from checkpoint " +
                                to_string(ckpt.spec.input_dims));
  }
  DenoiserPredictor predictor(ckpt);
  const Volume3D* p = &t1;
  return sample_conditional(predictor, ckpt.schedule(), std::span<const Volume3D* const>(&p, 1),
                            std::span<const std::uint64_t>(&seed, 1), opts)
      .front();
}

// ---- evaluation -------------------------------------------------------------------

TranslationReport evaluate_translation(const std::vector<VolumePair>& test,
                                       const std::function<Volume3D(const Volume3D&, std::size_t)>& sampler) {
  if (test.empty()) throw std::invalid_argument("evaluate_translation: empty test set");
  TranslationReport r;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const Volume3D fake = sampler(test[i].t1, i);
    r.per_pair.push_back(image_metrics(fake, test[i].fa));
  }
  const double n = static_cast<double>(test.size());
  for (const auto& m : r.per_pair) {
    r.ssim3d += m.ssim3d / n;
    r.psnr_db += m.psnr_db / n;
    r.l1 += m.l1 / n;
    r.mse += m.mse / n;
  }
  return r;
}

TranslationReport evaluate_translation(const DdpmCheckpoint& ckpt, const std::vector<VolumePair>& test,
                                       std::uint64_t seed, const SampleOptions& opts) {
  DenoiserPredictor predictor(ckpt);
  std::vector<const Volume3D*> t1;
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < test.size(); ++i) {
    t1.push_back(&test[i].t1);
    seeds.push_back(derive_seed(seed, i));
  }
  const auto samples = sample_conditional(predictor, ckpt.schedule(), t1, seeds, opts);
  return evaluate_translation(test, [&](const Volume3D&, std::size_t i) { return samples[i]; });
}

void to_json(nlohmann::json& j, const TranslationReport& r) {
  j = nlohmann::json{{"ssim3d", r.ssim3d},
                     {"psnr_db", std::isinf(r.psnr_db) ? nlohmann::json("inf") : nlohmann::json(r.psnr_db)},
                     {"l1", r.l1},
                     {"mse", r.mse},
                     {"n_pairs", r.per_pair.size()}};
}

template double noise_prediction_loss<float>(Denoiser<float>&, const Tensor<float>&, std::span<const int>,
                                             const Tensor<float>&, bool);
template double noise_prediction_loss<double>(Denoiser<double>&, const Tensor<double>&, std::span<const int>,
                                              const Tensor<double>&, bool);
template Tensor<float> make_denoiser_input<float>(std::span<const Volume3D* const>, std::span<const Volume3D* const>,
                                                  std::span<const int>, const Tensor<float>&, const NoiseSchedule&);
template Tensor<double> make_denoiser_input<double>(std::span<const Volume3D* const>,
                                                    std::span<const Volume3D* const>, std::span<const int>,
                                                    const Tensor<double>&, const NoiseSchedule&);

}  // namespace dwimpute::diffusion
