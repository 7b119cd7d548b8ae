#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dwimpute/diffusion/denoiser.hpp"
#include "dwimpute/diffusion/schedule.hpp"
#include "dwimpute/metrics.hpp"
#include "dwimpute/volume.hpp"
#include "json.hpp"

namespace dwimpute::diffusion {

struct DdpmTrainConfig {
  int epochs = 300;
  double learning_rate = 5e-5;
  int batch_size = 2;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const DdpmTrainConfig& c);
void from_json(const nlohmann::json& j, DdpmTrainConfig& c);

struct VolumePair {
  Volume3D t1;
  Volume3D fa;
};

struct DdpmCheckpoint {
  DenoiserSpec spec;
  ScheduleParams schedule_params;
  std::vector<float> weights;
  int epochs_completed = 0;
  /// Mean of the last (up to) 10 step losses.
  double final_loss = 0.0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;
  std::vector<double> val_losses;

  NoiseSchedule schedule() const { return make_schedule(schedule_params); }
};

/// Writes `dir/weights.bin` and `dir/meta.json`.
void save_checkpoint(const DdpmCheckpoint& ckpt, const std::filesystem::path& dir);
DdpmCheckpoint load_checkpoint(const std::filesystem::path& dir);

/// Mean squared error between predicted and true noise; when `backward` is
/// set the gradient is accumulated into the network's parameters.
/// input: (N, 2, D, H, W) = [T1, x_t]; eps: (N, 1, D, H, W).
template <typename T>
double noise_prediction_loss(Denoiser<T>& net, const nn::Tensor<T>& input, std::span<const int> timesteps,
                             const nn::Tensor<T>& eps, bool backward);

/// Builds [T1, forward_noise(fa, t, eps)] for a batch.
template <typename T>
nn::Tensor<T> make_denoiser_input(std::span<const Volume3D* const> t1, std::span<const Volume3D* const> fa,
                                  std::span<const int> timesteps, const nn::Tensor<T>& eps,
                                  const NoiseSchedule& schedule);

struct TrainHooks {
  /// Called after every epoch with (epoch index from 1, mean train loss).
  std::function<void(int, double)> on_epoch;
};

/// Trains a denoiser from scratch. The network's input dims are taken from
/// the data. `val`, when nonempty, is scored after each epoch with fixed
/// noise; the score is recorded and not acted on.
DdpmCheckpoint train_ddpm(const std::vector<VolumePair>& paired, const DdpmTrainConfig& cfg, DenoiserSpec spec,
                          const ScheduleParams& schedule, const std::vector<VolumePair>& val = {},
                          const TrainHooks& hooks = {});

struct SampleOptions {
  /// Clip the implied x0 to [0, 1] at every reverse step (posterior-mean
  /// form). The final sample is always clipped.
  bool clip_intermediate_x0 = false;
  /// Volumes denoised together per network call.
  int batch_size = 4;
};

/// Anything that predicts noise for a batch: (N, 2, D, H, W) -> (N, 1, D, H, W).
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual nn::Tensor<float> predict(const nn::Tensor<float>& input, std::span<const int> timesteps) = 0;
};

class DenoiserPredictor final : public NoisePredictor {
 public:
  explicit DenoiserPredictor(const DdpmCheckpoint& ckpt);
  nn::Tensor<float> predict(const nn::Tensor<float>& input, std::span<const int> timesteps) override;

 private:
  Denoiser<float> net_;
};

/// One ancestral update in place:
/// x <- (x - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t) + sqrt(beta_t) * z,
/// with z ignored at t = 0. With clip_x0 the mean is the posterior mean for
/// the clipped x0 estimate.
void reverse_step(std::span<float> x, std::span<const float> eps_hat, std::span<const float> z, int t,
                  const NoiseSchedule& schedule, bool clip_x0 = false);

/// Ancestral sampling for each T1, with an independent RNG per volume seeded
/// from `seeds`. Output is clipped to [0, 1] and unit-tagged.
std::vector<Volume3D> sample_conditional(NoisePredictor& predictor, const NoiseSchedule& schedule,
                                         std::span<const Volume3D* const> t1, std::span<const std::uint64_t> seeds,
                                         const SampleOptions& opts = {});

Volume3D sample_conditional(const Volume3D& t1, const DdpmCheckpoint& ckpt, std::uint64_t seed,
                            const SampleOptions& opts = {});

struct TranslationReport {
  double ssim3d = 0.0;
  double psnr_db = 0.0;
  double l1 = 0.0;
  double mse = 0.0;
  std::vector<ImageMetrics> per_pair;
};

/// Per-metric means of image_metrics(sample(t1_i), fa_i). A mean PSNR is
/// +inf if any pair is reproduced exactly.
TranslationReport evaluate_translation(const std::vector<VolumePair>& test,
                                       const std::function<Volume3D(const Volume3D& t1, std::size_t i)>& sampler);
TranslationReport evaluate_translation(const DdpmCheckpoint& ckpt, const std::vector<VolumePair>& test,
                                       std::uint64_t seed, const SampleOptions& opts = {});

void to_json(nlohmann::json& j, const TranslationReport& r);

}  // namespace dwimpute::diffusion
