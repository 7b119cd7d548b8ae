#pragma once

#include <vector>

#include "dwimpute/volume.hpp"
#include "json.hpp"

namespace dwimpute::diffusion {

/// Variance schedule of the forward process. alpha_t = 1 - beta_t and
/// alpha_bar_t = prod_{s <= t} alpha_s, all indexed from t = 0.
struct NoiseSchedule {
  int timesteps = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
};

struct ScheduleParams {
  int timesteps = 1000;
  double beta_start = 5e-4;
  double beta_end = 1.95e-2;

  bool operator==(const ScheduleParams&) const = default;
};

/// "Scaled linear": beta linear in sqrt(beta), then squared. The endpoints
/// are the inputs exactly.
NoiseSchedule scaled_linear_schedule(int timesteps, double beta_start, double beta_end);
inline NoiseSchedule make_schedule(const ScheduleParams& p) {
  return scaled_linear_schedule(p.timesteps, p.beta_start, p.beta_end);
}

/// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps, voxelwise. The
/// result is raw-tagged.
Volume3D forward_noise(const Volume3D& x0, int t, const Volume3D& eps, const NoiseSchedule& s);

void to_json(nlohmann::json& j, const ScheduleParams& p);
void from_json(const nlohmann::json& j, ScheduleParams& p);

}  // namespace dwimpute::diffusion
