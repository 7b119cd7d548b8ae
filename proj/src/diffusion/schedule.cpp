#include "dwimpute/diffusion/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace dwimpute::diffusion {

NoiseSchedule scaled_linear_schedule(int timesteps, double beta_start, double beta_end) {
  if (timesteps < 2) throw std::invalid_argument("noise schedule needs at least 2 timesteps");
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("noise schedule requires 0 < beta_start < beta_end < 1");
  }
  NoiseSchedule s;
  s.timesteps = timesteps;
  s.betas.resize(timesteps);
  s.alphas.resize(timesteps);
  s.alpha_bars.resize(timesteps);
  const double r0 = std::sqrt(beta_start);
  const double r1 = std::sqrt(beta_end);
  for (int t = 0; t < timesteps; ++t) {
    const double r = r0 + (static_cast<double>(t) / (timesteps - 1)) * (r1 - r0);
    s.betas[t] = r * r;
  }
  // sqrt(b)^2 need not round-trip; pin the endpoints to the inputs.
  s.betas.front() = beta_start;
  s.betas.back() = beta_end;
  double prod = 1.0;
  for (int t = 0; t < timesteps; ++t) {
    s.alphas[t] = 1.0 - s.betas[t];
    prod *= s.alphas[t];
    s.alpha_bars[t] = prod;
  }
  return s;
}

Volume3D forward_noise(const Volume3D& x0, int t, const Volume3D& eps, const NoiseSchedule& s) {
  if (t < 0 || t >= s.timesteps) throw std::out_of_range("forward_noise: timestep out of range");
  if (!(x0.dims() == eps.dims())) throw std::invalid_argument("forward_noise: noise dims differ from x0");
  const double a = std::sqrt(s.alpha_bars[t]);
  const double b = std::sqrt(1.0 - s.alpha_bars[t]);
  std::vector<float> out(x0.size());
  auto xv = x0.voxels();
  auto ev = eps.voxels();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(a * xv[i] + b * ev[i]);
  return Volume3D(x0.dims(), x0.spacing(), std::move(out), RangeTag::raw);
}

void to_json(nlohmann::json& j, const ScheduleParams& p) {
  j = nlohmann::json{{"timesteps", p.timesteps}, {"beta_start", p.beta_start}, {"beta_end", p.beta_end}};
}

void from_json(const nlohmann::json& j, ScheduleParams& p) {
  p = ScheduleParams{};
  p.timesteps = j.value("timesteps", p.timesteps);
  p.beta_start = j.value("beta_start", p.beta_start);
  p.beta_end = j.value("beta_end", p.beta_end);
}

}  // namespace dwimpute::diffusion
