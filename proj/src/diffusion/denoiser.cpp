#include "dwimpute/diffusion/denoiser.hpp"

#include <cmath>
#include <stdexcept>

namespace dwimpute::diffusion {

using nn::Tensor;

std::array<int, 3> DenoiserSpec::widths() const {
  return {std::max(1, channel_widths[0] / width_scale), std::max(1, channel_widths[1] / width_scale),
          std::max(1, channel_widths[2] / width_scale)};
}

int DenoiserSpec::time_dim() const { return std::max(4, time_embedding_dim / width_scale); }

void DenoiserSpec::validate() const {
  if (in_channels != 2 || out_channels != 1) {
    throw std::invalid_argument("DenoiserSpec: expected in_channels = 2 and out_channels = 1");
  }
  if (width_scale < 1) throw std::invalid_argument("DenoiserSpec: width_scale must be >= 1");
  for (int w : channel_widths)
    if (w <= 0) throw std::invalid_argument("DenoiserSpec: channel widths must be positive");
  if (widths()[0] % 2 != 0) throw std::invalid_argument("DenoiserSpec: first stage width must be even");
  if (residual_blocks_per_stage < 1) throw std::invalid_argument("DenoiserSpec: need >= 1 residual block per stage");
  if (norm_groups < 1 || time_embedding_dim < 1) throw std::invalid_argument("DenoiserSpec: nonpositive field");
  if (!input_dims.positive() || input_dims.nx % 4 || input_dims.ny % 4 || input_dims.nz % 4) {
    throw std::invalid_argument("DenoiserSpec: input dims " + to_string(input_dims) + " must be divisible by 4");
  }
}

void to_json(nlohmann::json& j, const DenoiserSpec& s) {
  j = nlohmann::json{
      {"channel_widths", s.channel_widths},
      {"width_scale", s.width_scale},
      {"attention_at_final_encoder_stage", s.attention_at_final_encoder_stage},
      {"in_channels", s.in_channels},
      {"out_channels", s.out_channels},
      {"residual_blocks_per_stage", s.residual_blocks_per_stage},
      {"norm_groups", s.norm_groups},
      {"time_embedding_dim", s.time_embedding_dim},
      {"input_dims", {s.input_dims.nx, s.input_dims.ny, s.input_dims.nz}},
  };
}

void from_json(const nlohmann::json& j, DenoiserSpec& s) {
  s = DenoiserSpec{};
  if (j.contains("channel_widths")) s.channel_widths = j.at("channel_widths").get<std::array<int, 3>>();
  s.width_scale = j.value("width_scale", s.width_scale);
  s.attention_at_final_encoder_stage = j.value("attention_at_final_encoder_stage", s.attention_at_final_encoder_stage);
  s.in_channels = j.value("in_channels", s.in_channels);
  s.out_channels = j.value("out_channels", s.out_channels);
  s.residual_blocks_per_stage = j.value("residual_blocks_per_stage", s.residual_blocks_per_stage);
  s.norm_groups = j.value("norm_groups", s.norm_groups);
  s.time_embedding_dim = j.value("time_embedding_dim", s.time_embedding_dim);
  if (j.contains("input_dims")) {
    const auto& d = j.at("input_dims");
    s.input_dims = {d.at(0).get<int>(), d.at(1).get<int>(), d.at(2).get<int>()};
  }
}

template <typename T>
Tensor<T> timestep_embedding(std::span<const int> timesteps, int dim) {
  const int half = dim / 2;
  const auto n = static_cast<std::int64_t>(timesteps.size());
  Tensor<T> out({n, dim});
  for (std::int64_t b = 0; b < n; ++b)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      const double arg = timesteps[b] * freq;
      out[b * dim + i] = static_cast<T>(std::cos(arg));
      out[b * dim + half + i] = static_cast<T>(std::sin(arg));
    }
  return out;
}

// ---- ResidualBlock ------------------------------------------------------------

template <typename T>
ResidualBlock<T>::ResidualBlock(const std::string& name, int in_channels, int out_channels, int time_dim,
                                int groups, Rng& rng)
    : norm1_(name + ".norm1", in_channels, groups),
      conv1_(name + ".conv1", in_channels, out_channels, 3, 1, 1, rng),
      time_proj_(name + ".time_emb_proj", time_dim, out_channels, rng),
      norm2_(name + ".norm2", out_channels, groups),
      conv2_(name + ".conv2", out_channels, out_channels, 3, 1, 1, rng) {
  if (in_channels != out_channels) skip_.emplace(name + ".skip", in_channels, out_channels, 1, 1, 0, rng);
}

template <typename T>
void ResidualBlock<T>::collect(nn::ParamList<T>& out) {
  norm1_.collect(out);
  conv1_.collect(out);
  time_proj_.collect(out);
  norm2_.collect(out);
  conv2_.collect(out);
  if (skip_) skip_->collect(out);
}

template <typename T>
Tensor<T> ResidualBlock<T>::forward(const Tensor<T>& x, const Tensor<T>& temb_act) {
  Tensor<T> h = conv1_.forward(act1_.forward(norm1_.forward(x)));
  const Tensor<T> t = time_proj_.forward(temb_act);
  const std::int64_t n = h.dim(0), c = h.dim(1), s = h.spatial();
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      T* p = h.data() + (b * c + ch) * s;
      const T add = t[b * c + ch];
      for (std::int64_t i = 0; i < s; ++i) p[i] += add;
    }
  h = conv2_.forward(act2_.forward(norm2_.forward(h)));
  h += skip_ ? skip_->forward(x) : x;
  return h;
}

template <typename T>
Tensor<T> ResidualBlock<T>::backward(const Tensor<T>& dy, Tensor<T>& d_temb_act) {
  Tensor<T> dh = norm2_.backward(act2_.backward(conv2_.backward(dy)));
  const std::int64_t n = dh.dim(0), c = dh.dim(1), s = dh.spatial();
  Tensor<T> dt({n, c});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T* p = dh.data() + (b * c + ch) * s;
      double acc = 0.0;
      for (std::int64_t i = 0; i < s; ++i) acc += p[i];
      dt[b * c + ch] = static_cast<T>(acc);
    }
  d_temb_act += time_proj_.backward(dt);
  Tensor<T> dx = norm1_.backward(act1_.backward(conv1_.backward(dh)));
  dx += skip_ ? skip_->backward(dy) : dy;
  return dx;
}

// ---- Denoiser -------------------------------------------------------------------

template <typename T>
struct Denoiser<T>::Impl {
  std::array<int, 3> w{};
  int time_dim = 0;
  bool attention = true;

  nn::Linear<T> time1, time2;
  nn::SiLU<T> time_act, temb_act;
  nn::Conv3d<T> conv_in;
  std::array<std::vector<ResidualBlock<T>>, 3> enc;
  std::vector<nn::SpatialSelfAttention<T>> enc_attn;
  std::array<nn::Conv3d<T>, 2> down;
  std::vector<ResidualBlock<T>> mid;
  std::vector<nn::SpatialSelfAttention<T>> mid_attn;
  std::array<std::vector<ResidualBlock<T>>, 3> dec;
  std::vector<nn::SpatialSelfAttention<T>> dec_attn;
  std::array<nn::UpsampleNearest2<T>, 2> up;
  std::array<nn::Conv3d<T>, 2> up_conv;  // up_conv[s - 1] follows decoder stage s
  nn::GroupNorm<T> out_norm;
  nn::SiLU<T> out_act;
  nn::Conv3d<T> conv_out;

  std::int64_t batch = 0;

  void collect(nn::ParamList<T>& out) {
    time1.collect(out);
    time2.collect(out);
    conv_in.collect(out);
    for (int s = 0; s < 3; ++s) {
      for (std::size_t r = 0; r < enc[s].size(); ++r) {
        enc[s][r].collect(out);
        if (s == 2 && attention) enc_attn[r].collect(out);
      }
      if (s < 2) down[s].collect(out);
    }
    mid[0].collect(out);
    if (attention) mid_attn[0].collect(out);
    mid[1].collect(out);
    for (int s = 2; s >= 0; --s) {
      for (std::size_t r = 0; r < dec[s].size(); ++r) {
        dec[s][r].collect(out);
        if (s == 2 && attention) dec_attn[r].collect(out);
      }
      if (s > 0) up_conv[s - 1].collect(out);
    }
    out_norm.collect(out);
    conv_out.collect(out);
  }
};

template <typename T>
Denoiser<T>::Denoiser(const DenoiserSpec& spec, std::uint64_t seed) : spec_(spec), impl_(std::make_unique<Impl>()) {
  spec_.validate();
  Rng rng(seed);
  auto& m = *impl_;
  m.w = spec_.widths();
  m.time_dim = spec_.time_dim();
  m.attention = spec_.attention_at_final_encoder_stage;
  const int g = spec_.norm_groups;
  const int rb = spec_.residual_blocks_per_stage;
  const auto& w = m.w;

  m.time1 = nn::Linear<T>("time_embed.0", w[0], m.time_dim, rng);
  m.time2 = nn::Linear<T>("time_embed.2", m.time_dim, m.time_dim, rng);
  m.conv_in = nn::Conv3d<T>("conv_in", spec_.in_channels, w[0], 3, 1, 1, rng);
  m.conv_in.set_input_grad(false);

  for (int s = 0; s < 3; ++s) {
    for (int r = 0; r < rb; ++r) {
      const int cin = (r == 0 && s > 0) ? w[s - 1] : w[s];
      const std::string name = "down." + std::to_string(s) + ".res." + std::to_string(r);
      m.enc[s].emplace_back(name, cin, w[s], m.time_dim, g, rng);
      if (s == 2 && m.attention) {
        m.enc_attn.emplace_back("down.2.attn." + std::to_string(r), w[s], g, rng);
      }
    }
    if (s < 2) m.down[s] = nn::Conv3d<T>("down." + std::to_string(s) + ".downsample", w[s], w[s], 3, 2, 1, rng);
  }

  m.mid.emplace_back("mid.res.0", w[2], w[2], m.time_dim, g, rng);
  if (m.attention) m.mid_attn.emplace_back("mid.attn", w[2], g, rng);
  m.mid.emplace_back("mid.res.1", w[2], w[2], m.time_dim, g, rng);

  for (int s = 2; s >= 0; --s) {
    for (int r = 0; r < rb; ++r) {
      const int cin = r == 0 ? 2 * w[s] : w[s];
      const std::string name = "up." + std::to_string(s) + ".res." + std::to_string(r);
      m.dec[s].emplace_back(name, cin, w[s], m.time_dim, g, rng);
      if (s == 2 && m.attention) m.dec_attn.emplace_back("up.2.attn." + std::to_string(r), w[s], g, rng);
    }
    if (s > 0) {
      m.up_conv[s - 1] = nn::Conv3d<T>("up." + std::to_string(s) + ".upsample", w[s], w[s - 1], 3, 1, 1, rng);
    }
  }

  m.out_norm = nn::GroupNorm<T>("out.norm", w[0], g);
  m.conv_out = nn::Conv3d<T>("out.conv", w[0], spec_.out_channels, 3, 1, 1, rng);
  // Untrained model predicts zero noise.
  m.conv_out.zero_init();
}

template <typename T>
Denoiser<T>::~Denoiser() = default;
template <typename T>
Denoiser<T>::Denoiser(Denoiser&&) noexcept = default;
template <typename T>
Denoiser<T>& Denoiser<T>::operator=(Denoiser&&) noexcept = default;

template <typename T>
nn::ParamList<T> Denoiser<T>::parameters() {
  nn::ParamList<T> out;
  impl_->collect(out);
  return out;
}

template <typename T>
std::int64_t Denoiser<T>::num_parameters() {
  return nn::count_parameters(parameters());
}

template <typename T>
Tensor<T> Denoiser<T>::forward(const Tensor<T>& x, std::span<const int> timesteps) {
  const Dims& d = spec_.input_dims;
  if (x.rank() != 5 || x.dim(1) != spec_.in_channels || x.dim(2) != d.nx || x.dim(3) != d.ny || x.dim(4) != d.nz) {
    throw std::invalid_argument("Denoiser: expected input (N, " + std::to_string(spec_.in_channels) + ", " +
                                to_string(d) + "), got " + nn::shape_string(x.shape()));
  }
  if (static_cast<std::int64_t>(timesteps.size()) != x.dim(0)) {
    throw std::invalid_argument("Denoiser: one timestep per batch element required");
  }
  auto& m = *impl_;
  m.batch = x.dim(0);

  const Tensor<T> temb =
      m.temb_act.forward(m.time2.forward(m.time_act.forward(m.time1.forward(timestep_embedding<T>(timesteps, m.w[0])))));

  std::array<Tensor<T>, 3> skips;
  Tensor<T> h = m.conv_in.forward(x);
  for (int s = 0; s < 3; ++s) {
    for (std::size_t r = 0; r < m.enc[s].size(); ++r) {
      h = m.enc[s][r].forward(h, temb);
      if (s == 2 && m.attention) h = m.enc_attn[r].forward(h);
    }
    skips[s] = h;
    if (s < 2) h = m.down[s].forward(h);
  }

  h = m.mid[0].forward(h, temb);
  if (m.attention) h = m.mid_attn[0].forward(h);
  h = m.mid[1].forward(h, temb);

  for (int s = 2; s >= 0; --s) {
    h = nn::concat_channels(h, skips[s]);
    for (std::size_t r = 0; r < m.dec[s].size(); ++r) {
      h = m.dec[s][r].forward(h, temb);
      if (s == 2 && m.attention) h = m.dec_attn[r].forward(h);
    }
    if (s > 0) h = m.up_conv[s - 1].forward(m.up[s - 1].forward(h));
  }
  return m.conv_out.forward(m.out_act.forward(m.out_norm.forward(h)));
}

template <typename T>
void Denoiser<T>::backward(const Tensor<T>& dy) {
  auto& m = *impl_;
  Tensor<T> d_temb({m.batch, m.time_dim});
  std::array<Tensor<T>, 3> dskips;

  Tensor<T> dh = m.out_norm.backward(m.out_act.backward(m.conv_out.backward(dy)));
  for (int s = 0; s < 3; ++s) {
    if (s > 0) dh = m.up[s - 1].backward(m.up_conv[s - 1].backward(dh));
    for (std::size_t r = m.dec[s].size(); r-- > 0;) {
      if (s == 2 && m.attention) dh = m.dec_attn[r].backward(dh);
      dh = m.dec[s][r].backward(dh, d_temb);
    }
    Tensor<T> dprev;
    nn::split_channels(dh, m.w[s], dprev, dskips[s]);
    dh = std::move(dprev);
  }

  dh = m.mid[1].backward(dh, d_temb);
  if (m.attention) dh = m.mid_attn[0].backward(dh);
  dh = m.mid[0].backward(dh, d_temb);

  for (int s = 2; s >= 0; --s) {
    if (s < 2) dh = m.down[s].backward(dh);
    dh += dskips[s];
    for (std::size_t r = m.enc[s].size(); r-- > 0;) {
      if (s == 2 && m.attention) dh = m.enc_attn[r].backward(dh);
      dh = m.enc[s][r].backward(dh, d_temb);
    }
  }
  m.conv_in.backward(dh);

  m.time1.backward(m.time_act.backward(m.time2.backward(m.temb_act.backward(d_temb))));
}

template Tensor<float> timestep_embedding<float>(std::span<const int>, int);
template Tensor<double> timestep_embedding<double>(std::span<const int>, int);
template class ResidualBlock<float>;
template class ResidualBlock<double>;
template class Denoiser<float>;
template class Denoiser<double>;

}  // namespace dwimpute::diffusion
