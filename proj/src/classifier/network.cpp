#include "dwimpute/classifier/network.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>

namespace dwimpute::classifier {

using nn::Tensor;

std::string to_string(Modality m) {
  switch (m) {
    case Modality::T1: return "T1";
    case Modality::DWI: return "DWI";
    case Modality::Both: return "T1+DWI";
  }
  return "?";
}

Modality modality_from_string(const std::string& s) {
  std::string l = s;
  std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
  if (l == "t1") return Modality::T1;
  if (l == "dwi") return Modality::DWI;
  if (l == "both" || l == "t1+dwi") return Modality::Both;
  throw std::invalid_argument("unknown modality '" + s + "' (expected t1, dwi or both)");
}

std::array<int, 5> BackboneSpec::widths() const {
  std::array<int, 5> w{};
  for (int i = 0; i < 5; ++i) w[i] = std::max(1, block_widths[i] / width_scale);
  return w;
}

int BackboneSpec::head() const { return std::max(1, head_width / width_scale); }

std::array<bool, 5> BackboneSpec::pooling() const {
  std::array<bool, 5> p{};
  int d[3] = {input_dims.nx, input_dims.ny, input_dims.nz};
  for (int i = 0; i < 5; ++i) {
    p[i] = std::min({d[0], d[1], d[2]}) >= 4;
    if (p[i])
      for (int& v : d) v /= 2;
  }
  return p;
}

void BackboneSpec::validate() const {
  for (int w : block_widths)
    if (w <= 0) throw std::invalid_argument("BackboneSpec: block widths must be positive");
  if (head_width <= 0 || width_scale < 1 || norm_groups < 1) {
    throw std::invalid_argument("BackboneSpec: head_width, width_scale and norm_groups must be positive");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw std::invalid_argument("BackboneSpec: dropout_rate not in [0, 1)");
  if (num_classes < 2) throw std::invalid_argument("BackboneSpec: num_classes must be >= 2");
  if (conv_kernel < 1 || conv_kernel % 2 == 0) throw std::invalid_argument("BackboneSpec: conv_kernel must be odd");
  if (!input_dims.positive() || std::min({input_dims.nx, input_dims.ny, input_dims.nz}) < 4) {
    throw std::invalid_argument("BackboneSpec: input dims " + to_string(input_dims) +
                                " too small for pooling (need >= 4 per axis)");
  }
}

void to_json(nlohmann::json& j, const BackboneSpec& s) {
  j = nlohmann::json{{"block_widths", s.block_widths},
                     {"head_width", s.head_width},
                     {"width_scale", s.width_scale},
                     {"dropout_rate", s.dropout_rate},
                     {"norm_groups", s.norm_groups},
                     {"num_classes", s.num_classes},
                     {"conv_kernel", s.conv_kernel},
                     {"input_dims", {s.input_dims.nx, s.input_dims.ny, s.input_dims.nz}}};
}

void from_json(const nlohmann::json& j, BackboneSpec& s) {
  s = BackboneSpec{};
  if (j.contains("block_widths")) s.block_widths = j.at("block_widths").get<std::array<int, 5>>();
  s.head_width = j.value("head_width", s.head_width);
  s.width_scale = j.value("width_scale", s.width_scale);
  s.dropout_rate = j.value("dropout_rate", s.dropout_rate);
  s.norm_groups = j.value("norm_groups", s.norm_groups);
  s.num_classes = j.value("num_classes", s.num_classes);
  s.conv_kernel = j.value("conv_kernel", s.conv_kernel);
  if (j.contains("input_dims")) {
    const auto& d = j.at("input_dims");
    s.input_dims = {d.at(0).get<int>(), d.at(1).get<int>(), d.at(2).get<int>()};
  }
}

// ---- Trunk ------------------------------------------------------------------------

template <typename T>
Trunk<T>::Trunk(const std::string& name, const BackboneSpec& spec, Rng& rng) : pool_(spec.pooling()) {
  const auto w = spec.widths();
  const int k = spec.conv_kernel;
  int cin = 1;
  for (int i = 0; i < 5; ++i) {
    const std::string b = name + ".block" + std::to_string(i);
    conv_[i] = nn::Conv3d<T>(b + ".conv", cin, w[i], k, 1, k / 2, rng);
    norm_[i] = nn::GroupNorm<T>(b + ".norm", w[i], spec.norm_groups);
    cin = w[i];
  }
  conv_[0].set_input_grad(false);
  head_conv_ = nn::Conv3d<T>(name + ".head.conv", cin, spec.head(), 1, 1, 0, rng);
  head_norm_ = nn::GroupNorm<T>(name + ".head.norm", spec.head(), spec.norm_groups);
}

template <typename T>
void Trunk<T>::collect(nn::ParamList<T>& out) {
  for (int i = 0; i < 5; ++i) {
    conv_[i].collect(out);
    norm_[i].collect(out);
  }
  head_conv_.collect(out);
  head_norm_.collect(out);
}

template <typename T>
Tensor<T> Trunk<T>::forward(const Tensor<T>& x) {
  Tensor<T> h = x;
  for (int i = 0; i < 5; ++i) {
    h = norm_[i].forward(conv_[i].forward(h));
    if (pool_[i]) h = maxpool_[i].forward(h);
    h = relu_[i].forward(h);
  }
  h = head_relu_.forward(head_norm_.forward(head_conv_.forward(h)));
  return gap_.forward(h);
}

template <typename T>
Tensor<T> Trunk<T>::backward(const Tensor<T>& dy) {
  Tensor<T> d = head_conv_.backward(head_norm_.backward(head_relu_.backward(gap_.backward(dy))));
  for (int i = 4; i >= 0; --i) {
    d = relu_[i].backward(d);
    if (pool_[i]) d = maxpool_[i].backward(d);
    d = conv_[i].backward(norm_[i].backward(d));
  }
  return d;
}

// ---- ClassifierNet ------------------------------------------------------------------

template <typename T>
ClassifierNet<T>::ClassifierNet(const BackboneSpec& spec, Modality modality, std::uint64_t seed)
    : spec_(spec), modality_(modality) {
  spec_.validate();
  Rng rng(seed);
  const int n_trunks = modality == Modality::Both ? 2 : 1;
  for (int i = 0; i < n_trunks; ++i) {
    const std::string name = modality == Modality::Both ? (i == 0 ? "t1" : "dwi") : "trunk";
    trunks_.emplace_back(name, spec_, rng);
    dropouts_.emplace_back(spec_.dropout_rate);
  }
  fc_ = nn::Linear<T>("fc", n_trunks * spec_.head(), spec_.num_classes, rng);
}

template <typename T>
nn::ParamList<T> ClassifierNet<T>::parameters() {
  nn::ParamList<T> out;
  for (auto& t : trunks_) t.collect(out);
  fc_.collect(out);
  return out;
}

template <typename T>
Tensor<T> ClassifierNet<T>::forward(const Tensor<T>& a, const Tensor<T>* b, bool training, Rng& rng) {
  const Dims& d = spec_.input_dims;
  auto check = [&](const Tensor<T>& x) {
    if (x.rank() != 5 || x.dim(1) != 1 || x.dim(2) != d.nx || x.dim(3) != d.ny || x.dim(4) != d.nz) {
      throw std::invalid_argument("ClassifierNet: expected input (N, 1, " + to_string(d) + "), got " +
                                  nn::shape_string(x.shape()));
    }
  };
  check(a);
  Tensor<T> f = dropouts_[0].forward(trunks_[0].forward(a), training, rng);
  if (modality_ == Modality::Both) {
    if (b == nullptr) throw std::invalid_argument("ClassifierNet: bimodal model needs a DWI input");
    check(*b);
    if (b->dim(0) != a.dim(0)) throw std::invalid_argument("ClassifierNet: batch sizes differ between modalities");
    f = nn::concat_channels(f, dropouts_[1].forward(trunks_[1].forward(*b), training, rng));
  }
  return fc_.forward(f);
}

template <typename T>
void ClassifierNet<T>::backward(const Tensor<T>& dlogits) {
  Tensor<T> df = fc_.backward(dlogits);
  if (modality_ == Modality::Both) {
    Tensor<T> da, db;
    nn::split_channels(df, spec_.head(), da, db);
    trunks_[0].backward(dropouts_[0].backward(da));
    trunks_[1].backward(dropouts_[1].backward(db));
  } else {
    trunks_[0].backward(dropouts_[0].backward(df));
  }
}

std::vector<double> softmax_rows(std::span<const double> logits, int k) {
  std::vector<double> p(logits.size());
  for (std::size_t r = 0; r * k < logits.size(); ++r) {
    const double* z = logits.data() + r * k;
    const double m = *std::max_element(z, z + k);
    double s = 0.0;
    for (int c = 0; c < k; ++c) s += std::exp(z[c] - m);
    for (int c = 0; c < k; ++c) p[r * k + c] = std::exp(z[c] - m) / s;
  }
  return p;
}

template <typename T>
double cross_entropy(const Tensor<T>& logits, std::span<const int> labels, Tensor<T>* dlogits) {
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n) throw std::invalid_argument("cross_entropy: label count");
  std::vector<double> z(logits.values().begin(), logits.values().end());
  const auto p = softmax_rows(z, static_cast<int>(k));
  if (dlogits) *dlogits = Tensor<T>(logits.shape());
  double loss = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= k) throw std::invalid_argument("cross_entropy: label out of range");
    const double* zi = z.data() + i * k;
    const double m = *std::max_element(zi, zi + k);
    double s = 0.0;
    for (std::int64_t c = 0; c < k; ++c) s += std::exp(zi[c] - m);
    loss += -(zi[y] - m - std::log(s));
    if (dlogits) {
      for (std::int64_t c = 0; c < k; ++c) {
        (*dlogits)[i * k + c] = static_cast<T>((p[i * k + c] - (c == y ? 1.0 : 0.0)) / static_cast<double>(n));
      }
    }
  }
  return loss / static_cast<double>(n);
}

template class Trunk<float>;
template class Trunk<double>;
template class ClassifierNet<float>;
template class ClassifierNet<double>;
template double cross_entropy<float>(const Tensor<float>&, std::span<const int>, Tensor<float>*);
template double cross_entropy<double>(const Tensor<double>&, std::span<const int>, Tensor<double>*);

}  // namespace dwimpute::classifier
