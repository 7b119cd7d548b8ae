#include "dwimpute/metrics.hpp"

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace dwimpute {

void ScoreMatrix::validate() const {
  if (n_classes < 2) throw std::invalid_argument("ScoreMatrix: need at least 2 classes");
  if (probs.size() != labels.size() * static_cast<std::size_t>(n_classes)) {
    throw std::invalid_argument("ScoreMatrix: probs size does not match n_samples * n_classes");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes) {
      throw std::invalid_argument("ScoreMatrix: label " + std::to_string(labels[i]) + " out of range");
    }
    double s = 0.0;
    for (int c = 0; c < n_classes; ++c) {
      const double p = at(i, c);
      if (!(p >= 0.0)) throw std::invalid_argument("ScoreMatrix: negative or NaN probability");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-6) {
      throw std::invalid_argument("ScoreMatrix: row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
  }
}

std::optional<double> rank_auc(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  if (scores.size() != positive.size()) throw std::invalid_argument("rank_auc: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    // Ranks i+1..j+1 share their average.
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k) {
      if (positive[order[k]]) {
        pos_rank_sum += avg_rank;
        ++n_pos;
      }
    }
    i = j + 1;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double p = static_cast<double>(n_pos);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(n_neg));
}

MetricReport classification_metrics(const ScoreMatrix& scores) {
  scores.validate();
  const std::size_t n = scores.n_samples();
  if (n == 0) throw std::invalid_argument("classification_metrics: no samples");
  const int k = scores.n_classes;

  std::vector<int> pred(n);
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    for (int c = 1; c < k; ++c)
      if (scores.at(i, c) > scores.at(i, best)) best = c;
    pred[i] = best;
  }

  std::vector<std::size_t> tp(k, 0), fp(k, 0), fn(k, 0), support(k, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = scores.labels[i];
    ++support[y];
    if (pred[i] == y) {
      ++correct;
      ++tp[y];
    } else {
      ++fp[pred[i]];
      ++fn[y];
    }
  }

  MetricReport r;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);

  std::vector<int> absent;
  for (int c = 0; c < k; ++c)
    if (support[c] == 0) absent.push_back(c);

  std::vector<double> flat_scores(n * k);
  std::vector<std::uint8_t> flat_pos(n * k);
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < k; ++c) {
      flat_scores[i * k + c] = scores.at(i, c);
      flat_pos[i * k + c] = scores.labels[i] == c;
    }
  r.micro_auc = rank_auc(flat_scores, flat_pos);

  if (!absent.empty()) {
    std::string which;
    for (int c : absent) which += (which.empty() ? "" : ", ") + std::to_string(c);
    r.warnings.push_back("class(es) " + which +
                         " absent from labels; balanced_accuracy, macro_auc, macro_precision and macro_f1 undefined");
    return r;
  }

  double recall_sum = 0.0, precision_sum = 0.0, f1_sum = 0.0, auc_sum = 0.0;
  std::vector<double> col(n);
  std::vector<std::uint8_t> pos(n);
  for (int c = 0; c < k; ++c) {
    const double recall = static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fn[c]);
    const std::size_t pp = tp[c] + fp[c];
    const double precision = pp == 0 ? 0.0 : static_cast<double>(tp[c]) / static_cast<double>(pp);
    const double f1 = (precision + recall) == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
    recall_sum += recall;
    precision_sum += precision;
    f1_sum += f1;

    for (std::size_t i = 0; i < n; ++i) {
      col[i] = scores.at(i, c);
      pos[i] = scores.labels[i] == c;
    }
    const auto auc = rank_auc(col, pos);
    if (!auc) {
      r.warnings.push_back("class " + std::to_string(c) + " has no negatives; macro_auc undefined");
      auc_sum = std::numeric_limits<double>::quiet_NaN();
    } else {
      auc_sum += *auc;
    }
  }
  r.balanced_accuracy = recall_sum / k;
  r.macro_precision = precision_sum / k;
  r.macro_f1 = f1_sum / k;
  if (!std::isnan(auc_sum)) r.macro_auc = auc_sum / k;
  return r;
}

namespace {

void check_same_dims(const Volume3D& a, const Volume3D& b, const char* what) {
  if (!(a.dims() == b.dims())) {
    throw std::invalid_argument(std::string(what) + ": dims differ (" + to_string(a.dims()) + " vs " +
                                to_string(b.dims()) + ")");
  }
}

double ssim_formula(double mx, double my, double vx, double vy, double cxy) {
  constexpr double C1 = 0.01 * 0.01;
  constexpr double C2 = 0.03 * 0.03;
  // Products written so that swapping (x, y) gives the identical value.
  return ((2.0 * (mx * my) + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
}

// Summed-volume table with a zero border: S(i, j, k) = sum over [0, i) x [0, j) x [0, k).
class IntegralVolume {
 public:
  template <typename F>
  IntegralVolume(const Dims& d, F value) : ny_(d.ny + 1), nz_(d.nz + 1), s_((d.nx + 1) * ny_ * nz_, 0.0) {
    for (int x = 1; x <= d.nx; ++x)
      for (int y = 1; y <= d.ny; ++y)
        for (int z = 1; z <= d.nz; ++z) {
          s_[idx(x, y, z)] = value(x - 1, y - 1, z - 1) + s_[idx(x - 1, y, z)] + s_[idx(x, y - 1, z)] +
                             s_[idx(x, y, z - 1)] - s_[idx(x - 1, y - 1, z)] - s_[idx(x - 1, y, z - 1)] -
                             s_[idx(x, y - 1, z - 1)] + s_[idx(x - 1, y - 1, z - 1)];
        }
  }

  /// Sum over the box [x0, x0 + w) x [y0, y0 + w) x [z0, z0 + w).
  double box(int x0, int y0, int z0, int w) const {
    const int x1 = x0 + w, y1 = y0 + w, z1 = z0 + w;
    return s_[idx(x1, y1, z1)] - s_[idx(x0, y1, z1)] - s_[idx(x1, y0, z1)] - s_[idx(x1, y1, z0)] +
           s_[idx(x0, y0, z1)] + s_[idx(x0, y1, z0)] + s_[idx(x1, y0, z0)] - s_[idx(x0, y0, z0)];
  }

 private:
  std::size_t idx(int x, int y, int z) const { return (static_cast<std::size_t>(x) * ny_ + y) * nz_ + z; }
  std::size_t ny_, nz_;
  std::vector<double> s_;
};

}  // namespace

SsimResult ssim3d_detailed(const Volume3D& a, const Volume3D& b) {
  check_same_dims(a, b, "ssim3d");
  const Dims& d = a.dims();
  const auto av = a.voxels();
  const auto bv = b.voxels();

  if (d.nx < kSsimWindow || d.ny < kSsimWindow || d.nz < kSsimWindow) {
    const double n = static_cast<double>(av.size());
    double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
    for (std::size_t i = 0; i < av.size(); ++i) {
      const double x = av[i], y = bv[i];
      sa += x;
      sb += y;
      saa += x * x;
      sbb += y * y;
      sab += x * y;
    }
    const double mx = sa / n, my = sb / n;
    return {ssim_formula(mx, my, saa / n - mx * mx, sbb / n - my * my, sab / n - mx * my), true};
  }

  auto va = [&](int x, int y, int z) { return static_cast<double>(av[a.index(x, y, z)]); };
  auto vb = [&](int x, int y, int z) { return static_cast<double>(bv[a.index(x, y, z)]); };
  const IntegralVolume ia(d, va);
  const IntegralVolume ib(d, vb);
  const IntegralVolume iaa(d, [&](int x, int y, int z) { return va(x, y, z) * va(x, y, z); });
  const IntegralVolume ibb(d, [&](int x, int y, int z) { return vb(x, y, z) * vb(x, y, z); });
  const IntegralVolume iab(d, [&](int x, int y, int z) { return va(x, y, z) * vb(x, y, z); });

  const int w = kSsimWindow;
  const double n = static_cast<double>(w) * w * w;
  double total = 0.0;
  std::size_t count = 0;
  for (int x = 0; x + w <= d.nx; ++x)
    for (int y = 0; y + w <= d.ny; ++y)
      for (int z = 0; z + w <= d.nz; ++z) {
        const double mx = ia.box(x, y, z, w) / n;
        const double my = ib.box(x, y, z, w) / n;
        const double vx = iaa.box(x, y, z, w) / n - mx * mx;
        const double vy = ibb.box(x, y, z, w) / n - my * my;
        const double cxy = iab.box(x, y, z, w) / n - mx * my;
        total += ssim_formula(mx, my, vx, vy, cxy);
        ++count;
      }
  return {total / static_cast<double>(count), false};
}

double mse(const Volume3D& a, const Volume3D& b) {
  check_same_dims(a, b, "mse");
  const auto av = a.voxels();
  const auto bv = b.voxels();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double e = static_cast<double>(av[i]) - bv[i];
    s += e * e;
  }
  return s / static_cast<double>(av.size());
}

double l1(const Volume3D& a, const Volume3D& b) {
  check_same_dims(a, b, "l1");
  const auto av = a.voxels();
  const auto bv = b.voxels();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += std::abs(static_cast<double>(av[i]) - bv[i]);
  return s / static_cast<double>(av.size());
}

double psnr_from_mse(double m) {
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

double psnr(const Volume3D& a, const Volume3D& b) { return psnr_from_mse(mse(a, b)); }

ImageMetrics image_metrics(const Volume3D& prediction, const Volume3D& reference) {
  ImageMetrics m;
  const SsimResult s = ssim3d_detailed(prediction, reference);
  m.ssim3d = s.value;
  m.ssim_global_fallback = s.global_fallback;
  m.mse = mse(prediction, reference);
  m.l1 = l1(prediction, reference);
  m.psnr_db = psnr_from_mse(m.mse);
  return m;
}

std::string format_mean_std(double mean, double stddev) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f±%.2f", mean, stddev);
  return buf;
}

std::string AggregateCell::format() const {
  if (!mean) return "--";
  return format_mean_std(*mean * 100.0, stddev.value_or(0.0) * 100.0);
}

AggregatedMetrics aggregate_runs(const std::vector<MetricReport>& reports) {
  AggregatedMetrics out;
  out.n_runs = static_cast<int>(reports.size());
  if (reports.size() < 2) {
    out.warnings.push_back("fewer than 2 runs; standard deviation reported as 0");
  }
  auto agg = [&](std::optional<double> MetricReport::*field, const char* name) {
    AggregateCell cell;
    if (reports.empty()) return cell;
    std::vector<double> xs;
    for (const auto& r : reports) {
      if (!(r.*field)) {
        out.warnings.push_back(std::string(name) + " undefined in at least one run");
        return cell;
      }
      xs.push_back(*(r.*field));
    }
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    cell.mean = mean;
    cell.stddev = xs.size() < 2 ? 0.0 : std::sqrt(ss / static_cast<double>(xs.size() - 1));
    return cell;
  };
  out.accuracy = agg(&MetricReport::accuracy, "accuracy");
  out.balanced_accuracy = agg(&MetricReport::balanced_accuracy, "balanced_accuracy");
  out.micro_auc = agg(&MetricReport::micro_auc, "micro_auc");
  out.macro_auc = agg(&MetricReport::macro_auc, "macro_auc");
  out.macro_precision = agg(&MetricReport::macro_precision, "macro_precision");
  out.macro_f1 = agg(&MetricReport::macro_f1, "macro_f1");
  return out;
}

namespace {

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::optional<double> opt_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

nlohmann::json real_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double real_from(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    throw std::invalid_argument("expected a number or \"inf\", got \"" + s + "\"");
  }
  return j.get<double>();
}

}  // namespace

void to_json(nlohmann::json& j, const ImageMetrics& m) {
  j = nlohmann::json{{"ssim3d", m.ssim3d},
                     {"psnr_db", real_json(m.psnr_db)},
                     {"l1", m.l1},
                     {"mse", m.mse},
                     {"ssim_global_fallback", m.ssim_global_fallback}};
}

void from_json(const nlohmann::json& j, ImageMetrics& m) {
  m.ssim3d = j.at("ssim3d").get<double>();
  m.psnr_db = real_from(j.at("psnr_db"));
  m.l1 = j.at("l1").get<double>();
  m.mse = j.at("mse").get<double>();
  m.ssim_global_fallback = j.value("ssim_global_fallback", false);
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  j = nlohmann::json{{"accuracy", opt_json(r.accuracy)},
                     {"balanced_accuracy", opt_json(r.balanced_accuracy)},
                     {"micro_auc", opt_json(r.micro_auc)},
                     {"macro_auc", opt_json(r.macro_auc)},
                     {"macro_precision", opt_json(r.macro_precision)},
                     {"macro_f1", opt_json(r.macro_f1)},
                     {"warnings", r.warnings}};
  if (r.image) j.update(nlohmann::json(*r.image));
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  r = MetricReport{};
  r.accuracy = opt_from(j, "accuracy");
  r.balanced_accuracy = opt_from(j, "balanced_accuracy");
  r.micro_auc = opt_from(j, "micro_auc");
  r.macro_auc = opt_from(j, "macro_auc");
  r.macro_precision = opt_from(j, "macro_precision");
  r.macro_f1 = opt_from(j, "macro_f1");
  if (j.contains("warnings")) r.warnings = j.at("warnings").get<std::vector<std::string>>();
  if (j.contains("ssim3d")) r.image = j.get<ImageMetrics>();
}

}  // namespace dwimpute
