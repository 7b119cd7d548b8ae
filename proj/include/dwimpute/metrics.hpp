#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dwimpute/volume.hpp"
#include "json.hpp"

namespace dwimpute {

/// n_samples x n_classes probability rows (row-major) plus true labels.
struct ScoreMatrix {
  int n_classes = 3;
  std::vector<double> probs;
  std::vector<int> labels;

  std::size_t n_samples() const { return labels.size(); }
  double at(std::size_t i, int c) const { return probs[i * n_classes + c]; }
  /// Throws std::invalid_argument if rows do not sum to 1 (within 1e-6) or a
  /// label is out of range.
  void validate() const;
};

struct ImageMetrics {
  double ssim3d = 0.0;
  double psnr_db = 0.0;  // +inf for identical volumes
  double l1 = 0.0;
  double mse = 0.0;
  bool ssim_global_fallback = false;
};

/// Classification metrics in [0, 1]. A metric that is undefined for the
/// given labels (a class absent from the truth) is empty, and `warnings`
/// says why.
struct MetricReport {
  std::optional<double> accuracy;
  std::optional<double> balanced_accuracy;
  std::optional<double> micro_auc;
  std::optional<double> macro_auc;
  std::optional<double> macro_precision;
  std::optional<double> macro_f1;
  std::optional<ImageMetrics> image;
  std::vector<std::string> warnings;
};

MetricReport classification_metrics(const ScoreMatrix& scores);

/// Area under the ROC curve from the rank statistic with averaged tie ranks.
/// Returns nullopt when either the positive or the negative set is empty.
std::optional<double> rank_auc(std::span<const double> scores, std::span<const std::uint8_t> positive);

struct SsimResult {
  double value = 0.0;
  /// True when some axis is shorter than the window and one global window
  /// was used instead.
  bool global_fallback = false;
};

inline constexpr int kSsimWindow = 7;

/// Mean SSIM over every 7^3 uniform window lying fully inside the volume,
/// C1 = 0.01^2, C2 = 0.03^2 (data range 1), population statistics.
SsimResult ssim3d_detailed(const Volume3D& a, const Volume3D& b);
inline double ssim3d(const Volume3D& a, const Volume3D& b) { return ssim3d_detailed(a, b).value; }

double mse(const Volume3D& a, const Volume3D& b);
double l1(const Volume3D& a, const Volume3D& b);
/// 10 log10(1 / mse); +infinity when mse == 0.
double psnr(const Volume3D& a, const Volume3D& b);
double psnr_from_mse(double mse);

ImageMetrics image_metrics(const Volume3D& prediction, const Volume3D& reference);

/// Mean and sample standard deviation of one metric over runs.
struct AggregateCell {
  std::optional<double> mean;
  std::optional<double> stddev;

  /// "MM.MM±SS.SS" on the x100 scale, or "--" when undefined.
  std::string format() const;
};

struct AggregatedMetrics {
  int n_runs = 0;
  AggregateCell accuracy, balanced_accuracy, micro_auc, macro_auc, macro_precision, macro_f1;
  std::vector<std::string> warnings;
};

/// A metric missing from any run is undefined in the aggregate. Fewer than
/// two runs gives std 0 and a warning.
AggregatedMetrics aggregate_runs(const std::vector<MetricReport>& reports);

std::string format_mean_std(double mean, double stddev);

void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);
void to_json(nlohmann::json& j, const ImageMetrics& m);
void from_json(const nlohmann::json& j, ImageMetrics& m);

}  // namespace dwimpute
