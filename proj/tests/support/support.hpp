#pragma once
// Independent oracles, generators and fixtures shared by the test binaries.
// Nothing here calls into the code under test except for plain data types.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dwimpute/metrics.hpp"
#include "dwimpute/nn/layers.hpp"
#include "dwimpute/rng.hpp"
#include "dwimpute/volume.hpp"

namespace support {

using dwimpute::Dims;
using dwimpute::Rng;
using dwimpute::Volume3D;

// ---- generators ------------------------------------------------------------------------

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * dwimpute::uniform01(rng); }

inline int uniform_int(Rng& rng, int lo, int hi) {  // inclusive
  return lo + static_cast<int>(dwimpute::uniform_below(rng, static_cast<std::uint64_t>(hi - lo + 1)));
}

inline Volume3D random_volume(Dims d, Rng& rng, double lo = 0.0, double hi = 1.0) {
  std::vector<float> v(d.count());
  for (auto& x : v) x = static_cast<float>(uniform(rng, lo, hi));
  const bool unit = lo >= 0.0 && hi <= 1.0;
  return Volume3D(d, {}, std::move(v), unit ? dwimpute::RangeTag::unit : dwimpute::RangeTag::raw);
}

inline Volume3D constant_volume(Dims d, float c) {
  return Volume3D(d, {}, std::vector<float>(d.count(), c),
                  c >= 0.0f && c <= 1.0f ? dwimpute::RangeTag::unit : dwimpute::RangeTag::raw);
}

/// Random probability rows. Scores are drawn from a small set of levels half
/// of the time so ties are common. With `all_classes` every class appears in
/// the labels at least once.
inline dwimpute::ScoreMatrix random_scores(Rng& rng, int n, int k, bool all_classes) {
  dwimpute::ScoreMatrix s;
  s.n_classes = k;
  const bool coarse = dwimpute::uniform01(rng) < 0.5;
  for (int i = 0; i < n; ++i) {
    std::vector<double> row(k);
    double sum = 0.0;
    for (int c = 0; c < k; ++c) {
      row[c] = coarse ? static_cast<double>(uniform_int(rng, 1, 4)) : uniform(rng, 0.01, 1.0);
      sum += row[c];
    }
    for (int c = 0; c < k; ++c) s.probs.push_back(row[c] / sum);
    s.labels.push_back(uniform_int(rng, 0, k - 1));
  }
  if (all_classes && n >= k) {
    std::vector<int> slots(n);
    for (int i = 0; i < n; ++i) slots[i] = i;
    dwimpute::shuffle(slots.begin(), slots.end(), rng);
    for (int c = 0; c < k; ++c) s.labels[slots[c]] = c;
  }
  return s;
}

// ---- metric oracles --------------------------------------------------------------------

/// Exhaustive pair counting: P(score_pos > score_neg) + 0.5 P(tie).
inline std::optional<double> pair_auc(const std::vector<double>& scores, const std::vector<bool>& pos) {
  double wins = 0.0;
  long pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!pos[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (pos[j]) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  if (pairs == 0) return std::nullopt;
  return wins / static_cast<double>(pairs);
}

struct OracleMetrics {
  double accuracy = 0, balanced_accuracy = 0, micro_auc = 0, macro_auc = 0, macro_precision = 0, macro_f1 = 0;
};

/// Confusion-matrix loops. Prediction is the first maximal column.
inline OracleMetrics oracle_metrics(const dwimpute::ScoreMatrix& s) {
  const int k = s.n_classes;
  const std::size_t n = s.labels.size();
  std::vector<std::vector<long>> cm(k, std::vector<long>(k, 0));  // [truth][pred]
  for (std::size_t i = 0; i < n; ++i) {
    int pred = 0;
    for (int c = 0; c < k; ++c)
      if (s.probs[i * k + c] > s.probs[i * k + pred]) pred = c;
    ++cm[s.labels[i]][pred];
  }
  OracleMetrics m;
  long diag = 0;
  for (int c = 0; c < k; ++c) diag += cm[c][c];
  m.accuracy = static_cast<double>(diag) / static_cast<double>(n);
  for (int c = 0; c < k; ++c) {
    long row = 0, col = 0;
    for (int j = 0; j < k; ++j) {
      row += cm[c][j];
      col += cm[j][c];
    }
    const double recall = static_cast<double>(cm[c][c]) / static_cast<double>(row);
    const double precision = col == 0 ? 0.0 : static_cast<double>(cm[c][c]) / static_cast<double>(col);
    const double f1 = precision + recall == 0.0 ? 0.0 : 2 * precision * recall / (precision + recall);
    m.balanced_accuracy += recall / k;
    m.macro_precision += precision / k;
    m.macro_f1 += f1 / k;
    std::vector<double> sc(n);
    std::vector<bool> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
      sc[i] = s.probs[i * k + c];
      pos[i] = s.labels[i] == c;
    }
    m.macro_auc += *pair_auc(sc, pos) / k;
  }
  std::vector<double> flat(s.probs.begin(), s.probs.end());
  std::vector<bool> fpos(n * k);
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < k; ++c) fpos[i * k + c] = s.labels[i] == c;
  m.micro_auc = *pair_auc(flat, fpos);
  return m;
}

/// Per-window triple loop, population moments, C1 = 0.01^2, C2 = 0.03^2.
inline double naive_ssim(const Volume3D& a, const Volume3D& b, int win = 7) {
  const Dims d = a.dims();
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0.0;
  long count = 0;
  for (int x0 = 0; x0 + win <= d.nx; ++x0)
    for (int y0 = 0; y0 + win <= d.ny; ++y0)
      for (int z0 = 0; z0 + win <= d.nz; ++z0) {
        double ma = 0, mb = 0;
        const double m = static_cast<double>(win) * win * win;
        for (int x = x0; x < x0 + win; ++x)
          for (int y = y0; y < y0 + win; ++y)
            for (int z = z0; z < z0 + win; ++z) {
              ma += a.at(x, y, z);
              mb += b.at(x, y, z);
            }
        ma /= m;
        mb /= m;
        double va = 0, vb = 0, cov = 0;
        for (int x = x0; x < x0 + win; ++x)
          for (int y = y0; y < y0 + win; ++y)
            for (int z = z0; z < z0 + win; ++z) {
              const double da = a.at(x, y, z) - ma, db = b.at(x, y, z) - mb;
              va += da * da;
              vb += db * db;
              cov += da * db;
            }
        va /= m;
        vb /= m;
        cov /= m;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return total / static_cast<double>(count);
}

/// FA straight from its closed form.
inline double fa_direct(double l1, double l2, double l3) {
  const double num = (l1 - l2) * (l1 - l2) + (l2 - l3) * (l2 - l3) + (l3 - l1) * (l3 - l1);
  const double den = l1 * l1 + l2 * l2 + l3 * l3;
  if (den == 0.0) return 0.0;
  return std::sqrt(0.5) * std::sqrt(num) / std::sqrt(den);
}

// ---- finite differences ----------------------------------------------------------------

struct GradSample {
  std::string param;
  std::int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

/// Central differences for `count` elements drawn uniformly over all
/// parameter entries. `loss` must not touch the gradients; the analytic
/// gradients are read from Param::grad as they are on entry.
inline std::vector<GradSample> check_gradients(const dwimpute::nn::ParamList<double>& params,
                                               const std::function<double()>& loss, int count, Rng& rng,
                                               double h = 1e-5) {
  std::int64_t total = 0;
  for (auto* p : params) total += p->value.numel();
  std::vector<GradSample> out;
  for (int s = 0; s < count; ++s) {
    std::int64_t flat = static_cast<std::int64_t>(dwimpute::uniform_below(rng, static_cast<std::uint64_t>(total)));
    std::size_t pi = 0;
    while (flat >= params[pi]->value.numel()) flat -= params[pi++]->value.numel();
    auto& p = *params[pi];
    const double saved = p.value[flat];
    p.value[flat] = saved + h;
    const double up = loss();
    p.value[flat] = saved - h;
    const double down = loss();
    p.value[flat] = saved;
    GradSample g;
    g.param = p.name;
    g.index = flat;
    g.analytic = p.grad[flat];
    g.numeric = (up - down) / (2 * h);
    g.rel_error = std::abs(g.analytic - g.numeric) / std::max({std::abs(g.analytic), std::abs(g.numeric), 1e-6});
    out.push_back(g);
  }
  return out;
}

// ---- filesystem ------------------------------------------------------------------------

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(std::hash<std::string>{}(tag) ^ static_cast<std::uint64_t>(reinterpret_cast<std::uintptr_t>(this)));
    path_ = std::filesystem::temp_directory_path() / ("dwimpute_" + tag + "_" + std::to_string(rng() % 1000000007));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::FILE* f = std::fopen(p.string().c_str(), "rb");
  if (!f) return {};
  std::string s;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) s.append(buf, n);
  std::fclose(f);
  return s;
}

}  // namespace support
