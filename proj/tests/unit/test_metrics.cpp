#include <cmath>
#include <limits>

#include "doctest.h"
#include "dwimpute/metrics.hpp"
#include "support.hpp"

using namespace dwimpute;

namespace {

ScoreMatrix one_hot(const std::vector<int>& labels, const std::vector<int>& preds, int k = 3) {
  ScoreMatrix s;
  s.n_classes = k;
  s.labels = labels;
  for (int p : preds)
    for (int c = 0; c < k; ++c) s.probs.push_back(c == p ? 1.0 : 0.0);
  return s;
}

MetricReport with_accuracy(double acc) {
  MetricReport r;
  r.accuracy = acc;
  r.balanced_accuracy = acc;
  r.micro_auc = acc;
  r.macro_auc = acc;
  r.macro_precision = acc;
  r.macro_f1 = acc;
  return r;
}

// Single SSIM window over the whole volume.
double global_ssim(const Volume3D& a, const Volume3D& b) {
  const auto& x = a.voxels();
  const auto& y = b.voxels();
  const double n = static_cast<double>(x.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    ma += x[i] / n;
    mb += y[i] / n;
  }
  double va = 0, vb = 0, cov = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    va += (x[i] - ma) * (x[i] - ma) / n;
    vb += (y[i] - mb) * (y[i] - mb) / n;
    cov += (x[i] - ma) * (y[i] - mb) / n;
  }
  return ((2 * ma * mb + 1e-4) * (2 * cov + 9e-4)) / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
}

}  // namespace

TEST_CASE("perfect predictions give 1 on every metric") {
  const std::vector<int> y = {0, 1, 2, 2, 1, 0, 0};
  const auto r = classification_metrics(one_hot(y, y));
  for (const auto& m : {r.accuracy, r.balanced_accuracy, r.micro_auc, r.macro_auc, r.macro_precision, r.macro_f1}) {
    REQUIRE(m.has_value());
    CHECK(*m == 1.0);
  }
  CHECK(r.warnings.empty());
}

TEST_CASE("constant predictor on a balanced set") {
  ScoreMatrix s;
  s.labels = {0, 0, 1, 1, 2, 2};
  for (int i = 0; i < 6; ++i) s.probs.insert(s.probs.end(), {0.5, 0.3, 0.2});
  const auto r = classification_metrics(s);
  CHECK(*r.accuracy == doctest::Approx(1.0 / 3));
  CHECK(*r.balanced_accuracy == doctest::Approx(1.0 / 3));
  CHECK(*r.macro_auc == doctest::Approx(0.5));
  // Micro AUC on a constant row: the flattened scores still rank classes,
  // so compare with the oracle rather than a fixed value.
  CHECK(*r.micro_auc == doctest::Approx(*support::pair_auc(
                            std::vector<double>(s.probs.begin(), s.probs.end()),
                            {true, false, false, true, false, false, false, true, false, false, true, false, false, false,
                             true, false, false, true})));
  ScoreMatrix u;
  u.labels = {0, 1, 2};
  for (int i = 0; i < 3; ++i) u.probs.insert(u.probs.end(), {1.0 / 3, 1.0 / 3, 1.0 / 3});
  const auto ru = classification_metrics(u);
  CHECK(*ru.micro_auc == doctest::Approx(0.5));
  CHECK(*ru.macro_auc == doctest::Approx(0.5));
  CHECK(*ru.accuracy == doctest::Approx(1.0 / 3));
}

TEST_CASE("balanced accuracy from a hand-built confusion matrix") {
  // Per-class recalls 0.8, 0.5 and 0.2 over ten samples each.
  std::vector<int> y, p;
  const int correct[3] = {8, 5, 2};
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 10; ++i) {
      y.push_back(c);
      p.push_back(i < correct[c] ? c : (c + 1) % 3);
    }
  const auto r = classification_metrics(one_hot(y, p));
  CHECK(*r.balanced_accuracy == doctest::Approx(0.5));
  CHECK(*r.accuracy == doctest::Approx(0.5));
}

TEST_CASE("classification metrics match the brute-force oracle on random instances") {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = support::uniform_int(rng, 2, 4);
    const auto s = support::random_scores(rng, support::uniform_int(rng, k, 25), k, true);
    const auto r = classification_metrics(s);
    const auto o = support::oracle_metrics(s);
    CHECK(std::abs(*r.accuracy - o.accuracy) <= 1e-10);
    CHECK(std::abs(*r.balanced_accuracy - o.balanced_accuracy) <= 1e-10);
    CHECK(std::abs(*r.micro_auc - o.micro_auc) <= 1e-10);
    CHECK(std::abs(*r.macro_auc - o.macro_auc) <= 1e-10);
    CHECK(std::abs(*r.macro_precision - o.macro_precision) <= 1e-10);
    CHECK(std::abs(*r.macro_f1 - o.macro_f1) <= 1e-10);
  }
}

TEST_CASE("rank AUC matches pair counting, including ties") {
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = support::uniform_int(rng, 1, 30);
    std::vector<double> sc(n);
    std::vector<std::uint8_t> pos(n);
    std::vector<bool> bpos(n);
    for (int i = 0; i < n; ++i) {
      sc[i] = support::uniform_int(rng, 0, 5) / 5.0;
      bpos[i] = support::uniform(rng, 0, 1) < 0.4;
      pos[i] = bpos[i] ? 1 : 0;
    }
    const auto a = rank_auc(sc, pos);
    const auto b = support::pair_auc(sc, bpos);
    REQUIRE(a.has_value() == b.has_value());
    if (a) CHECK(std::abs(*a - *b) <= 1e-12);
  }
}

TEST_CASE("an absent class leaves the per-class metrics undefined with a warning") {
  const auto r = classification_metrics(one_hot({0, 0, 1, 1}, {0, 1, 1, 1}));
  CHECK(*r.accuracy == doctest::Approx(0.75));
  CHECK(r.micro_auc.has_value());
  CHECK_FALSE(r.balanced_accuracy.has_value());
  CHECK_FALSE(r.macro_auc.has_value());
  CHECK_FALSE(r.macro_precision.has_value());
  CHECK_FALSE(r.macro_f1.has_value());
  REQUIRE_FALSE(r.warnings.empty());
  CHECK(r.warnings[0].find("2") != std::string::npos);
}

TEST_CASE("micro and macro AUC coincide under class-permutation symmetry") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    ScoreMatrix s;
    const int base = support::uniform_int(rng, 1, 6);
    for (int b = 0; b < base; ++b) {
      double p[3] = {support::uniform(rng, 0.05, 1), support::uniform(rng, 0.05, 1), support::uniform(rng, 0.05, 1)};
      const double sum = p[0] + p[1] + p[2];
      const int label = support::uniform_int(rng, 0, 2);
      // Every cyclic shift of the row, with the label shifted alongside.
      for (int shift = 0; shift < 3; ++shift) {
        for (int c = 0; c < 3; ++c) s.probs.push_back(p[(c - shift + 3) % 3] / sum);
        s.labels.push_back((label + shift) % 3);
      }
    }
    const auto r = classification_metrics(s);
    CHECK(std::abs(*r.micro_auc - *r.macro_auc) <= 1e-12);
  }
}

TEST_CASE("ScoreMatrix validation") {
  ScoreMatrix s;
  s.labels = {0};
  s.probs = {0.5, 0.2, 0.2};
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s.probs = {0.5, 0.3, 0.2};
  CHECK_NOTHROW(s.validate());
  s.labels = {3};
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("SSIM matches a per-window brute force on 8^3 volumes") {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    const auto a = support::random_volume({8, 8, 8}, rng, 0, 1);
    auto b = a;
    for (auto& v : b.voxels()) v = std::clamp(v + static_cast<float>(support::uniform(rng, -0.3, 0.3)), 0.0f, 1.0f);
    const auto r = ssim3d_detailed(a, b);
    CHECK_FALSE(r.global_fallback);
    CHECK(std::abs(r.value - support::naive_ssim(a, b)) <= 1e-9);
    CHECK(ssim3d(a, b) == ssim3d(b, a));
  }
  const auto c = support::random_volume({9, 7, 10}, rng, 0, 1), d = support::random_volume({9, 7, 10}, rng, 0, 1);
  CHECK(std::abs(ssim3d(c, d) - support::naive_ssim(c, d)) <= 1e-9);
}

TEST_CASE("SSIM identity, inversion and small-volume fallback") {
  Rng rng(7);
  const auto a = support::random_volume({8, 9, 7}, rng, 0, 1);
  CHECK(ssim3d(a, a) == doctest::Approx(1.0).epsilon(1e-9));
  Volume3D bin({8, 8, 8}, {}, RangeTag::unit), inv({8, 8, 8}, {}, RangeTag::unit);
  for (std::size_t i = 0; i < bin.voxels().size(); ++i) {
    bin.voxels()[i] = (i * 7 + i / 5) % 3 == 0 ? 1.0f : 0.0f;
    inv.voxels()[i] = 1.0f - bin.voxels()[i];
  }
  CHECK(ssim3d(bin, inv) < 0.0);

  const auto s1 = support::random_volume({4, 8, 8}, rng, 0, 1), s2 = support::random_volume({4, 8, 8}, rng, 0, 1);
  const auto r = ssim3d_detailed(s1, s2);
  CHECK(r.global_fallback);
  // Global fallback is one window spanning the whole volume.
  CHECK(std::abs(r.value - global_ssim(s1, s2)) <= 1e-9);
  CHECK(image_metrics(s1, s2).ssim_global_fallback);
  CHECK_THROWS_AS(ssim3d(s1, a), std::invalid_argument);
}

TEST_CASE("PSNR, MSE and L1") {
  CHECK(psnr_from_mse(0.01) == 20.0);
  CHECK(std::isinf(psnr_from_mse(0.0)));
  Volume3D zero({4, 4, 4}, {}, RangeTag::unit);
  Volume3D c({4, 4, 4}, {}, std::vector<float>(64, 0.25f), RangeTag::unit);
  CHECK(mse(zero, c) == doctest::Approx(0.0625));
  CHECK(l1(zero, c) == doctest::Approx(0.25));
  CHECK(psnr(zero, c) == doctest::Approx(10 * std::log10(16.0)));
  CHECK(mse(c, c) == 0.0);
  CHECK(l1(c, c) == 0.0);
  CHECK(std::isinf(psnr(c, c)));
  CHECK_THROWS_AS(mse(zero, Volume3D({4, 4, 5}, {}, RangeTag::unit)), std::invalid_argument);

  nlohmann::json j = image_metrics(c, c);
  CHECK(j["psnr_db"] == "inf");
  CHECK(std::isinf(j.get<ImageMetrics>().psnr_db));
}

TEST_CASE("PSNR decreases as noise amplitude grows") {
  Rng rng(8);
  const auto base = support::random_volume({10, 10, 10}, rng, 0.2, 0.8);
  std::vector<float> unit_noise(base.voxels().size());
  for (auto& v : unit_noise) v = static_cast<float>(support::uniform(rng, -1, 1));
  double prev = std::numeric_limits<double>::infinity();
  for (double amp : {0.01, 0.05, 0.1}) {
    auto noisy = base;
    for (std::size_t i = 0; i < unit_noise.size(); ++i) noisy.voxels()[i] += static_cast<float>(amp) * unit_noise[i];
    const double p = psnr(base, noisy);
    CHECK(p < prev);
    prev = p;
  }
}

TEST_CASE("aggregate formatting") {
  const auto agg = aggregate_runs({with_accuracy(0.60), with_accuracy(0.70)});
  CHECK(agg.n_runs == 2);
  CHECK(agg.accuracy.format() == "65.00±7.07");
  CHECK(agg.warnings.empty());
  CHECK(format_mean_std(68.03, 2.33) == "68.03±2.33");

  const auto same = aggregate_runs({with_accuracy(0.5), with_accuracy(0.5), with_accuracy(0.5)});
  CHECK(same.macro_f1.format() == "50.00±0.00");

  const auto single = aggregate_runs({with_accuracy(0.42)});
  CHECK(single.accuracy.format() == "42.00±0.00");
  CHECK_FALSE(single.warnings.empty());

  auto missing = with_accuracy(0.6);
  missing.macro_auc.reset();
  const auto partial = aggregate_runs({with_accuracy(0.7), missing});
  CHECK(partial.macro_auc.format() == "--");
  CHECK(partial.accuracy.format() == "65.00±7.07");
  CHECK_FALSE(partial.warnings.empty());
}

TEST_CASE("MetricReport JSON round trip keeps undefined metrics empty") {
  auto r = with_accuracy(0.25);
  r.macro_f1.reset();
  r.warnings = {"w"};
  nlohmann::json j = r;
  CHECK(j["macro_f1"].is_null());
  const auto back = j.get<MetricReport>();
  CHECK(back.accuracy == r.accuracy);
  CHECK_FALSE(back.macro_f1.has_value());
  CHECK(back.warnings == r.warnings);
}
