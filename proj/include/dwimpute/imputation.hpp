#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dwimpute/manifest.hpp"
#include "dwimpute/volume.hpp"

namespace dwimpute {

enum class StrategyKind { None, DDPM, Blank, AvgDX };

/// "None", "DDPM", "Blank", "AvgDX".
std::string to_string(StrategyKind k);
/// Case-insensitive.
StrategyKind strategy_from_string(const std::string& s);
/// Provenance of volumes produced by a strategy; None maps to real.
Provenance provenance_for(StrategyKind k);

struct ImputationStrategy {
  StrategyKind kind = StrategyKind::None;
  std::optional<std::filesystem::path> ddpm_checkpoint;

  /// Throws unless a checkpoint is present exactly when kind = DDPM.
  void validate() const;
};

struct AugmentationPlan {
  int add_cn = 0;
  int add_mci = 0;
  int add_ad = 0;

  int at(Diagnosis d) const;
  int total() const { return add_cn + add_mci + add_ad; }
  void validate() const;
  bool operator==(const AugmentationPlan&) const = default;
};

/// Parses "cn=0,mci=200,ad=100"; omitted classes are 0.
AugmentationPlan parse_plan(const std::string& text);
std::string to_string(const AugmentationPlan& p);

/// A manifest record with its volumes in memory. `fa` is null for T1-only
/// records.
struct LoadedScan {
  ScanRecord record;
  std::shared_ptr<const Volume3D> t1;
  std::shared_ptr<const Volume3D> fa;
};

/// Loads the volumes referenced by `records` (paths relative to the manifest).
std::vector<LoadedScan> load_scans(const std::filesystem::path& manifest_path, const std::vector<ScanRecord>& records);

struct AugmentedDataset {
  std::vector<LoadedScan> records;
  AugmentationPlan plan;
  StrategyKind kind = StrategyKind::None;
  std::uint64_t seed = 0;
};

Volume3D impute_blank(const Dims& dims, const Spacing& spacing = {});

/// Voxelwise mean of the real FA volumes of class `dx` in `paired_train`.
Volume3D impute_avgdx(Diagnosis dx, const std::vector<LoadedScan>& paired_train);

/// Produces one FA volume per T1. The seed of each request is derived from
/// the imputation seed and the scan id, so a scan's sample does not depend on
/// which other scans are imputed alongside it.
using FaSampler = std::function<std::vector<Volume3D>(const std::vector<const Volume3D*>& t1,
                                                      const std::vector<std::uint64_t>& seeds)>;

/// Indices into `pool` chosen uniformly without replacement per class,
/// returned in pool order. Throws naming the class and shortfall when the
/// pool is too small.
std::vector<std::size_t> select_from_pool(const std::vector<LoadedScan>& pool, const AugmentationPlan& plan,
                                          std::uint64_t seed);

/// paired_train followed by plan.add_X scans of each class X drawn from the
/// T1-only pool, with FA filled in by `kind`. For kind None the selected
/// scans are added unchanged (T1 only). Imputed records are tagged with the
/// strategy's provenance and given dwi_path "<scan_id>_fa_<strategy>.vol".
/// `seed` drives selection; DDPM sample seeds derive from `sample_seed`
/// when given, else from `seed`.
AugmentedDataset build_augmented_training_set(const std::vector<LoadedScan>& paired_train,
                                              const std::vector<LoadedScan>& t1_only_pool,
                                              const AugmentationPlan& plan, StrategyKind kind, std::uint64_t seed,
                                              const FaSampler& ddpm_sampler = {},
                                              std::optional<std::uint64_t> sample_seed = std::nullopt);

/// Seed used for the DDPM sample of `scan_id` under imputation seed `seed`.
std::uint64_t imputation_seed(std::uint64_t seed, const std::string& scan_id);

}  // namespace dwimpute
