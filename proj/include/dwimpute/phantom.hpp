#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dwimpute/manifest.hpp"
#include "dwimpute/volume.hpp"
#include "json.hpp"

namespace dwimpute {

/// Principal diffusivities of a diffusion tensor, any consistent units.
struct EigenTriple {
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double lambda3 = 0.0;
};

struct TensorField {
  Dims dims;
  Spacing spacing;
  std::vector<EigenTriple> triples;
};

/// FA = sqrt(1/2) * sqrt((l1-l2)^2 + (l2-l3)^2 + (l3-l1)^2) / sqrt(l1^2 + l2^2 + l3^2).
/// The all-zero triple maps to 0. Exactly invariant under permutation of the
/// eigenvalues.
double fractional_anisotropy(const EigenTriple& e);

/// Voxelwise FA; output is unit-tagged.
Volume3D fa_map(const TensorField& f);

struct ClassGeometry {
  double ventricle_radius_fraction = 0.0;
  double cortical_band_thickness = 0.0;
};

struct PhantomSpec {
  Dims dims{24, 24, 24};
  Spacing spacing{2.0, 2.0, 2.0};
  // Indexed by Diagnosis. Ventricles enlarge and the cortex thins with atrophy.
  std::array<ClassGeometry, 3> class_geometry{{{0.22, 0.16}, {0.30, 0.14}, {0.38, 0.12}}};
  double t1_noise_sigma = 0.02;
  double fa_noise_sigma = 0.05;
  // Per-subject standard deviation of the ventricle fraction; brain scale and
  // cortical thickness jitter by fixed fractions of it.
  double anatomy_jitter = 0.04;
  int scans_per_subject = 1;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on invariant violations.
  void validate() const;
};

/// Anatomy of one subject, shared by every scan of that subject.
struct SubjectGeometry {
  Diagnosis diagnosis = Diagnosis::CN;
  std::array<double, 3> semi_axes{};
  double ventricle_fraction = 0.0;
  double cortical_thickness = 0.0;
};

struct PhantomScan {
  Volume3D t1;
  Volume3D fa;
  ScanRecord record;
  SubjectGeometry geometry;
};

SubjectGeometry draw_geometry(const PhantomSpec& spec, Diagnosis dx, std::uint64_t subject_seed);

/// Pure function of (spec, diagnosis, subject_seed, scan_index). Repeated
/// scans of one subject share geometry and differ only in noise. The
/// record's path and split fields are left for the caller.
PhantomScan generate_subject(const PhantomSpec& spec, Diagnosis dx, std::uint64_t subject_seed,
                             const std::string& subject_id, int scan_index = 0);

/// Subjects per split per diagnosis, indexed [Split][Diagnosis].
struct DatasetCounts {
  std::array<std::array<int, 3>, 3> n{};

  int& at(Split s, Diagnosis d) { return n[static_cast<int>(s)][static_cast<int>(d)]; }
  int at(Split s, Diagnosis d) const { return n[static_cast<int>(s)][static_cast<int>(d)]; }
  int split_total(Split s) const;
};

struct DatasetOptions {
  DatasetCounts counts;
  double paired_fraction = 1.0;
  /// Per-split override of paired_fraction, indexed by Split.
  std::array<std::optional<double>, 3> paired_fraction_by_split{};
};

/// Number of paired subjects per diagnosis within one split: ceil(f * n) in
/// total, distributed across classes by largest remainder.
std::array<int, 3> paired_allocation(const std::array<int, 3>& class_counts, double paired_fraction);

/// Generates every subject, writes volumes under `out_dir/volumes/` and the
/// manifest to `out_dir/manifest.json`.
DatasetManifest generate_dataset(const PhantomSpec& spec, const DatasetOptions& options,
                                 const std::filesystem::path& out_dir);

void to_json(nlohmann::json& j, const PhantomSpec& s);
void from_json(const nlohmann::json& j, PhantomSpec& s);
void to_json(nlohmann::json& j, const DatasetOptions& o);
void from_json(const nlohmann::json& j, DatasetOptions& o);

}  // namespace dwimpute
