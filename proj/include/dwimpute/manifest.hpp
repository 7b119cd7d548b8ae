#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace dwimpute {

enum class Diagnosis { CN = 0, MCI = 1, AD = 2 };
inline constexpr int kNumClasses = 3;
inline constexpr std::array<Diagnosis, 3> kAllDiagnoses = {Diagnosis::CN, Diagnosis::MCI, Diagnosis::AD};

enum class Split { train, val, test };
inline constexpr std::array<Split, 3> kAllSplits = {Split::train, Split::val, Split::test};

enum class Provenance { real, imputed_ddpm, imputed_blank, imputed_avgdx };

std::string to_string(Diagnosis d);
std::string to_string(Split s);
std::string to_string(Provenance p);
Diagnosis diagnosis_from_string(const std::string& s);
Split split_from_string(const std::string& s);
Provenance provenance_from_string(const std::string& s);

struct ScanRecord {
  std::string subject_id;
  std::string scan_id;
  Diagnosis diagnosis = Diagnosis::CN;
  bool has_t1 = false;
  bool has_dwi = false;
  std::optional<std::string> t1_path;
  std::optional<std::string> dwi_path;
  Split split = Split::train;
  Provenance provenance = Provenance::real;

  bool operator==(const ScanRecord&) const = default;
};

inline constexpr int kManifestSchemaVersion = 1;

struct DatasetManifest {
  std::vector<ScanRecord> records;
  int schema_version = kManifestSchemaVersion;

  bool operator==(const DatasetManifest&) const = default;
};

enum class ManifestRule {
  subject_disjointness,
  unique_scan_id,
  modality_implication,
  path_presence,
};

std::string to_string(ManifestRule r);

struct Violation {
  ManifestRule rule;
  std::vector<std::string> scan_ids;
  std::string message;
};

/// Empty iff every ScanRecord and DatasetManifest invariant holds.
std::vector<Violation> validate_manifest(const DatasetManifest& m);

void to_json(nlohmann::json& j, const ScanRecord& r);
void from_json(const nlohmann::json& j, ScanRecord& r);
void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Relative record paths are interpreted against the manifest's directory.
std::filesystem::path resolve_path(const std::filesystem::path& manifest_path, const std::string& record_path);

}  // namespace dwimpute
