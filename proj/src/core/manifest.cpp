#include "dwimpute/manifest.hpp"

#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

namespace dwimpute {

std::string to_string(Diagnosis d) {
  switch (d) {
    case Diagnosis::CN: return "CN";
    case Diagnosis::MCI: return "MCI";
    case Diagnosis::AD: return "AD";
  }
  return "?";
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::real: return "real";
    case Provenance::imputed_ddpm: return "imputed-ddpm";
    case Provenance::imputed_blank: return "imputed-blank";
    case Provenance::imputed_avgdx: return "imputed-avgdx";
  }
  return "?";
}

Diagnosis diagnosis_from_string(const std::string& s) {
  if (s == "CN") return Diagnosis::CN;
  if (s == "MCI") return Diagnosis::MCI;
  if (s == "AD") return Diagnosis::AD;
  throw std::invalid_argument("unknown diagnosis '" + s + "'");
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + s + "'");
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "real") return Provenance::real;
  if (s == "imputed-ddpm") return Provenance::imputed_ddpm;
  if (s == "imputed-blank") return Provenance::imputed_blank;
  if (s == "imputed-avgdx") return Provenance::imputed_avgdx;
  throw std::invalid_argument("unknown provenance '" + s + "'");
}

std::string to_string(ManifestRule r) {
  switch (r) {
    case ManifestRule::subject_disjointness: return "subject_disjointness";
    case ManifestRule::unique_scan_id: return "unique_scan_id";
    case ManifestRule::modality_implication: return "modality_implication";
    case ManifestRule::path_presence: return "path_presence";
  }
  return "?";
}

std::vector<Violation> validate_manifest(const DatasetManifest& m) {
  std::vector<Violation> out;

  // std::map keeps violation order independent of record order hashing.
  std::map<std::string, std::set<Split>> splits_by_subject;
  std::map<std::string, std::vector<std::string>> scans_by_subject;
  std::map<std::string, int> scan_id_count;
  for (const auto& r : m.records) {
    splits_by_subject[r.subject_id].insert(r.split);
    scans_by_subject[r.subject_id].push_back(r.scan_id);
    ++scan_id_count[r.scan_id];
  }

  for (const auto& [subject, splits] : splits_by_subject) {
    if (splits.size() > 1) {
      std::string names;
      for (Split s : splits) names += (names.empty() ? "" : ",") + to_string(s);
      out.push_back({ManifestRule::subject_disjointness, scans_by_subject[subject],
                     "subject '" + subject + "' appears in splits " + names});
    }
  }
  for (const auto& [scan, count] : scan_id_count) {
    if (count > 1) {
      out.push_back({ManifestRule::unique_scan_id, {scan},
                     "scan_id '" + scan + "' appears " + std::to_string(count) + " times"});
    }
  }
  for (const auto& r : m.records) {
    if (r.has_dwi && !r.has_t1) {
      out.push_back({ManifestRule::modality_implication, {r.scan_id},
                     "scan '" + r.scan_id + "' has DWI but no T1"});
    }
    if (r.has_t1 != r.t1_path.has_value() || r.has_dwi != r.dwi_path.has_value()) {
      out.push_back({ManifestRule::path_presence, {r.scan_id},
                     "scan '" + r.scan_id + "' has a path without its modality flag or vice versa"});
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const ScanRecord& r) {
  j = nlohmann::json{
      {"subject_id", r.subject_id},
      {"scan_id", r.scan_id},
      {"diagnosis", to_string(r.diagnosis)},
      {"has_t1", r.has_t1},
      {"has_dwi", r.has_dwi},
      {"t1_path", r.t1_path ? nlohmann::json(*r.t1_path) : nlohmann::json(nullptr)},
      {"dwi_path", r.dwi_path ? nlohmann::json(*r.dwi_path) : nlohmann::json(nullptr)},
      {"split", to_string(r.split)},
      {"provenance", to_string(r.provenance)},
  };
}

void from_json(const nlohmann::json& j, ScanRecord& r) {
  r.subject_id = j.at("subject_id").get<std::string>();
  r.scan_id = j.at("scan_id").get<std::string>();
  r.diagnosis = diagnosis_from_string(j.at("diagnosis").get<std::string>());
  r.has_t1 = j.at("has_t1").get<bool>();
  r.has_dwi = j.at("has_dwi").get<bool>();
  auto opt_path = [&](const char* key) -> std::optional<std::string> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<std::string>();
  };
  r.t1_path = opt_path("t1_path");
  r.dwi_path = opt_path("dwi_path");
  r.split = split_from_string(j.at("split").get<std::string>());
  r.provenance = j.contains("provenance") ? provenance_from_string(j.at("provenance").get<std::string>())
                                          : Provenance::real;
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = nlohmann::json{{"schema_version", m.schema_version}, {"records", m.records}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
  m.schema_version = j.value("schema_version", kManifestSchemaVersion);
  m.records = j.at("records").get<std::vector<ScanRecord>>();
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << nlohmann::json(m).dump(2) << '\n';
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  return nlohmann::json::parse(in).get<DatasetManifest>();
}

std::filesystem::path resolve_path(const std::filesystem::path& manifest_path, const std::string& record_path) {
  std::filesystem::path p(record_path);
  if (p.is_absolute()) return p;
  return manifest_path.parent_path() / p;
}

}  // namespace dwimpute
