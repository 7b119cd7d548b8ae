#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dwimpute/classifier/training.hpp"
#include "dwimpute/diffusion/ddpm.hpp"
#include "dwimpute/imputation.hpp"
#include "dwimpute/metrics.hpp"
#include "json.hpp"

namespace dwimpute::harness {

/// Raised for configurations or inputs that are invalid before any work
/// starts (CLI exit code 1).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ClassifierSettings {
  classifier::BackboneSpec backbone;
  classifier::FitConfig fit;
  /// When present, each run searches this grid (fit.learning_rate and
  /// fit.weight_decay are then ignored).
  std::optional<classifier::SearchSpace> search;
};

struct ExperimentConfig {
  std::string name;
  classifier::Modality modality = classifier::Modality::Both;
  StrategyKind strategy = StrategyKind::None;
  AugmentationPlan plan;
  int n_runs = 5;
  std::uint64_t base_seed = 0;
  /// Explicit per-run seeds; when empty they derive from base_seed.
  std::vector<std::uint64_t> seeds;
  std::string manifest;
  /// Evaluate on this manifest's test split instead. For modality T1 the
  /// override may include scans without DWI.
  std::optional<std::string> test_manifest;
  std::optional<std::string> ddpm_checkpoint;
  /// Seeds every DDPM sample (together with the scan id), so a scan's
  /// imputed FA is the same in every run and row that selects it.
  std::uint64_t ddpm_sample_seed = 0;
  diffusion::SampleOptions ddpm_sampling;
  ClassifierSettings classifier;
  std::string output_dir = "out";
  /// Directory relative paths resolve against; not serialized.
  std::filesystem::path base_dir;

  std::vector<std::uint64_t> run_seeds() const;
  std::filesystem::path resolve(const std::string& p) const;
  /// Throws ValidationError.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);

/// A config file holds one experiment object or a grid
/// {"base": {...}, "rows": [{...}, ...]} where each row is merge-patched
/// onto base.
std::vector<ExperimentConfig> load_experiment_configs(const std::filesystem::path& path);

std::string experiment_hash(const ExperimentConfig& c);

struct RunRecord {
  std::string config_hash;
  std::uint64_t seed = 0;
  int run_index = 0;
  std::string status = "ok";  // "ok" or "failed"
  std::string error;
  std::string name;
  classifier::Modality modality = classifier::Modality::Both;
  StrategyKind strategy = StrategyKind::None;
  AugmentationPlan plan;
  int paired_train_size = 0;
  int train_size = 0;
  int val_size = 0;
  int test_size = 0;
  MetricReport metrics;
  double learning_rate = 0.0;
  double weight_decay = 0.0;
  int best_epoch = 0;
  double wall_seconds = 0.0;
  std::string started_at;
  std::string finished_at;
};

void to_json(nlohmann::json& j, const RunRecord& r);
void from_json(const nlohmann::json& j, RunRecord& r);

std::filesystem::path record_path(const std::filesystem::path& output_dir, const std::string& hash,
                                  std::uint64_t seed);

/// Completed records under `dir` (an experiment output dir or its runs/
/// subdirectory); failure entries are skipped.
std::vector<RunRecord> load_run_records(const std::filesystem::path& dir);

/// Runs experiments, sharing loaded datasets, checkpoints and DDPM samples
/// across configs.
class ExperimentRunner {
 public:
  using Log = std::function<void(const std::string&)>;
  explicit ExperimentRunner(Log log = {});
  ~ExperimentRunner();

  /// One RunRecord per seed (including failures). Completed records already
  /// on disk are loaded instead of recomputed.
  std::vector<RunRecord> run(const ExperimentConfig& cfg);

 private:
  struct State;
  std::unique_ptr<State> state_;
  Log log_;
};

std::vector<RunRecord> run_experiment(const ExperimentConfig& cfg);

}  // namespace dwimpute::harness
