#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dwimpute/classifier/network.hpp"
#include "dwimpute/metrics.hpp"
#include "json.hpp"

namespace dwimpute::classifier {

struct FitConfig {
  int max_epochs = 100;
  int patience = 10;
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  int batch_size = 4;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const FitConfig&) const = default;
};

void to_json(nlohmann::json& j, const FitConfig& c);
void from_json(const nlohmann::json& j, FitConfig& c);

/// One labelled example. Volumes are shared so augmented sets can reuse the
/// real scans without copying.
struct Sample {
  std::shared_ptr<const Volume3D> t1;
  std::shared_ptr<const Volume3D> dwi;
  int label = 0;
};

struct StopTrace {
  int best_epoch = 0;  // 1-based; 0 if no epoch ran
  int epochs_run = 0;
  double best_score = 0.0;
  std::vector<double> scores;
};

/// Runs epochs 1..max_epochs, calling train_epoch then validate. A score
/// strictly above the best so far becomes the new best (on_new_best is
/// called). Training stops after the epoch at which `patience` consecutive
/// epochs have passed without improvement, i.e. at best_epoch + patience.
StopTrace run_with_early_stopping(int max_epochs, int patience, const std::function<void(int)>& train_epoch,
                                  const std::function<double(int)>& validate,
                                  const std::function<void(int)>& on_new_best);

struct TrainedClassifier {
  BackboneSpec spec;
  Modality modality = Modality::T1;
  std::vector<float> weights;
  int best_epoch = 0;
  int epochs_trained = 0;
  double best_val_accuracy = 0.0;
  std::vector<double> val_accuracy_history;
  std::vector<double> train_loss_history;
  FitConfig config;
  std::string config_hash;
};

void save_classifier(const TrainedClassifier& m, const std::filesystem::path& dir);
TrainedClassifier load_classifier(const std::filesystem::path& dir);

/// Cross-entropy with AdamW; keeps the weights of the best validation
/// accuracy epoch. The network's input dims are taken from the data.
TrainedClassifier fit(BackboneSpec spec, Modality modality, const std::vector<Sample>& train,
                      const std::vector<Sample>& val, const FitConfig& cfg);

/// Softmax rows in eval mode (no dropout), with the samples' labels.
ScoreMatrix predict_proba(const TrainedClassifier& model, const std::vector<Sample>& samples, int batch_size = 8);
std::vector<int> argmax_rows(const ScoreMatrix& scores);

enum class SearchStrategy { exhaustive, random_k };

struct SearchSpace {
  std::vector<double> learning_rates{1e-4, 1e-5, 5e-5, 1e-6};
  std::vector<double> weight_decays{1e-4, 1e-5, 1e-6};
  SearchStrategy strategy = SearchStrategy::exhaustive;
  /// Number of grid points drawn (without replacement) for random_k.
  int budget = 12;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SearchSpace& s);
void from_json(const nlohmann::json& j, SearchSpace& s);

struct SearchRow {
  double learning_rate = 0.0;
  double weight_decay = 0.0;
  double val_accuracy = 0.0;
  int best_epoch = 0;
};

/// Index of the row with maximal validation accuracy; ties go to the larger
/// learning rate, then the larger weight decay.
std::size_t best_row(const std::vector<SearchRow>& rows);

/// (learning_rate, weight_decay) points in evaluation order.
std::vector<std::pair<double, double>> search_points(const SearchSpace& space);

struct SearchResult {
  FitConfig best;
  std::vector<SearchRow> rows;
  TrainedClassifier best_model;
};

SearchResult hyperparameter_search(const SearchSpace& space, const BackboneSpec& spec, Modality modality,
                                   const std::vector<Sample>& train, const std::vector<Sample>& val,
                                   const FitConfig& base);

}  // namespace dwimpute::classifier
