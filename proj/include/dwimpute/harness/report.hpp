#pragma once

#include <array>
#include <string>
#include <vector>

#include "dwimpute/harness/experiment.hpp"
#include "dwimpute/metrics.hpp"

namespace dwimpute::harness {

inline const std::array<std::string, 11> kTableColumns = {
    "CN", "MCI", "AD", "Total", "Imputation", "Acc", "Bal Acc", "Micro AUC", "Macro AUC", "Macro Prec", "Macro F1"};

struct ResultsRow {
  classifier::Modality modality = classifier::Modality::Both;
  AugmentationPlan plan;
  int total = 0;
  StrategyKind strategy = StrategyKind::None;
  std::string config_hash;
  AggregatedMetrics metrics;

  /// The 11 cells in kTableColumns order.
  std::vector<std::string> cells() const;
};

struct ResultsTable {
  std::vector<ResultsRow> rows;
};

/// Groups records by config hash, aggregates each group and orders rows by
/// modality block (T1+DWI, DWI, T1), then Total, then strategy
/// (None, DDPM, Blank, AvgDX).
ResultsTable render_table(const std::vector<RunRecord>& records);

/// Header line plus one line per row.
std::string to_csv(const ResultsTable& t);
/// Aligned columns, one block per modality under a heading line.
std::string to_text(const ResultsTable& t);

}  // namespace dwimpute::harness
