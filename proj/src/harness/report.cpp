#include "dwimpute/harness/report.hpp"

#include <algorithm>
#include <map>
#include <tuple>

namespace dwimpute::harness {

using classifier::Modality;

namespace {

int modality_rank(Modality m) {
  switch (m) {
    case Modality::Both: return 0;
    case Modality::DWI: return 1;
    case Modality::T1: return 2;
  }
  return 3;
}

int strategy_rank(StrategyKind k) {
  switch (k) {
    case StrategyKind::None: return 0;
    case StrategyKind::DDPM: return 1;
    case StrategyKind::Blank: return 2;
    case StrategyKind::AvgDX: return 3;
  }
  return 4;
}

// Display width in code points; the cells are ASCII apart from '±'.
std::size_t display_width(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char c : s)
    if ((c & 0xC0) != 0x80) ++n;
  return n;
}

}  // namespace

std::vector<std::string> ResultsRow::cells() const {
  return {std::to_string(plan.add_cn),
          std::to_string(plan.add_mci),
          std::to_string(plan.add_ad),
          std::to_string(total),
          strategy == StrategyKind::None ? "--" : to_string(strategy),
          metrics.accuracy.format(),
          metrics.balanced_accuracy.format(),
          metrics.micro_auc.format(),
          metrics.macro_auc.format(),
          metrics.macro_precision.format(),
          metrics.macro_f1.format()};
}

ResultsTable render_table(const std::vector<RunRecord>& records) {
  std::map<std::string, std::vector<const RunRecord*>> groups;
  for (const auto& r : records)
    if (r.status == "ok") groups[r.config_hash].push_back(&r);

  ResultsTable t;
  for (auto& [hash, rs] : groups) {
    std::sort(rs.begin(), rs.end(), [](const RunRecord* a, const RunRecord* b) {
      return std::tie(a->run_index, a->seed) < std::tie(b->run_index, b->seed);
    });
    ResultsRow row;
    row.modality = rs.front()->modality;
    row.plan = rs.front()->plan;
    row.total = rs.front()->train_size;
    row.strategy = rs.front()->strategy;
    row.config_hash = hash;
    std::vector<MetricReport> reports;
    for (const auto* r : rs) reports.push_back(r->metrics);
    row.metrics = aggregate_runs(reports);
    t.rows.push_back(std::move(row));
  }
  std::sort(t.rows.begin(), t.rows.end(), [](const ResultsRow& a, const ResultsRow& b) {
    return std::make_tuple(modality_rank(a.modality), a.total, strategy_rank(a.strategy), a.plan.add_cn,
                           a.plan.add_mci, a.plan.add_ad, a.config_hash) <
           std::make_tuple(modality_rank(b.modality), b.total, strategy_rank(b.strategy), b.plan.add_cn,
                           b.plan.add_mci, b.plan.add_ad, b.config_hash);
  });
  return t;
}

std::string to_csv(const ResultsTable& t) {
  std::string out;
  for (std::size_t i = 0; i < kTableColumns.size(); ++i) out += (i ? "," : "") + kTableColumns[i];
  out += '\n';
  for (const auto& row : t.rows) {
    const auto cells = row.cells();
    for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
    out += '\n';
  }
  return out;
}

std::string to_text(const ResultsTable& t) {
  std::vector<std::size_t> width(kTableColumns.size());
  for (std::size_t i = 0; i < kTableColumns.size(); ++i) width[i] = display_width(kTableColumns[i]);
  for (const auto& row : t.rows) {
    const auto cells = row.cells();
    for (std::size_t i = 0; i < cells.size(); ++i) width[i] = std::max(width[i], display_width(cells[i]));
  }
  auto line = [&](const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) s += "  ";
      const std::size_t pad = width[i] - display_width(cells[i]);
      // Numbers right-aligned, the strategy name left-aligned.
      if (i == 4) {
        s += cells[i] + std::string(pad, ' ');
      } else {
        s += std::string(pad, ' ') + cells[i];
      }
    }
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s + '\n';
  };

  std::string out = line(std::vector<std::string>(kTableColumns.begin(), kTableColumns.end()));
  bool first = true;
  Modality current = Modality::Both;
  for (const auto& row : t.rows) {
    if (first || row.modality != current) {
      out += "[" + classifier::to_string(row.modality) + "]\n";
      current = row.modality;
      first = false;
    }
    out += line(row.cells());
  }
  return out;
}

}  // namespace dwimpute::harness
