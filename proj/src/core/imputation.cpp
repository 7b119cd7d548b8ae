#include "dwimpute/imputation.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>
#include <stdexcept>

#include "dwimpute/rng.hpp"

namespace dwimpute {

std::string to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::None: return "None";
    case StrategyKind::DDPM: return "DDPM";
    case StrategyKind::Blank: return "Blank";
    case StrategyKind::AvgDX: return "AvgDX";
  }
  return "?";
}

StrategyKind strategy_from_string(const std::string& s) {
  std::string l = s;
  std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
  if (l == "none") return StrategyKind::None;
  if (l == "ddpm") return StrategyKind::DDPM;
  if (l == "blank") return StrategyKind::Blank;
  if (l == "avgdx") return StrategyKind::AvgDX;
  throw std::invalid_argument("unknown imputation strategy '" + s + "' (expected none, ddpm, blank or avgdx)");
}

Provenance provenance_for(StrategyKind k) {
  switch (k) {
    case StrategyKind::DDPM: return Provenance::imputed_ddpm;
    case StrategyKind::Blank: return Provenance::imputed_blank;
    case StrategyKind::AvgDX: return Provenance::imputed_avgdx;
    case StrategyKind::None: break;
  }
  return Provenance::real;
}

void ImputationStrategy::validate() const {
  if ((kind == StrategyKind::DDPM) != ddpm_checkpoint.has_value()) {
    throw std::invalid_argument("imputation strategy: a DDPM checkpoint is required exactly when the strategy is DDPM");
  }
}

int AugmentationPlan::at(Diagnosis d) const {
  switch (d) {
    case Diagnosis::CN: return add_cn;
    case Diagnosis::MCI: return add_mci;
    case Diagnosis::AD: return add_ad;
  }
  return 0;
}

void AugmentationPlan::validate() const {
  if (add_cn < 0 || add_mci < 0 || add_ad < 0) throw std::invalid_argument("augmentation plan counts must be >= 0");
}

AugmentationPlan parse_plan(const std::string& text) {
  AugmentationPlan p;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("plan entry '" + item + "' is not key=value");
    std::string key = item.substr(0, eq);
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
    int value = 0;
    try {
      std::size_t used = 0;
      value = std::stoi(item.substr(eq + 1), &used);
      if (used != item.size() - eq - 1) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw std::invalid_argument("plan entry '" + item + "' has a non-integer count");
    }
    if (key == "cn") {
      p.add_cn = value;
    } else if (key == "mci") {
      p.add_mci = value;
    } else if (key == "ad") {
      p.add_ad = value;
    } else {
      throw std::invalid_argument("plan key '" + key + "' is not one of cn, mci, ad");
    }
  }
  p.validate();
  return p;
}

std::string to_string(const AugmentationPlan& p) {
  return "cn=" + std::to_string(p.add_cn) + ",mci=" + std::to_string(p.add_mci) + ",ad=" + std::to_string(p.add_ad);
}

std::vector<LoadedScan> load_scans(const std::filesystem::path& manifest_path,
                                   const std::vector<ScanRecord>& records) {
  std::vector<LoadedScan> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    LoadedScan s;
    s.record = r;
    if (r.has_t1) s.t1 = std::make_shared<const Volume3D>(read_volume(resolve_path(manifest_path, *r.t1_path)));
    if (r.has_dwi) s.fa = std::make_shared<const Volume3D>(read_volume(resolve_path(manifest_path, *r.dwi_path)));
    out.push_back(std::move(s));
  }
  return out;
}

Volume3D impute_blank(const Dims& dims, const Spacing& spacing) { return Volume3D(dims, spacing, RangeTag::unit); }

Volume3D impute_avgdx(Diagnosis dx, const std::vector<LoadedScan>& paired_train) {
  std::vector<const Volume3D*> vols;
  for (const auto& s : paired_train) {
    if (s.record.diagnosis == dx && s.record.provenance == Provenance::real && s.record.split == Split::train &&
        s.fa) {
      vols.push_back(s.fa.get());
    }
  }
  if (vols.empty()) {
    throw std::invalid_argument("impute_avgdx: no real paired training scan with diagnosis " + to_string(dx));
  }
  const Dims dims = vols.front()->dims();
  std::vector<double> acc(dims.count(), 0.0);
  for (const Volume3D* v : vols) {
    if (!(v->dims() == dims)) throw std::invalid_argument("impute_avgdx: FA volumes differ in dims");
    const auto vv = v->voxels();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += vv[i];
  }
  std::vector<float> mean(acc.size());
  const double n = static_cast<double>(vols.size());
  for (std::size_t i = 0; i < acc.size(); ++i) mean[i] = static_cast<float>(std::clamp(acc[i] / n, 0.0, 1.0));
  return Volume3D(dims, vols.front()->spacing(), std::move(mean), RangeTag::unit);
}

std::uint64_t imputation_seed(std::uint64_t seed, const std::string& scan_id) {
  return derive_seed(seed, ("impute:" + scan_id).c_str());
}

std::vector<std::size_t> select_from_pool(const std::vector<LoadedScan>& pool, const AugmentationPlan& plan,
                                          std::uint64_t seed) {
  plan.validate();
  std::vector<std::size_t> chosen;
  for (Diagnosis dx : kAllDiagnoses) {
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < pool.size(); ++i)
      if (pool[i].record.diagnosis == dx) candidates.push_back(i);
    const auto want = static_cast<std::size_t>(plan.at(dx));
    if (want > candidates.size()) {
      throw std::invalid_argument("T1-only pool has " + std::to_string(candidates.size()) + " " + to_string(dx) +
                                  " scans but the plan adds " + std::to_string(want) + " (shortfall " +
                                  std::to_string(want - candidates.size()) + ")");
    }
    Rng rng(derive_seed(derive_seed(seed, "select"), static_cast<std::uint64_t>(dx)));
    // Partial Fisher-Yates: the first `want` entries are a uniform sample.
    for (std::size_t i = 0; i < want; ++i) {
      const std::size_t j = i + uniform_below(rng, candidates.size() - i);
      std::swap(candidates[i], candidates[j]);
    }
    chosen.insert(chosen.end(), candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(want));
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

AugmentedDataset build_augmented_training_set(const std::vector<LoadedScan>& paired_train,
                                              const std::vector<LoadedScan>& t1_only_pool,
                                              const AugmentationPlan& plan, StrategyKind kind, std::uint64_t seed,
                                              const FaSampler& ddpm_sampler,
                                              std::optional<std::uint64_t> sample_seed) {
  plan.validate();
  for (const auto& s : paired_train) {
    if (s.record.split != Split::train || !s.record.has_dwi || !s.t1 || !s.fa) {
      throw std::invalid_argument("paired training record " + s.record.scan_id +
                                  " is not a loaded train-split T1+DWI scan");
    }
  }
  for (const auto& s : t1_only_pool) {
    if (s.record.split != Split::train || s.record.has_dwi || !s.t1) {
      throw std::invalid_argument("pool record " + s.record.scan_id + " is not a loaded train-split T1-only scan");
    }
  }
  if (kind == StrategyKind::DDPM && plan.total() > 0 && !ddpm_sampler) {
    throw std::invalid_argument("DDPM imputation requested without a sampler");
  }

  AugmentedDataset out;
  out.plan = plan;
  out.kind = kind;
  out.seed = seed;
  out.records = paired_train;

  const auto chosen = select_from_pool(t1_only_pool, plan, seed);
  std::vector<LoadedScan> added;
  for (std::size_t i : chosen) added.push_back(t1_only_pool[i]);

  if (kind != StrategyKind::None) {
    std::map<Diagnosis, std::shared_ptr<const Volume3D>> avg;
    std::vector<const Volume3D*> ddpm_inputs;
    std::vector<std::uint64_t> ddpm_seeds;
    for (auto& s : added) {
      switch (kind) {
        case StrategyKind::Blank:
          s.fa = std::make_shared<const Volume3D>(impute_blank(s.t1->dims(), s.t1->spacing()));
          break;
        case StrategyKind::AvgDX: {
          auto& a = avg[s.record.diagnosis];
          if (!a) a = std::make_shared<const Volume3D>(impute_avgdx(s.record.diagnosis, paired_train));
          s.fa = a;
          break;
        }
        case StrategyKind::DDPM:
          ddpm_inputs.push_back(s.t1.get());
          ddpm_seeds.push_back(imputation_seed(sample_seed.value_or(seed), s.record.scan_id));
          break;
        case StrategyKind::None: break;
      }
      s.record.has_dwi = true;
      s.record.dwi_path = s.record.scan_id + "_fa_" + to_string(kind) + ".vol";
      s.record.provenance = provenance_for(kind);
    }
    if (!ddpm_inputs.empty()) {
      auto samples = ddpm_sampler(ddpm_inputs, ddpm_seeds);
      if (samples.size() != ddpm_inputs.size()) throw std::runtime_error("DDPM sampler returned a wrong count");
      for (std::size_t i = 0; i < added.size(); ++i) {
        added[i].fa = std::make_shared<const Volume3D>(std::move(samples[i]));
      }
    }
  }
  out.records.insert(out.records.end(), added.begin(), added.end());
  return out;
}

}  // namespace dwimpute
