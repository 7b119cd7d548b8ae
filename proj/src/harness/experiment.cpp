#include "dwimpute/harness/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <set>

#include "dwimpute/harness/config_hash.hpp"

namespace dwimpute::harness {

namespace fs = std::filesystem;
using classifier::Modality;

// ---- config ---------------------------------------------------------------------------

std::vector<std::uint64_t> ExperimentConfig::run_seeds() const {
  if (!seeds.empty()) return seeds;
  std::vector<std::uint64_t> out;
  for (int i = 0; i < n_runs; ++i) out.push_back(derive_seed(base_seed, static_cast<std::uint64_t>(i)));
  return out;
}

fs::path ExperimentConfig::resolve(const std::string& p) const {
  const fs::path path(p);
  return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
}

void ExperimentConfig::validate() const {
  auto fail = [&](const std::string& msg) {
    throw ValidationError("experiment" + (name.empty() ? std::string() : " '" + name + "'") + ": " + msg);
  };
  if (n_runs < 1 && seeds.empty()) fail("n_runs must be >= 1");
  if (manifest.empty()) fail("manifest path is required");
  if (output_dir.empty()) fail("output_dir is required");
  if (plan.add_cn < 0 || plan.add_mci < 0 || plan.add_ad < 0) fail("plan counts must be >= 0");
  if (strategy == StrategyKind::DDPM && !ddpm_checkpoint) fail("strategy DDPM requires ddpm_checkpoint");
  if (strategy != StrategyKind::DDPM && ddpm_checkpoint) fail("ddpm_checkpoint is only valid with strategy DDPM");
  if (modality == Modality::T1 && strategy != StrategyKind::None) {
    fail("no imputation is applied to the T1 modality; strategy must be None");
  }
  if (modality != Modality::T1 && strategy == StrategyKind::None && plan.total() > 0) {
    fail("adding T1-only scans to a DWI model needs an imputation strategy");
  }
  if (ddpm_sampling.batch_size < 1) fail("ddpm_sampling.batch_size must be >= 1");
  try {
    classifier.backbone.validate();
    classifier.fit.validate();
    if (classifier.search) classifier.search->validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json fit = c.classifier.fit;
  fit.erase("seed");  // replaced by the per-run seed
  nlohmann::json cls{{"backbone", c.classifier.backbone}, {"fit", fit}};
  if (c.classifier.search) cls["search"] = *c.classifier.search;
  nlohmann::json j{
      {"name", c.name},
      {"modality", classifier::to_string(c.modality)},
      {"strategy", to_string(c.strategy)},
      {"plan", {{"cn", c.plan.add_cn}, {"mci", c.plan.add_mci}, {"ad", c.plan.add_ad}}},
      {"n_runs", c.n_runs},
      {"base_seed", c.base_seed},
      {"seeds", c.seeds},
      {"manifest", c.manifest},
      {"ddpm_checkpoint", c.ddpm_checkpoint ? nlohmann::json(*c.ddpm_checkpoint) : nlohmann::json(nullptr)},
      {"ddpm_sample_seed", c.ddpm_sample_seed},
      {"ddpm_sampling",
       {{"batch_size", c.ddpm_sampling.batch_size}, {"clip_intermediate_x0", c.ddpm_sampling.clip_intermediate_x0}}},
      {"classifier", cls},
      {"output_dir", c.output_dir},
  };
  if (c.test_manifest) j["test_manifest"] = *c.test_manifest;
  return j;
}

ExperimentConfig experiment_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  static const std::set<std::string> known{"name",     "modality",        "strategy",         "plan",
                                           "n_runs",   "base_seed",       "seeds",            "manifest",        "test_manifest",
                                           "ddpm_checkpoint", "ddpm_sample_seed", "ddpm_sampling", "classifier",
                                           "output_dir"};
  if (!j.is_object()) throw ValidationError("experiment config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ValidationError("unknown experiment config key '" + it.key() + "'");
  }
  ExperimentConfig c;
  c.base_dir = base_dir;
  try {
    c.name = j.value("name", std::string());
    c.modality = classifier::modality_from_string(j.value("modality", std::string("T1+DWI")));
    c.strategy = strategy_from_string(j.value("strategy", std::string("None")));
    if (j.contains("plan")) {
      const auto& p = j.at("plan");
      if (p.is_string()) {
        c.plan = parse_plan(p.get<std::string>());
      } else {
        c.plan.add_cn = p.value("cn", 0);
        c.plan.add_mci = p.value("mci", 0);
        c.plan.add_ad = p.value("ad", 0);
      }
    }
    c.n_runs = j.value("n_runs", c.n_runs);
    c.base_seed = j.value("base_seed", c.base_seed);
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.manifest = j.value("manifest", std::string());
    if (j.contains("test_manifest") && !j.at("test_manifest").is_null()) {
      c.test_manifest = j.at("test_manifest").get<std::string>();
    }
    if (j.contains("ddpm_checkpoint") && !j.at("ddpm_checkpoint").is_null()) {
      c.ddpm_checkpoint = j.at("ddpm_checkpoint").get<std::string>();
    }
    c.ddpm_sample_seed = j.value("ddpm_sample_seed", c.ddpm_sample_seed);
    if (j.contains("ddpm_sampling")) {
      const auto& s = j.at("ddpm_sampling");
      c.ddpm_sampling.batch_size = s.value("batch_size", c.ddpm_sampling.batch_size);
      c.ddpm_sampling.clip_intermediate_x0 = s.value("clip_intermediate_x0", c.ddpm_sampling.clip_intermediate_x0);
    }
    if (j.contains("classifier")) {
      const auto& cl = j.at("classifier");
      if (cl.contains("backbone")) c.classifier.backbone = cl.at("backbone").get<classifier::BackboneSpec>();
      if (cl.contains("fit")) c.classifier.fit = cl.at("fit").get<classifier::FitConfig>();
      if (cl.contains("search") && !cl.at("search").is_null()) {
        c.classifier.search = cl.at("search").get<classifier::SearchSpace>();
      }
    }
    c.output_dir = j.value("output_dir", c.output_dir);
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception& e) {
    throw ValidationError(std::string("invalid experiment config: ") + e.what());
  }
  return c;
}

std::vector<ExperimentConfig> load_experiment_configs(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read experiment config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw ValidationError("experiment config " + path.string() + " is not valid JSON: " + e.what());
  }
  const fs::path base = fs::absolute(path).parent_path();
  std::vector<ExperimentConfig> out;
  if (j.is_object() && j.contains("rows")) {
    const nlohmann::json base_cfg = j.value("base", nlohmann::json::object());
    for (const auto& row : j.at("rows")) {
      nlohmann::json merged = base_cfg;
      merged.merge_patch(row);
      out.push_back(experiment_from_json(merged, base));
    }
  } else {
    out.push_back(experiment_from_json(j, base));
  }
  for (const auto& c : out) c.validate();
  return out;
}

std::string experiment_hash(const ExperimentConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("name");
  return config_hash(j);
}

// ---- records --------------------------------------------------------------------------

void to_json(nlohmann::json& j, const RunRecord& r) {
  j = nlohmann::json{{"config_hash", r.config_hash},
                     {"seed", r.seed},
                     {"run_index", r.run_index},
                     {"status", r.status},
                     {"error", r.error},
                     {"name", r.name},
                     {"modality", classifier::to_string(r.modality)},
                     {"strategy", to_string(r.strategy)},
                     {"plan", {{"cn", r.plan.add_cn}, {"mci", r.plan.add_mci}, {"ad", r.plan.add_ad}}},
                     {"paired_train_size", r.paired_train_size},
                     {"train_size", r.train_size},
                     {"val_size", r.val_size},
                     {"test_size", r.test_size},
                     {"metrics", r.metrics},
                     {"learning_rate", r.learning_rate},
                     {"weight_decay", r.weight_decay},
                     {"best_epoch", r.best_epoch},
                     {"wall_seconds", r.wall_seconds},
                     {"started_at", r.started_at},
                     {"finished_at", r.finished_at}};
}

void from_json(const nlohmann::json& j, RunRecord& r) {
  r = RunRecord{};
  r.config_hash = j.at("config_hash").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.run_index = j.value("run_index", 0);
  r.status = j.value("status", std::string("ok"));
  r.error = j.value("error", std::string());
  r.name = j.value("name", std::string());
  r.modality = classifier::modality_from_string(j.at("modality").get<std::string>());
  r.strategy = strategy_from_string(j.at("strategy").get<std::string>());
  const auto& p = j.at("plan");
  r.plan = {p.value("cn", 0), p.value("mci", 0), p.value("ad", 0)};
  r.paired_train_size = j.value("paired_train_size", 0);
  r.train_size = j.value("train_size", 0);
  r.val_size = j.value("val_size", 0);
  r.test_size = j.value("test_size", 0);
  r.metrics = j.at("metrics").get<MetricReport>();
  r.learning_rate = j.value("learning_rate", 0.0);
  r.weight_decay = j.value("weight_decay", 0.0);
  r.best_epoch = j.value("best_epoch", 0);
  r.wall_seconds = j.value("wall_seconds", 0.0);
  r.started_at = j.value("started_at", std::string());
  r.finished_at = j.value("finished_at", std::string());
}

fs::path record_path(const fs::path& output_dir, const std::string& hash, std::uint64_t seed) {
  return output_dir / "runs" / hash / (std::to_string(seed) + ".json");
}

std::vector<RunRecord> load_run_records(const fs::path& dir) {
  const fs::path root = fs::is_directory(dir / "runs") ? dir / "runs" : dir;
  if (!fs::is_directory(root)) throw ValidationError("no run directory at " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string fname = e.path().filename().string();
    if (e.path().extension() != ".json" || fname == "config.json" || fname.ends_with(".failed.json")) continue;
    files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<RunRecord> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    RunRecord r = nlohmann::json::parse(in).get<RunRecord>();
    if (r.status == "ok") out.push_back(std::move(r));
  }
  std::sort(out.begin(), out.end(), [](const RunRecord& a, const RunRecord& b) {
    return std::tie(a.config_hash, a.run_index, a.seed) < std::tie(b.config_hash, b.run_index, b.seed);
  });
  return out;
}

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_json_atomic(const fs::path& path, const nlohmann::json& j) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

void append_line(const fs::path& path, const nlohmann::json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  out << j.dump() << '\n';
}

std::vector<classifier::Sample> to_samples(const std::vector<LoadedScan>& scans) {
  std::vector<classifier::Sample> out;
  out.reserve(scans.size());
  for (const auto& s : scans) out.push_back({s.t1, s.fa, static_cast<int>(s.record.diagnosis)});
  return out;
}

}  // namespace

// ---- runner ---------------------------------------------------------------------------

struct ExperimentRunner::State {
  struct Data {
    std::vector<LoadedScan> paired_train, pool, val, test;
  };
  struct Ddpm {
    diffusion::DdpmCheckpoint ckpt;
    std::unique_ptr<diffusion::DenoiserPredictor> predictor;
    std::map<std::uint64_t, std::shared_ptr<const Volume3D>> samples;
  };
  std::map<std::string, std::shared_ptr<Data>> data;
  std::map<std::string, std::shared_ptr<Ddpm>> ddpm;

  static DatasetManifest checked_manifest(const fs::path& manifest_path) {
    DatasetManifest m;
    try {
      m = load_manifest(manifest_path);
    } catch (const std::exception& e) {
      throw ValidationError("cannot load manifest " + manifest_path.string() + ": " + e.what());
    }
    const auto violations = validate_manifest(m);
    if (!violations.empty()) {
      throw ValidationError("manifest " + manifest_path.string() + " fails validation: " + violations.front().message +
                            " (" + std::to_string(violations.size()) + " violation(s))");
    }
    return m;
  }

  std::shared_ptr<Data> load_data(const fs::path& manifest_path) {
    const std::string key = fs::weakly_canonical(manifest_path).string();
    if (auto it = data.find(key); it != data.end()) return it->second;
    const DatasetManifest m = checked_manifest(manifest_path);
    auto d = std::make_shared<Data>();
    std::vector<ScanRecord> paired_train, pool, val, test;
    for (const auto& r : m.records) {
      if (r.provenance != Provenance::real) continue;
      if (r.split == Split::train) {
        (r.has_dwi ? paired_train : pool).push_back(r);
      } else if (r.has_dwi) {
        (r.split == Split::val ? val : test).push_back(r);
      }
    }
    d->paired_train = load_scans(manifest_path, paired_train);
    d->pool = load_scans(manifest_path, pool);
    d->val = load_scans(manifest_path, val);
    d->test = load_scans(manifest_path, test);
    data[key] = d;
    return d;
  }

  std::vector<LoadedScan> load_test(const fs::path& manifest_path, bool allow_t1_only) {
    std::vector<ScanRecord> test;
    for (const auto& r : checked_manifest(manifest_path).records) {
      if (r.provenance == Provenance::real && r.split == Split::test && (r.has_dwi || allow_t1_only)) test.push_back(r);
    }
    return load_scans(manifest_path, test);
  }

  std::shared_ptr<Ddpm> load_ddpm(const fs::path& dir) {
    const std::string key = fs::weakly_canonical(dir).string();
    if (auto it = ddpm.find(key); it != ddpm.end()) return it->second;
    auto d = std::make_shared<Ddpm>();
    try {
      d->ckpt = diffusion::load_checkpoint(dir);
    } catch (const std::exception& e) {
      throw ValidationError("cannot load DDPM checkpoint " + dir.string() + ": " + e.what());
    }
    d->predictor = std::make_unique<diffusion::DenoiserPredictor>(d->ckpt);
    ddpm[key] = d;
    return d;
  }
};

ExperimentRunner::ExperimentRunner(Log log) : state_(std::make_unique<State>()), log_(std::move(log)) {}
ExperimentRunner::~ExperimentRunner() = default;

std::vector<RunRecord> ExperimentRunner::run(const ExperimentConfig& cfg) {
  cfg.validate();
  auto say = [&](const std::string& s) {
    if (log_) log_(s);
  };
  const std::string hash = experiment_hash(cfg);
  const fs::path out_dir = cfg.resolve(cfg.output_dir);
  const auto data = state_->load_data(cfg.resolve(cfg.manifest));
  if (data->paired_train.empty() || data->val.empty() || data->test.empty()) {
    throw ValidationError("manifest needs paired (T1+DWI) scans in train, val and test");
  }
  std::shared_ptr<State::Ddpm> ddpm;
  if (cfg.strategy == StrategyKind::DDPM) ddpm = state_->load_ddpm(cfg.resolve(*cfg.ddpm_checkpoint));

  write_json_atomic(out_dir / "runs" / hash / "config.json", to_json(cfg));

  FaSampler sampler;
  if (ddpm) {
    sampler = [&](const std::vector<const Volume3D*>& t1, const std::vector<std::uint64_t>& seeds) {
      std::vector<const Volume3D*> todo;
      std::vector<std::uint64_t> todo_seeds;
      for (std::size_t i = 0; i < t1.size(); ++i) {
        if (!ddpm->samples.count(seeds[i]) &&
            std::find(todo_seeds.begin(), todo_seeds.end(), seeds[i]) == todo_seeds.end()) {
          todo.push_back(t1[i]);
          todo_seeds.push_back(seeds[i]);
        }
      }
      if (!todo.empty()) {
        say("  sampling " + std::to_string(todo.size()) + " FA volume(s) with the DDPM");
        auto vols =
            diffusion::sample_conditional(*ddpm->predictor, ddpm->ckpt.schedule(), todo, todo_seeds, cfg.ddpm_sampling);
        for (std::size_t i = 0; i < vols.size(); ++i) {
          ddpm->samples[todo_seeds[i]] = std::make_shared<const Volume3D>(std::move(vols[i]));
        }
      }
      std::vector<Volume3D> out;
      for (auto s : seeds) out.push_back(*ddpm->samples.at(s));
      return out;
    };
  }

  const auto val = to_samples(data->val);
  const auto test = cfg.test_manifest
                        ? to_samples(state_->load_test(cfg.resolve(*cfg.test_manifest), cfg.modality == Modality::T1))
                        : to_samples(data->test);
  if (test.empty()) throw ValidationError("test manifest has no usable test scans");
  const auto seeds = cfg.run_seeds();
  std::vector<RunRecord> records;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    const std::uint64_t seed = seeds[i];
    const fs::path rpath = record_path(out_dir, hash, seed);
    if (fs::exists(rpath)) {
      std::ifstream in(rpath);
      RunRecord r = nlohmann::json::parse(in).get<RunRecord>();
      if (r.status == "ok") {
        say("run " + std::to_string(i) + " (seed " + std::to_string(seed) + ") already complete; skipping");
        records.push_back(std::move(r));
        continue;
      }
    }

    RunRecord r;
    r.config_hash = hash;
    r.seed = seed;
    r.run_index = static_cast<int>(i);
    r.name = cfg.name;
    r.modality = cfg.modality;
    r.strategy = cfg.strategy;
    r.plan = cfg.plan;
    r.paired_train_size = static_cast<int>(data->paired_train.size());
    r.val_size = static_cast<int>(val.size());
    r.test_size = static_cast<int>(test.size());
    r.started_at = utc_now();
    const auto t0 = std::chrono::steady_clock::now();
    say("run " + std::to_string(i) + " (seed " + std::to_string(seed) + "): " + classifier::to_string(cfg.modality) +
        ", " + to_string(cfg.strategy) + ", plan " + to_string(cfg.plan));
    try {
      const AugmentedDataset aug =
          build_augmented_training_set(data->paired_train, data->pool, cfg.plan, cfg.strategy,
                                       derive_seed(seed, "augment"), sampler, cfg.ddpm_sample_seed);
      r.train_size = static_cast<int>(aug.records.size());
      if (r.train_size != r.paired_train_size + cfg.plan.total()) {
        throw std::logic_error("training-set size does not equal paired + plan total");
      }
      const auto train = to_samples(aug.records);
      classifier::FitConfig fc = cfg.classifier.fit;
      fc.seed = derive_seed(seed, "fit");
      classifier::TrainedClassifier model;
      if (cfg.classifier.search) {
        auto res = classifier::hyperparameter_search(*cfg.classifier.search, cfg.classifier.backbone, cfg.modality,
                                                     train, val, fc);
        model = std::move(res.best_model);
      } else {
        model = classifier::fit(cfg.classifier.backbone, cfg.modality, train, val, fc);
      }
      r.learning_rate = model.config.learning_rate;
      r.weight_decay = model.config.weight_decay;
      r.best_epoch = model.best_epoch;
      r.metrics = classification_metrics(classifier::predict_proba(model, test));
      r.status = "ok";
    } catch (const std::exception& e) {
      r.status = "failed";
      r.error = e.what();
      say("  run failed: " + r.error);
    }
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.finished_at = utc_now();
    const nlohmann::json j = r;
    if (r.status == "ok") {
      write_json_atomic(rpath, j);
      say("  acc " + std::to_string(r.metrics.accuracy.value_or(0.0)) + " in " + std::to_string(r.wall_seconds) + " s");
    } else {
      write_json_atomic(out_dir / "runs" / hash / (std::to_string(seed) + ".failed.json"), j);
    }
    append_line(out_dir / "runs.jsonl", j);
    records.push_back(std::move(r));
  }
  return records;
}

std::vector<RunRecord> run_experiment(const ExperimentConfig& cfg) { return ExperimentRunner().run(cfg); }

}  // namespace dwimpute::harness
