// dwimpute: command-line front end for the phantom generator, DDPM,
// imputation, classifiers and the experiment harness.
//
// Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "CLI11.hpp"
#include "dwimpute/classifier/training.hpp"
#include "dwimpute/diffusion/ddpm.hpp"
#include "dwimpute/harness/config_hash.hpp"
#include "dwimpute/harness/experiment.hpp"
#include "dwimpute/harness/report.hpp"
#include "dwimpute/imputation.hpp"
#include "dwimpute/phantom.hpp"

namespace fs = std::filesystem;
using namespace dwimpute;
using harness::ValidationError;

namespace {

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ValidationError("cannot read " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw ValidationError(p.string() + " is not valid JSON: " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

template <typename T>
T parse_as(const nlohmann::json& j, const char* what) {
  try {
    return j.get<T>();
  } catch (const std::exception& e) {
    throw ValidationError(std::string("invalid ") + what + ": " + e.what());
  }
}

DatasetManifest load_checked_manifest(const fs::path& path) {
  DatasetManifest m;
  try {
    m = load_manifest(path);
  } catch (const std::exception& e) {
    throw ValidationError("cannot load manifest " + path.string() + ": " + e.what());
  }
  const auto v = validate_manifest(m);
  if (!v.empty()) {
    for (const auto& x : v) log_line("manifest violation [" + to_string(x.rule) + "]: " + x.message);
    throw ValidationError("manifest " + path.string() + " has " + std::to_string(v.size()) + " violation(s)");
  }
  return m;
}

std::vector<ScanRecord> select_records(const DatasetManifest& m, Split split, bool need_t1, bool need_dwi) {
  std::vector<ScanRecord> out;
  for (const auto& r : m.records) {
    if (r.split != split || (need_t1 && !r.has_t1) || (need_dwi && !r.has_dwi)) continue;
    out.push_back(r);
  }
  return out;
}

std::vector<diffusion::VolumePair> load_pairs(const fs::path& manifest_path, const std::vector<ScanRecord>& recs) {
  std::vector<diffusion::VolumePair> out;
  for (const auto& s : load_scans(manifest_path, recs)) out.push_back({*s.t1, *s.fa});
  return out;
}

std::vector<classifier::Sample> load_samples(const fs::path& manifest_path, const DatasetManifest& m, Split split,
                                             classifier::Modality modality) {
  const bool need_t1 = modality != classifier::Modality::DWI;
  const bool need_dwi = modality != classifier::Modality::T1;
  std::vector<classifier::Sample> out;
  for (const auto& s : load_scans(manifest_path, select_records(m, split, need_t1, need_dwi))) {
    out.push_back({s.t1, s.fa, static_cast<int>(s.record.diagnosis)});
  }
  return out;
}

// ---- subcommands ----------------------------------------------------------------------------

int cmd_phantom_generate(const std::string& spec_path, const std::string& out, std::optional<std::uint64_t> seed) {
  const nlohmann::json j = read_json(spec_path);
  PhantomSpec spec = parse_as<PhantomSpec>(j, "phantom spec");
  if (!j.contains("counts")) throw ValidationError("phantom spec needs a \"counts\" object");
  const DatasetOptions opts = parse_as<DatasetOptions>(j, "dataset counts");
  if (seed) spec.seed = *seed;
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  const DatasetManifest m = generate_dataset(spec, opts, out);
  std::size_t paired = 0;
  for (const auto& r : m.records) paired += r.has_dwi;
  log_line("wrote " + std::to_string(m.records.size()) + " scans (" + std::to_string(paired) + " paired) to " + out);
  return 0;
}

int cmd_ddpm_train(const std::string& manifest_path, const std::string& config_path, const std::string& out,
                   std::optional<std::uint64_t> seed) {
  const nlohmann::json cfg = read_json(config_path);
  auto spec = parse_as<diffusion::DenoiserSpec>(cfg.value("denoiser", nlohmann::json::object()), "denoiser");
  const auto sched = parse_as<diffusion::ScheduleParams>(cfg.value("schedule", nlohmann::json::object()), "schedule");
  auto train_cfg = parse_as<diffusion::DdpmTrainConfig>(cfg.value("train", nlohmann::json::object()), "train");
  if (seed) train_cfg.seed = *seed;
  try {
    train_cfg.validate();
    diffusion::make_schedule(sched);
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  const DatasetManifest m = load_checked_manifest(manifest_path);
  const auto train = load_pairs(manifest_path, select_records(m, Split::train, true, true));
  const auto val = cfg.value("record_val_loss", true) ? load_pairs(manifest_path, select_records(m, Split::val, true, true))
                                                      : std::vector<diffusion::VolumePair>{};
  if (train.empty()) throw ValidationError("manifest has no paired training scans");
  spec.input_dims = train.front().t1.dims();
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  log_line("training DDPM on " + std::to_string(train.size()) + " pairs for " + std::to_string(train_cfg.epochs) +
           " epochs");
  diffusion::TrainHooks hooks;
  hooks.on_epoch = [](int epoch, double loss) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "epoch %d  loss %.6f", epoch, loss);
    log_line(buf);
  };
  auto ckpt = diffusion::train_ddpm(train, train_cfg, spec, sched, val, hooks);
  nlohmann::json hashed = cfg;
  hashed["manifest"] = manifest_path;
  hashed["train"] = train_cfg;
  ckpt.config_hash = harness::config_hash(hashed);
  diffusion::save_checkpoint(ckpt, out);
  log_line("final loss " + std::to_string(ckpt.final_loss) + "; checkpoint written to " + out);
  return 0;
}

int cmd_ddpm_sample(const std::string& ckpt_dir, const std::string& t1_path, const std::string& out,
                    std::uint64_t seed, bool clip_x0) {
  diffusion::DdpmCheckpoint ckpt;
  Volume3D t1;
  try {
    ckpt = diffusion::load_checkpoint(ckpt_dir);
    t1 = read_volume(t1_path);
  } catch (const std::exception& e) {
    throw ValidationError(e.what());
  }
  if (!(t1.dims() == ckpt.spec.input_dims)) {
    throw ValidationError("T1 dims " + to_string(t1.dims()) + " do not match checkpoint dims " +
                          to_string(ckpt.spec.input_dims));
  }
  diffusion::SampleOptions opts;
  opts.clip_intermediate_x0 = clip_x0;
  write_volume(diffusion::sample_conditional(t1, ckpt, seed, opts), out);
  log_line("wrote " + out);
  return 0;
}

int cmd_impute(const std::string& manifest_path, const std::string& strategy_name, const std::string& plan_text,
               const std::optional<std::string>& ckpt_dir, std::uint64_t seed, const std::string& out,
               int sample_batch) {
  StrategyKind kind;
  AugmentationPlan plan;
  try {
    kind = strategy_from_string(strategy_name);
    plan = parse_plan(plan_text);
    ImputationStrategy{kind, ckpt_dir ? std::optional<fs::path>(*ckpt_dir) : std::nullopt}.validate();
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  if (kind == StrategyKind::None) throw ValidationError("impute needs a strategy other than none");
  const DatasetManifest m = load_checked_manifest(manifest_path);
  std::vector<ScanRecord> paired, pool;
  for (const auto& r : m.records) {
    if (r.split != Split::train || r.provenance != Provenance::real) continue;
    (r.has_dwi ? paired : pool).push_back(r);
  }
  const auto paired_scans = load_scans(manifest_path, paired);
  const auto pool_scans = load_scans(manifest_path, pool);

  FaSampler sampler;
  std::optional<diffusion::DdpmCheckpoint> ckpt;
  if (kind == StrategyKind::DDPM) {
    try {
      ckpt = diffusion::load_checkpoint(*ckpt_dir);
    } catch (const std::exception& e) {
      throw ValidationError(e.what());
    }
    sampler = [&](const std::vector<const Volume3D*>& t1, const std::vector<std::uint64_t>& seeds) {
      log_line("sampling " + std::to_string(t1.size()) + " FA volume(s)");
      diffusion::DenoiserPredictor predictor(*ckpt);
      diffusion::SampleOptions opts;
      opts.batch_size = sample_batch;
      return diffusion::sample_conditional(predictor, ckpt->schedule(), t1, seeds, opts);
    };
  }
  AugmentedDataset aug;
  try {
    aug = build_augmented_training_set(paired_scans, pool_scans, plan, kind, seed, sampler);
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }

  // Output manifest: every original record with paths made absolute, the
  // selected T1-only records upgraded to imputed pairs.
  const fs::path out_dir(out);
  fs::create_directories(out_dir / "volumes");
  std::map<std::string, const LoadedScan*> imputed;
  for (const auto& s : aug.records)
    if (s.record.provenance != Provenance::real) imputed[s.record.scan_id] = &s;
  DatasetManifest result;
  for (ScanRecord r : m.records) {
    if (r.t1_path) r.t1_path = fs::absolute(resolve_path(manifest_path, *r.t1_path)).string();
    if (r.dwi_path) r.dwi_path = fs::absolute(resolve_path(manifest_path, *r.dwi_path)).string();
    if (auto it = imputed.find(r.scan_id); it != imputed.end()) {
      const LoadedScan& s = *it->second;
      const std::string rel = "volumes/" + *s.record.dwi_path;
      write_volume(*s.fa, out_dir / rel);
      r.has_dwi = true;
      r.dwi_path = rel;
      r.provenance = s.record.provenance;
    }
    result.records.push_back(std::move(r));
  }
  save_manifest(result, out_dir / "manifest.json");
  log_line("imputed " + std::to_string(imputed.size()) + " FA volume(s) with " + to_string(kind) + "; manifest at " +
           (out_dir / "manifest.json").string());
  return 0;
}

int cmd_classify_train(const std::string& manifest_path, const std::string& modality_name,
                       const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed) {
  classifier::Modality modality;
  try {
    modality = classifier::modality_from_string(modality_name);
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  const nlohmann::json cfg = read_json(config_path);
  auto backbone = parse_as<classifier::BackboneSpec>(cfg.value("backbone", nlohmann::json::object()), "backbone");
  auto fit_cfg = parse_as<classifier::FitConfig>(cfg.value("fit", nlohmann::json::object()), "fit");
  if (seed) fit_cfg.seed = *seed;
  std::optional<classifier::SearchSpace> search;
  if (cfg.contains("search")) search = parse_as<classifier::SearchSpace>(cfg.at("search"), "search");
  try {
    fit_cfg.validate();
    if (search) search->validate();
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  const DatasetManifest m = load_checked_manifest(manifest_path);
  const auto train = load_samples(manifest_path, m, Split::train, modality);
  const auto val = load_samples(manifest_path, m, Split::val, modality);
  if (train.empty() || val.empty()) throw ValidationError("no train or val scans with the required modality");
  backbone.input_dims = (train.front().t1 ? train.front().t1 : train.front().dwi)->dims();
  try {
    backbone.validate();
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  log_line("training " + classifier::to_string(modality) + " classifier on " + std::to_string(train.size()) +
           " scans");
  classifier::TrainedClassifier model;
  if (search) {
    auto res = classifier::hyperparameter_search(*search, backbone, modality, train, val, fit_cfg);
    for (const auto& row : res.rows) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "lr %.1e  wd %.1e  val acc %.4f  best epoch %d", row.learning_rate,
                    row.weight_decay, row.val_accuracy, row.best_epoch);
      log_line(buf);
    }
    model = std::move(res.best_model);
  } else {
    model = classifier::fit(backbone, modality, train, val, fit_cfg);
  }
  nlohmann::json hashed = cfg;
  hashed["manifest"] = manifest_path;
  hashed["modality"] = classifier::to_string(modality);
  model.config_hash = harness::config_hash(hashed);
  classifier::save_classifier(model, out);
  log_line("best epoch " + std::to_string(model.best_epoch) + " val acc " + std::to_string(model.best_val_accuracy) +
           "; model written to " + out);
  return 0;
}

int cmd_classify_eval(const std::string& model_dir, const std::string& manifest_path, const std::string& split_name,
                      const std::string& out) {
  classifier::TrainedClassifier model;
  Split split;
  try {
    model = classifier::load_classifier(model_dir);
    split = split_from_string(split_name);
  } catch (const std::exception& e) {
    throw ValidationError(e.what());
  }
  const DatasetManifest m = load_checked_manifest(manifest_path);
  const auto samples = load_samples(manifest_path, m, split, model.modality);
  if (samples.empty()) throw ValidationError("no " + split_name + " scans with the model's modality");
  const MetricReport report = classification_metrics(classifier::predict_proba(model, samples));
  const nlohmann::json j = report;
  write_text(out, j.dump(2) + "\n");
  for (const auto& w : report.warnings) log_line("warning: " + w);
  log_line("accuracy " + std::to_string(report.accuracy.value_or(0.0)) + " on " + std::to_string(samples.size()) +
           " scans; metrics written to " + out);
  return 0;
}

void write_reports(const fs::path& out_dir) {
  const auto table = harness::render_table(harness::load_run_records(out_dir));
  write_text(out_dir / "report.csv", harness::to_csv(table));
  write_text(out_dir / "report.txt", harness::to_text(table));
}

int cmd_experiment_run(const std::string& config_path, const std::optional<std::string>& out_override,
                       std::optional<std::uint64_t> seed) {
  auto configs = harness::load_experiment_configs(config_path);
  harness::ExperimentRunner runner(log_line);
  std::set<fs::path> out_dirs;
  int failures = 0;
  for (auto& cfg : configs) {
    if (out_override) cfg.output_dir = fs::absolute(*out_override).string();
    if (seed) cfg.base_seed = *seed;
    for (const auto& r : runner.run(cfg)) failures += r.status != "ok";
    out_dirs.insert(cfg.resolve(cfg.output_dir));
  }
  for (const auto& d : out_dirs) {
    write_reports(d);
    log_line("report written to " + (d / "report.csv").string());
  }
  if (failures) {
    log_line(std::to_string(failures) + " run(s) failed; see runs/*/*.failed.json");
    return 2;
  }
  return 0;
}

int cmd_report(const std::string& in, const std::string& format, const std::optional<std::string>& out) {
  const auto records = harness::load_run_records(in);
  if (records.empty()) throw ValidationError("no completed run records under " + in);
  const auto table = harness::render_table(records);
  const std::string text = format == "csv" ? harness::to_csv(table) : harness::to_text(table);
  if (out) {
    write_text(*out, text);
  } else {
    std::cout << text;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Missing-modality imputation with a conditional 3D diffusion model"};
  app.require_subcommand(1);

  std::string spec, config, out, manifest, ckpt, t1, strategy, plan, modality, model, split = "test", in,
                                                                                   format = "text";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_opt, ckpt_opt;
  bool clip_x0 = false;
  int sample_batch = 4;

  auto* phantom = app.add_subcommand("phantom", "Synthetic paired T1/FA data");
  phantom->require_subcommand(1);
  auto* gen = phantom->add_subcommand("generate", "Generate a phantom dataset and manifest");
  auto* spec_opt = gen->add_option("--spec", spec, "Phantom spec JSON (PhantomSpec fields plus counts)");
  gen->add_option("--config", spec, "Alias of --spec")->excludes(spec_opt);
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--seed", seed, "Override the phantom seed");

  auto* ddpm = app.add_subcommand("ddpm", "Conditional diffusion model");
  ddpm->require_subcommand(1);
  auto* dtrain = ddpm->add_subcommand("train", "Train a DDPM on the paired training scans");
  dtrain->add_option("--manifest", manifest)->required();
  dtrain->add_option("--config", config, "JSON with denoiser, schedule and train sections")->required();
  dtrain->add_option("--out", out, "Checkpoint directory")->required();
  dtrain->add_option("--seed", seed, "Override train.seed");
  auto* dsample = ddpm->add_subcommand("sample", "Sample one FA volume conditioned on a T1 volume");
  dsample->add_option("--ckpt", ckpt)->required();
  dsample->add_option("--t1", t1)->required();
  dsample->add_option("--out", out)->required();
  dsample->add_option("--seed", seed);
  dsample->add_flag("--clip-x0", clip_x0, "Clip the x0 estimate at every reverse step");

  auto* impute = app.add_subcommand("impute", "Impute FA for T1-only training scans");
  impute->add_option("--manifest", manifest)->required();
  impute->add_option("--strategy", strategy, "ddpm | blank | avgdx")->required();
  impute->add_option("--plan", plan, "e.g. cn=0,mci=200,ad=100")->required();
  impute->add_option("--ckpt", ckpt_opt, "DDPM checkpoint (strategy ddpm)");
  impute->add_option("--seed", seed);
  impute->add_option("--out", out)->required();
  impute->add_option("--sample-batch", sample_batch, "Volumes per denoiser call")->check(CLI::PositiveNumber);

  auto* classify = app.add_subcommand("classify", "CN/MCI/AD classifiers");
  classify->require_subcommand(1);
  auto* ctrain = classify->add_subcommand("train", "Train a classifier");
  ctrain->add_option("--manifest", manifest)->required();
  ctrain->add_option("--modality", modality, "t1 | dwi | both")->required();
  ctrain->add_option("--config", config, "JSON with backbone, fit and optional search sections")->required();
  ctrain->add_option("--out", out, "Model directory")->required();
  ctrain->add_option("--seed", seed, "Override fit.seed");
  auto* ceval = classify->add_subcommand("eval", "Evaluate a trained classifier");
  ceval->add_option("--model", model)->required();
  ceval->add_option("--manifest", manifest)->required();
  ceval->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  ceval->add_option("--out", out, "Metrics JSON")->required();

  auto* experiment = app.add_subcommand("experiment", "Seeded experiment grids");
  experiment->require_subcommand(1);
  auto* erun = experiment->add_subcommand("run", "Run every experiment in a config file");
  erun->add_option("--config", config)->required();
  erun->add_option("--out", out_opt, "Override output_dir");
  erun->add_option("--seed", seed, "Override base_seed");

  auto* report = app.add_subcommand("report", "Render a results table from run records");
  report->add_option("--in", in, "Experiment output directory")->required();
  report->add_option("--format", format)->check(CLI::IsMember({"csv", "text"}));
  report->add_option("--out", out_opt, "Write to a file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      if (spec.empty()) throw ValidationError("phantom generate needs --spec or --config");
      return cmd_phantom_generate(spec, out, seed);
    }
    if (dtrain->parsed()) return cmd_ddpm_train(manifest, config, out, seed);
    if (dsample->parsed()) return cmd_ddpm_sample(ckpt, t1, out, seed.value_or(0), clip_x0);
    if (impute->parsed()) return cmd_impute(manifest, strategy, plan, ckpt_opt, seed.value_or(0), out, sample_batch);
    if (ctrain->parsed()) return cmd_classify_train(manifest, modality, config, out, seed);
    if (ceval->parsed()) return cmd_classify_eval(model, manifest, split, out);
    if (erun->parsed()) return cmd_experiment_run(config, out_opt, seed);
    if (report->parsed()) return cmd_report(in, format, out_opt);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << '\n';
    return 2;
  }
  std::cerr << app.help();
  return 1;
}
