#include <fstream>
#include <set>

#include "doctest.h"
#include "dwimpute/harness/config_hash.hpp"
#include "dwimpute/harness/experiment.hpp"
#include "dwimpute/harness/report.hpp"
#include "dwimpute/phantom.hpp"
#include "support.hpp"

using namespace dwimpute;
using namespace dwimpute::harness;
using classifier::Modality;
using nlohmann::json;

namespace {

// 8^3 phantoms: 4 train scans per class (half paired), 2 val and 2 test per
// class, all paired.
std::filesystem::path make_dataset(const std::filesystem::path& dir) {
  PhantomSpec spec;
  spec.dims = {8, 8, 8};
  spec.seed = 21;
  DatasetOptions opts;
  for (Diagnosis d : kAllDiagnoses) {
    opts.counts.at(Split::train, d) = 4;
    opts.counts.at(Split::val, d) = 2;
    opts.counts.at(Split::test, d) = 2;
  }
  opts.paired_fraction = 0.5;
  opts.paired_fraction_by_split[static_cast<int>(Split::val)] = 1.0;
  opts.paired_fraction_by_split[static_cast<int>(Split::test)] = 1.0;
  generate_dataset(spec, opts, dir);
  return dir / "manifest.json";
}

ExperimentConfig small_config(const std::filesystem::path& manifest, const std::filesystem::path& out) {
  ExperimentConfig c;
  c.name = "small";
  c.modality = Modality::Both;
  c.strategy = StrategyKind::Blank;
  c.plan = {1, 1, 1};
  c.n_runs = 2;
  c.base_seed = 3;
  c.manifest = manifest.string();
  c.output_dir = out.string();
  c.classifier.backbone.width_scale = 8;
  c.classifier.fit.max_epochs = 2;
  c.classifier.fit.patience = 1;
  return c;
}

RunRecord fake_record(Modality m, StrategyKind s, AugmentationPlan plan, int paired, double acc, std::uint64_t seed) {
  RunRecord r;
  r.modality = m;
  r.strategy = s;
  r.plan = plan;
  r.paired_train_size = paired;
  r.train_size = paired + plan.total();
  r.seed = seed;
  r.metrics.accuracy = acc;
  r.metrics.balanced_accuracy = acc;
  r.metrics.micro_auc = acc;
  r.metrics.macro_auc = acc;
  r.metrics.macro_precision = acc;
  r.metrics.macro_f1 = acc;
  r.config_hash = classifier::to_string(m) + to_string(s) + to_string(plan);
  return r;
}

}  // namespace

TEST_CASE("canonical JSON sorts keys and normalizes numbers") {
  const auto j = json::parse(R"({"b": [1, 2.5, "x"], "a": {"d": true, "c": null}})");
  CHECK(canonical_json(j) == R"({"a":{"c":null,"d":true},"b":[1,2.5,"x"]})");
  CHECK(canonical_json(json(1)) == canonical_json(json(1.0)));
  CHECK(canonical_json(json::parse("1e0")) == "1");
  CHECK(canonical_json(json(-3.0)) == "-3");
  CHECK(json::parse(canonical_json(json(0.1))).get<double>() == 0.1);
}

TEST_CASE("config hash examples") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  const auto j = json::parse(R"({"b": [1, 2.5, "x"], "a": {"d": true, "c": null}})");
  CHECK(config_hash(j) == "d3cbaba186d0a76ddf974e21d40e3de124c078efbd1038456dcae72fb8ce2464");

  const auto a = json::parse(R"({"lr": 1e-4, "modality": "T1", "output_dir": "x", "seeds": [1, 2]})");
  const auto b = json::parse(R"({"modality": "T1", "lr": 0.0001, "output_dir": "y", "n_runs": 5})");
  CHECK(config_hash(a) == config_hash(b));
  const auto c = json::parse(R"({"modality": "T1", "lr": 0.0002})");
  CHECK(config_hash(a) != config_hash(c));
  const auto nested = json::parse(R"({"x": {"started_at": "now", "k": 1}})");
  CHECK(config_hash(nested) == config_hash(json::parse(R"({"x": {"k": 1}})")));
  CHECK(is_hash_excluded_key("output_dir"));
  CHECK_FALSE(is_hash_excluded_key("manifest"));
}

TEST_CASE("experiment hash ignores name, seeds and output location") {
  auto a = small_config("m.json", "o1");
  auto b = a;
  b.name = "other";
  b.output_dir = "o2";
  b.base_seed = 99;
  b.n_runs = 7;
  CHECK(experiment_hash(a) == experiment_hash(b));
  b.plan.add_ad = 2;
  CHECK(experiment_hash(a) != experiment_hash(b));
  b = a;
  b.classifier.fit.seed = 1234;
  CHECK(experiment_hash(a) == experiment_hash(b));
  b.classifier.fit.learning_rate *= 2;
  CHECK(experiment_hash(a) != experiment_hash(b));
}

TEST_CASE("run seeds derive stably from the base seed") {
  auto c = small_config("m", "o");
  c.n_runs = 4;
  const auto s = c.run_seeds();
  REQUIRE(s.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(s[i] == derive_seed(3, static_cast<std::uint64_t>(i)));
  CHECK(std::set<std::uint64_t>(s.begin(), s.end()).size() == 4);
  c.n_runs = 6;
  const auto longer = c.run_seeds();
  CHECK(std::equal(s.begin(), s.end(), longer.begin()));
  c.seeds = {5, 6};
  CHECK(c.run_seeds() == std::vector<std::uint64_t>{5, 6});
}

TEST_CASE("experiment validation") {
  auto c = small_config("m", "o");
  CHECK_NOTHROW(c.validate());
  c.modality = Modality::T1;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c.strategy = StrategyKind::None;
  CHECK_NOTHROW(c.validate());
  c = small_config("m", "o");
  c.strategy = StrategyKind::DDPM;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c.ddpm_checkpoint = "ck";
  CHECK_NOTHROW(c.validate());
  c.strategy = StrategyKind::Blank;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = small_config("m", "o");
  c.strategy = StrategyKind::None;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c.plan = {};
  CHECK_NOTHROW(c.validate());
  c = small_config("m", "o");
  c.classifier.fit.patience = c.classifier.fit.max_epochs;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = small_config("", "o");
  CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("experiment config files expand grids and resolve paths") {
  support::TempDir tmp("cfg");
  const json grid = {
      {"base", {{"manifest", "data/manifest.json"}, {"modality", "T1+DWI"}, {"n_runs", 2},
                {"classifier", {{"fit", {{"max_epochs", 3}, {"patience", 1}}}}}}},
      {"rows", json::array({{{"name", "base"}, {"strategy", "None"}},
                            {{"name", "blank"}, {"strategy", "Blank"}, {"plan", {{"cn", 0}, {"mci", 2}, {"ad", 1}}}}})}};
  std::ofstream(tmp / "grid.json") << grid.dump();
  const auto cfgs = load_experiment_configs(tmp / "grid.json");
  REQUIRE(cfgs.size() == 2);
  CHECK(cfgs[0].strategy == StrategyKind::None);
  CHECK(cfgs[1].plan == AugmentationPlan{0, 2, 1});
  CHECK(cfgs[1].n_runs == 2);
  CHECK(cfgs[1].classifier.fit.max_epochs == 3);
  CHECK(cfgs[1].resolve(cfgs[1].manifest) == tmp / "data/manifest.json");

  std::ofstream(tmp / "bad.json") << R"({"manifest": "m", "modality": "T1", "strategy": "Blank"})";
  CHECK_THROWS_AS(load_experiment_configs(tmp / "bad.json"), ValidationError);
}

TEST_CASE("report rows are grouped by modality, total and strategy") {
  std::vector<RunRecord> recs;
  const AugmentationPlan plus{0, 2, 1};
  for (std::uint64_t seed : {1u, 2u}) {
    recs.push_back(fake_record(Modality::T1, StrategyKind::None, {}, 10, 0.5, seed));
    recs.push_back(fake_record(Modality::Both, StrategyKind::AvgDX, plus, 10, 0.6, seed));
    recs.push_back(fake_record(Modality::Both, StrategyKind::None, {}, 10, seed == 1 ? 0.6 : 0.7, seed));
    recs.push_back(fake_record(Modality::DWI, StrategyKind::Blank, plus, 10, 0.4, seed));
    recs.push_back(fake_record(Modality::Both, StrategyKind::DDPM, plus, 10, 0.8, seed));
  }
  const auto table = render_table(recs);
  REQUIRE(table.rows.size() == 5);
  CHECK(table.rows[0].modality == Modality::Both);
  CHECK(table.rows[0].strategy == StrategyKind::None);
  CHECK(table.rows[1].strategy == StrategyKind::DDPM);
  CHECK(table.rows[2].strategy == StrategyKind::AvgDX);
  CHECK(table.rows[3].modality == Modality::DWI);
  CHECK(table.rows[4].modality == Modality::T1);
  CHECK(table.rows[1].total == 13);

  const auto cells = table.rows[0].cells();
  REQUIRE(cells.size() == 11);
  CHECK(cells[0] == "0");
  CHECK(cells[3] == "10");
  CHECK(cells[4] == "--");
  CHECK(cells[5] == "65.00±7.07");
  CHECK(table.rows[1].cells()[4] == "DDPM");
  CHECK(table.rows[1].cells()[1] == "2");

  const auto csv = to_csv(table);
  CHECK(csv.substr(0, csv.find('\n')) == "CN,MCI,AD,Total,Imputation,Acc,Bal Acc,Micro AUC,Macro AUC,Macro Prec,Macro F1");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
  const auto text = to_text(table);
  CHECK(text.find("T1+DWI") < text.find("DWI\n"));
  CHECK(text.find("65.00±7.07") != std::string::npos);
}

TEST_CASE("report ordering does not depend on record order") {
  std::vector<RunRecord> recs;
  Rng rng(1);
  for (int i = 0; i < 3; ++i)
    for (auto s : {StrategyKind::None, StrategyKind::Blank, StrategyKind::AvgDX})
      recs.push_back(fake_record(Modality::Both, s, s == StrategyKind::None ? AugmentationPlan{} : AugmentationPlan{1, 0, 0},
                                 4, 0.5 + 0.1 * i, static_cast<std::uint64_t>(i)));
  const auto ref = to_csv(render_table(recs));
  for (int t = 0; t < 10; ++t) {
    shuffle(recs.begin(), recs.end(), rng);
    CHECK(to_csv(render_table(recs)) == ref);
  }
}

TEST_CASE("small experiment: sizes, determinism and resume") {
  support::TempDir tmp("exp");
  const auto manifest = make_dataset(tmp / "data");
  auto cfg = small_config(manifest, tmp / "out1");
  const auto recs = run_experiment(cfg);
  REQUIRE(recs.size() == 2);
  for (const auto& r : recs) {
    CHECK(r.status == "ok");
    CHECK(r.paired_train_size == 6);
    CHECK(r.train_size == 9);
    CHECK(r.val_size == 6);
    CHECK(r.test_size == 6);
    CHECK(r.metrics.accuracy.has_value());
    CHECK(std::filesystem::exists(record_path(tmp / "out1", r.config_hash, r.seed)));
  }
  CHECK(recs[0].seed != recs[1].seed);
  CHECK(std::filesystem::exists(tmp / "out1" / "runs.jsonl"));
  CHECK(std::filesystem::exists(tmp / "out1" / "runs" / recs[0].config_hash / "config.json"));
  CHECK(render_table(recs).rows.at(0).total == 9);

  auto again = cfg;
  again.output_dir = (tmp / "out2").string();
  const auto recs2 = run_experiment(again);
  REQUIRE(recs2.size() == 2);
  for (int i = 0; i < 2; ++i) CHECK(json(recs2[i].metrics) == json(recs[i].metrics));
  CHECK(to_csv(render_table(recs2)) == to_csv(render_table(recs)));

  std::vector<std::string> log;
  ExperimentRunner runner([&](const std::string& s) { log.push_back(s); });
  const auto resumed = runner.run(cfg);
  REQUIRE(resumed.size() == 2);
  for (int i = 0; i < 2; ++i) CHECK(resumed[i].started_at == recs[i].started_at);
  CHECK(std::count_if(log.begin(), log.end(), [](const std::string& s) { return s.find("skipping") != std::string::npos; }) ==
        2);
  CHECK(load_run_records(tmp / "out1").size() == 2);

  // Validation and test splits are the same whatever the augmentation.
  auto none = cfg;
  none.strategy = StrategyKind::None;
  none.plan = {};
  none.n_runs = 1;
  none.output_dir = (tmp / "out3").string();
  const auto base = run_experiment(none);
  CHECK(base[0].val_size == 6);
  CHECK(base[0].test_size == 6);
  CHECK(base[0].train_size == 6);
}

TEST_CASE("a test manifest override replaces the test split") {
  support::TempDir tmp("exp_override");
  const auto manifest = make_dataset(tmp / "data");
  PhantomSpec spec;
  spec.dims = {8, 8, 8};
  spec.seed = 22;
  DatasetOptions opts;
  for (Diagnosis d : kAllDiagnoses) {
    opts.counts.at(Split::train, d) = 1;
    opts.counts.at(Split::val, d) = 1;
    opts.counts.at(Split::test, d) = 3;
  }
  opts.paired_fraction = 0.0;
  generate_dataset(spec, opts, tmp / "big");

  auto cfg = small_config(manifest, tmp / "out");
  cfg.modality = Modality::T1;
  cfg.strategy = StrategyKind::None;
  cfg.plan = {};
  cfg.n_runs = 1;
  const auto base_hash = experiment_hash(cfg);
  cfg.test_manifest = (tmp / "big" / "manifest.json").string();
  CHECK(experiment_hash(cfg) != base_hash);
  const auto t1 = run_experiment(cfg);
  REQUIRE(t1.size() == 1);
  CHECK(t1[0].status == "ok");
  CHECK(t1[0].test_size == 9);
  CHECK(t1[0].val_size == 6);

  cfg.modality = Modality::Both;
  CHECK_THROWS_AS(run_experiment(cfg), ValidationError);
}

TEST_CASE("a pool shortfall marks the run failed") {
  support::TempDir tmp("exp_fail");
  const auto manifest = make_dataset(tmp / "data");
  auto cfg = small_config(manifest, tmp / "out");
  cfg.plan = {0, 0, 5};
  cfg.n_runs = 1;
  const auto recs = run_experiment(cfg);
  REQUIRE(recs.size() == 1);
  CHECK(recs[0].status == "failed");
  CHECK(recs[0].error.find("AD") != std::string::npos);
  CHECK(load_run_records(tmp / "out").empty());
}
