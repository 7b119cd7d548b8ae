#include "dwimpute/classifier/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <tuple>
#include <stdexcept>

#include "dwimpute/nn/optim.hpp"
#include "dwimpute/nn/param_io.hpp"

namespace dwimpute::classifier {

using nn::Tensor;

void FitConfig::validate() const {
  if (max_epochs < 1 || patience < 1 || batch_size < 1) {
    throw std::invalid_argument("FitConfig: max_epochs, patience and batch_size must be positive");
  }
  if (patience >= max_epochs) throw std::invalid_argument("FitConfig: patience must be < max_epochs");
  if (!(learning_rate > 0.0) || !(weight_decay >= 0.0)) {
    throw std::invalid_argument("FitConfig: learning_rate must be positive and weight_decay nonnegative");
  }
}

void to_json(nlohmann::json& j, const FitConfig& c) {
  j = nlohmann::json{{"max_epochs", c.max_epochs},       {"patience", c.patience},
                     {"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
                     {"batch_size", c.batch_size},       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, FitConfig& c) {
  c = FitConfig{};
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
}

StopTrace run_with_early_stopping(int max_epochs, int patience, const std::function<void(int)>& train_epoch,
                                  const std::function<double(int)>& validate,
                                  const std::function<void(int)>& on_new_best) {
  StopTrace trace;
  int since_best = 0;
  for (int epoch = 1; epoch <= max_epochs; ++epoch) {
    train_epoch(epoch);
    const double score = validate(epoch);
    trace.scores.push_back(score);
    trace.epochs_run = epoch;
    if (trace.best_epoch == 0 || score > trace.best_score) {
      trace.best_score = score;
      trace.best_epoch = epoch;
      since_best = 0;
      if (on_new_best) on_new_best(epoch);
    } else if (++since_best >= patience) {
      break;
    }
  }
  return trace;
}

namespace {

const Volume3D& volume_for(const Sample& s, bool dwi) {
  const auto& p = dwi ? s.dwi : s.t1;
  if (!p) throw std::invalid_argument(std::string("sample is missing its ") + (dwi ? "DWI" : "T1") + " volume");
  return *p;
}

Tensor<float> stack(const std::vector<Sample>& samples, const std::vector<std::size_t>& idx, bool dwi,
                    const Dims& d) {
  const auto s = static_cast<std::int64_t>(d.count());
  Tensor<float> x({static_cast<std::int64_t>(idx.size()), 1, d.nx, d.ny, d.nz});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Volume3D& v = volume_for(samples[idx[i]], dwi);
    if (!(v.dims() == d)) {
      throw std::invalid_argument("sample volume dims " + to_string(v.dims()) + " differ from " + to_string(d));
    }
    std::copy(v.voxels().begin(), v.voxels().end(), x.data() + static_cast<std::int64_t>(i) * s);
  }
  return x;
}

struct Inputs {
  Tensor<float> a;
  std::optional<Tensor<float>> b;
};

Inputs batch_inputs(const std::vector<Sample>& samples, const std::vector<std::size_t>& idx, Modality m,
                    const Dims& d) {
  Inputs in;
  in.a = stack(samples, idx, m == Modality::DWI, d);
  if (m == Modality::Both) in.b = stack(samples, idx, true, d);
  return in;
}

void check_labels(const std::vector<Sample>& samples, int k, const char* what) {
  for (const auto& s : samples) {
    if (s.label < 0 || s.label >= k) {
      throw std::invalid_argument(std::string(what) + ": label " + std::to_string(s.label) + " outside the class set");
    }
  }
}

Dims data_dims(const std::vector<Sample>& samples, Modality m) {
  return volume_for(samples.front(), m == Modality::DWI).dims();
}

std::vector<std::vector<double>> logits_eval(ClassifierNet<float>& net, const std::vector<Sample>& samples,
                                             int batch_size) {
  Rng unused(0);
  std::vector<std::vector<double>> out;
  const Dims d = net.spec().input_dims;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t k = start; k < std::min(samples.size(), start + static_cast<std::size_t>(batch_size)); ++k)
      idx.push_back(k);
    const Inputs in = batch_inputs(samples, idx, net.modality(), d);
    const Tensor<float> z = net.forward(in.a, in.b ? &*in.b : nullptr, false, unused);
    const int k = static_cast<int>(z.dim(1));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out.emplace_back(z.data() + i * k, z.data() + (i + 1) * k);
    }
  }
  return out;
}

double accuracy_of(ClassifierNet<float>& net, const std::vector<Sample>& samples, int batch_size) {
  const auto z = logits_eval(net, samples, batch_size);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto best = std::max_element(z[i].begin(), z[i].end()) - z[i].begin();
    if (best == samples[i].label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

}  // namespace

TrainedClassifier fit(BackboneSpec spec, Modality modality, const std::vector<Sample>& train,
                      const std::vector<Sample>& val, const FitConfig& cfg) {
  cfg.validate();
  if (train.empty() || val.empty()) throw std::invalid_argument("fit: empty training or validation set");
  check_labels(train, spec.num_classes, "fit");
  check_labels(val, spec.num_classes, "fit");
  spec.input_dims = data_dims(train, modality);

  ClassifierNet<float> net(spec, modality, derive_seed(cfg.seed, "init"));
  const auto params = net.parameters();
  nn::Adam<float> opt(params, nn::AdamOptions{.learning_rate = cfg.learning_rate, .weight_decay = cfg.weight_decay});
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  Rng dropout_rng(derive_seed(cfg.seed, "dropout"));

  TrainedClassifier out;
  out.spec = net.spec();
  out.modality = modality;
  out.config = cfg;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<float> best_weights;

  auto train_epoch = [&](int) {
    shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(
                                                             order.size(), start + static_cast<std::size_t>(cfg.batch_size))));
      const Inputs in = batch_inputs(train, idx, modality, out.spec.input_dims);
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(train[i].label);
      opt.zero_grad();
      const Tensor<float> z = net.forward(in.a, in.b ? &*in.b : nullptr, true, dropout_rng);
      Tensor<float> dz;
      const double loss = cross_entropy(z, labels, &dz);
      net.backward(dz);
      opt.step();
      loss_sum += loss * static_cast<double>(idx.size());
    }
    out.train_loss_history.push_back(loss_sum / static_cast<double>(train.size()));
  };
  auto validate = [&](int) { return accuracy_of(net, val, std::max(cfg.batch_size, 8)); };
  auto on_best = [&](int) { best_weights = nn::flatten_params(params); };

  const StopTrace trace = run_with_early_stopping(cfg.max_epochs, cfg.patience, train_epoch, validate, on_best);
  out.weights = std::move(best_weights);
  out.best_epoch = trace.best_epoch;
  out.epochs_trained = trace.epochs_run;
  out.best_val_accuracy = trace.best_score;
  out.val_accuracy_history = trace.scores;
  return out;
}

ScoreMatrix predict_proba(const TrainedClassifier& model, const std::vector<Sample>& samples, int batch_size) {
  ClassifierNet<float> net(model.spec, model.modality, 0);
  nn::unflatten_params(model.weights, net.parameters());
  ScoreMatrix sm;
  sm.n_classes = model.spec.num_classes;
  if (samples.empty()) return sm;
  const auto z = logits_eval(net, samples, std::max(1, batch_size));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto p = softmax_rows(z[i], sm.n_classes);
    sm.probs.insert(sm.probs.end(), p.begin(), p.end());
    sm.labels.push_back(samples[i].label);
  }
  return sm;
}

std::vector<int> argmax_rows(const ScoreMatrix& scores) {
  std::vector<int> out;
  for (std::size_t i = 0; i < scores.n_samples(); ++i) {
    int best = 0;
    for (int c = 1; c < scores.n_classes; ++c)
      if (scores.at(i, c) > scores.at(i, best)) best = c;
    out.push_back(best);
  }
  return out;
}

void save_classifier(const TrainedClassifier& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nn::write_blob(m.weights, dir / "weights.bin");
  nlohmann::json meta{{"format", "dwimpute-classifier"},
                      {"format_version", 1},
                      {"spec", m.spec},
                      {"modality", to_string(m.modality)},
                      {"best_epoch", m.best_epoch},
                      {"epochs_trained", m.epochs_trained},
                      {"best_val_accuracy", m.best_val_accuracy},
                      {"val_accuracy_history", m.val_accuracy_history},
                      {"train_loss_history", m.train_loss_history},
                      {"fit", m.config},
                      {"config_hash", m.config_hash},
                      {"weights_file", "weights.bin"}};
  std::ofstream out(dir / "meta.json");
  out << meta.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + (dir / "meta.json").string());
}

TrainedClassifier load_classifier(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw std::runtime_error("classifier meta.json not found in " + dir.string());
  const auto meta = nlohmann::json::parse(in);
  if (meta.value("format", "") != "dwimpute-classifier") {
    throw std::runtime_error(dir.string() + " is not a classifier model directory");
  }
  TrainedClassifier m;
  m.spec = meta.at("spec").get<BackboneSpec>();
  m.modality = modality_from_string(meta.at("modality").get<std::string>());
  m.best_epoch = meta.value("best_epoch", 0);
  m.epochs_trained = meta.value("epochs_trained", 0);
  m.best_val_accuracy = meta.value("best_val_accuracy", 0.0);
  m.val_accuracy_history = meta.value("val_accuracy_history", std::vector<double>{});
  m.train_loss_history = meta.value("train_loss_history", std::vector<double>{});
  m.config = meta.at("fit").get<FitConfig>();
  m.config_hash = meta.value("config_hash", "");
  m.weights = nn::read_blob(dir / meta.value("weights_file", "weights.bin"));
  ClassifierNet<float> probe(m.spec, m.modality, 0);
  nn::unflatten_params(m.weights, probe.parameters());
  return m;
}

// ---- search ----------------------------------------------------------------------------

void SearchSpace::validate() const {
  if (learning_rates.empty() || weight_decays.empty()) throw std::invalid_argument("SearchSpace: empty grid");
  if (strategy == SearchStrategy::random_k && budget < 1) {
    throw std::invalid_argument("SearchSpace: random_k needs a positive budget");
  }
}

void to_json(nlohmann::json& j, const SearchSpace& s) {
  j = nlohmann::json{{"learning_rates", s.learning_rates},
                     {"weight_decays", s.weight_decays},
                     {"strategy", s.strategy == SearchStrategy::exhaustive ? "exhaustive" : "random-k"},
                     {"budget", s.budget},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SearchSpace& s) {
  s = SearchSpace{};
  if (j.contains("learning_rates")) s.learning_rates = j.at("learning_rates").get<std::vector<double>>();
  if (j.contains("weight_decays")) s.weight_decays = j.at("weight_decays").get<std::vector<double>>();
  const std::string strat = j.value("strategy", std::string("exhaustive"));
  if (strat == "exhaustive") {
    s.strategy = SearchStrategy::exhaustive;
  } else if (strat == "random-k" || strat == "random_k") {
    s.strategy = SearchStrategy::random_k;
  } else {
    throw std::invalid_argument("SearchSpace: unknown strategy '" + strat + "'");
  }
  s.budget = j.value("budget", s.budget);
  s.seed = j.value("seed", s.seed);
}

std::vector<std::pair<double, double>> search_points(const SearchSpace& space) {
  space.validate();
  std::vector<std::pair<double, double>> pts;
  for (double lr : space.learning_rates)
    for (double wd : space.weight_decays) pts.emplace_back(lr, wd);
  if (space.strategy == SearchStrategy::random_k && static_cast<std::size_t>(space.budget) < pts.size()) {
    Rng rng(derive_seed(space.seed, "search"));
    shuffle(pts.begin(), pts.end(), rng);
    pts.resize(static_cast<std::size_t>(space.budget));
  }
  return pts;
}

std::size_t best_row(const std::vector<SearchRow>& rows) {
  if (rows.empty()) throw std::invalid_argument("best_row: no rows");
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& a = rows[i];
    const auto& b = rows[best];
    if (std::tie(a.val_accuracy, a.learning_rate, a.weight_decay) >
        std::tie(b.val_accuracy, b.learning_rate, b.weight_decay)) {
      best = i;
    }
  }
  return best;
}

SearchResult hyperparameter_search(const SearchSpace& space, const BackboneSpec& spec, Modality modality,
                                   const std::vector<Sample>& train, const std::vector<Sample>& val,
                                   const FitConfig& base) {
  SearchResult result;
  for (const auto& [lr, wd] : search_points(space)) {
    FitConfig cfg = base;
    cfg.learning_rate = lr;
    cfg.weight_decay = wd;
    TrainedClassifier m = fit(spec, modality, train, val, cfg);
    result.rows.push_back({lr, wd, m.best_val_accuracy, m.best_epoch});
    if (best_row(result.rows) == result.rows.size() - 1) {
      result.best = m.config;
      result.best_model = std::move(m);
    }
  }
  return result;
}

}  // namespace dwimpute::classifier
