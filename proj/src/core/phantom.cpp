#include "dwimpute/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <stdexcept>

#include "dwimpute/rng.hpp"

namespace dwimpute {

double fractional_anisotropy(const EigenTriple& e) {
  std::array<double, 3> l{e.lambda1, e.lambda2, e.lambda3};
  std::sort(l.begin(), l.end());
  const double q = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
  if (q == 0.0) return 0.0;
  const double d01 = l[0] - l[1];
  const double d12 = l[1] - l[2];
  const double d20 = l[2] - l[0];
  const double s = d01 * d01 + d12 * d12 + d20 * d20;
  return std::min(1.0, std::sqrt(0.5 * s / q));
}

Volume3D fa_map(const TensorField& f) {
  if (f.triples.size() != f.dims.count()) {
    throw std::invalid_argument("TensorField: triple count does not match dims");
  }
  std::vector<float> out(f.triples.size());
  const auto n = static_cast<std::int64_t>(out.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) out[i] = static_cast<float>(fractional_anisotropy(f.triples[i]));
  return Volume3D(f.dims, f.spacing, std::move(out), RangeTag::unit);
}

void PhantomSpec::validate() const {
  if (dims.nx < 8 || dims.ny < 8 || dims.nz < 8) {
    throw std::invalid_argument("PhantomSpec: dims " + to_string(dims) + " too small (need >= 8 per axis)");
  }
  if (!spacing.positive()) throw std::invalid_argument("PhantomSpec: spacing must be positive");
  for (int c = 0; c < 3; ++c) {
    const auto& g = class_geometry[c];
    if (!(g.ventricle_radius_fraction > 0.0 && g.ventricle_radius_fraction < 1.0)) {
      throw std::invalid_argument("PhantomSpec: ventricle_radius_fraction must lie in (0, 1)");
    }
    if (!(g.cortical_band_thickness > 0.0 && g.cortical_band_thickness < 1.0 - g.ventricle_radius_fraction)) {
      throw std::invalid_argument("PhantomSpec: cortical_band_thickness must leave room for white matter");
    }
    if (c > 0 && !(g.ventricle_radius_fraction > class_geometry[c - 1].ventricle_radius_fraction)) {
      throw std::invalid_argument("PhantomSpec: ventricle radius fractions must increase CN < MCI < AD");
    }
  }
  if (t1_noise_sigma < 0.0 || fa_noise_sigma < 0.0 || anatomy_jitter < 0.0) {
    throw std::invalid_argument("PhantomSpec: noise sigmas must be >= 0");
  }
  if (scans_per_subject < 1) throw std::invalid_argument("PhantomSpec: scans_per_subject must be >= 1");
}

SubjectGeometry draw_geometry(const PhantomSpec& spec, Diagnosis dx, std::uint64_t subject_seed) {
  Rng rng(subject_seed);
  auto normal = [](Rng& r) { return standard_normal(r); };
  const auto& cls = spec.class_geometry[static_cast<int>(dx)];
  SubjectGeometry g;
  g.diagnosis = dx;
  const double scale = std::clamp(1.0 + 0.5 * spec.anatomy_jitter * normal(rng), 0.85, 1.1);
  g.semi_axes = {0.78 * scale, 0.84 * scale, 0.72 * scale};
  g.ventricle_fraction =
      std::clamp(cls.ventricle_radius_fraction + spec.anatomy_jitter * normal(rng), 0.05, 0.7);
  g.cortical_thickness =
      std::clamp(cls.cortical_band_thickness + 0.25 * spec.anatomy_jitter * normal(rng), 0.04, 0.25);
  return g;
}

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct TissueWeights {
  double background, csf, gm, wm;
};

// Soft tissue memberships at normalized ellipsoidal radius r.
TissueWeights tissue_at(const SubjectGeometry& g, double r, double edge) {
  const double brain = sigmoid((1.0 - r) / edge);
  const double vent = sigmoid((g.ventricle_fraction - r) / edge);
  const double cortex = sigmoid((r - (1.0 - g.cortical_thickness)) / edge);
  TissueWeights w;
  w.background = 1.0 - brain;
  w.csf = brain * vent;
  w.gm = brain * cortex * (1.0 - vent);
  w.wm = brain * (1.0 - cortex) * (1.0 - vent);
  return w;
}

constexpr EigenTriple kWhiteMatter{1.7, 0.35, 0.35};
constexpr EigenTriple kGrayMatter{1.0, 0.75, 0.75};
constexpr EigenTriple kCsf{2.0, 2.0, 2.0};
constexpr EigenTriple kBackground{0.4, 0.4, 0.4};

}  // namespace

PhantomScan generate_subject(const PhantomSpec& spec, Diagnosis dx, std::uint64_t subject_seed,
                             const std::string& subject_id, int scan_index) {
  spec.validate();
  const SubjectGeometry g = draw_geometry(spec, dx, subject_seed);
  Rng noise_rng(derive_seed(subject_seed, static_cast<std::uint64_t>(scan_index) + 1));
  auto normal = [](Rng& r) { return standard_normal(r); };

  const Dims d = spec.dims;
  const double edge = 1.0 / std::min({d.nx, d.ny, d.nz});
  std::vector<float> t1(d.count());
  TensorField field{d, spec.spacing, std::vector<EigenTriple>(d.count())};

  // Noise is drawn in storage order so results do not depend on threading.
  for (int x = 0; x < d.nx; ++x) {
    const double u = ((x + 0.5) / d.nx) * 2.0 - 1.0;
    for (int y = 0; y < d.ny; ++y) {
      const double v = ((y + 0.5) / d.ny) * 2.0 - 1.0;
      for (int z = 0; z < d.nz; ++z) {
        const double w = ((z + 0.5) / d.nz) * 2.0 - 1.0;
        const double r = std::sqrt((u / g.semi_axes[0]) * (u / g.semi_axes[0]) +
                                   (v / g.semi_axes[1]) * (v / g.semi_axes[1]) +
                                   (w / g.semi_axes[2]) * (w / g.semi_axes[2]));
        const TissueWeights tw = tissue_at(g, r, edge);
        const std::size_t i = (static_cast<std::size_t>(x) * d.ny + y) * d.nz + z;

        t1[i] = static_cast<float>(0.25 * tw.csf + 0.55 * tw.gm + 0.85 * tw.wm +
                                   spec.t1_noise_sigma * normal(noise_rng));

        auto mix = [&](double EigenTriple::*m) {
          const double mean = tw.wm * (kWhiteMatter.*m) + tw.gm * (kGrayMatter.*m) + tw.csf * (kCsf.*m) +
                              tw.background * (kBackground.*m);
          return std::max(0.0, mean + spec.fa_noise_sigma * normal(noise_rng));
        };
        EigenTriple& e = field.triples[i];
        e.lambda1 = mix(&EigenTriple::lambda1);
        e.lambda2 = mix(&EigenTriple::lambda2);
        e.lambda3 = mix(&EigenTriple::lambda3);
      }
    }
  }

  PhantomScan scan;
  scan.t1 = minmax_normalize(Volume3D(d, spec.spacing, std::move(t1), RangeTag::raw));
  scan.fa = fa_map(field);
  scan.geometry = g;
  scan.record.subject_id = subject_id;
  scan.record.scan_id = subject_id + "_s" + std::to_string(scan_index);
  scan.record.diagnosis = dx;
  scan.record.has_t1 = true;
  scan.record.has_dwi = true;
  return scan;
}

int DatasetCounts::split_total(Split s) const {
  const auto& row = n[static_cast<int>(s)];
  return row[0] + row[1] + row[2];
}

std::array<int, 3> paired_allocation(const std::array<int, 3>& class_counts, double paired_fraction) {
  if (!(paired_fraction >= 0.0 && paired_fraction <= 1.0)) {
    throw std::invalid_argument("paired_fraction must lie in [0, 1]");
  }
  const int total = class_counts[0] + class_counts[1] + class_counts[2];
  // The epsilon absorbs products like 0.4 * 115 = 46.000000000000007.
  const int target = std::min(total, static_cast<int>(std::ceil(paired_fraction * total - 1e-9)));
  std::array<int, 3> alloc{};
  std::array<double, 3> remainder{};
  int assigned = 0;
  for (int c = 0; c < 3; ++c) {
    const double exact = paired_fraction * class_counts[c];
    alloc[c] = std::min(class_counts[c], static_cast<int>(std::floor(exact + 1e-9)));
    remainder[c] = exact - alloc[c];
    assigned += alloc[c];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return remainder[a] > remainder[b]; });
  for (int k = 0; assigned < target; k = (k + 1) % 3) {
    const int c = order[k];
    if (alloc[c] < class_counts[c]) {
      ++alloc[c];
      ++assigned;
    }
  }
  return alloc;
}

DatasetManifest generate_dataset(const PhantomSpec& spec, const DatasetOptions& options,
                                 const std::filesystem::path& out_dir) {
  spec.validate();
  struct Job {
    Split split;
    Diagnosis dx;
    int index_in_cell;
    bool paired;
  };
  std::vector<Job> jobs;
  for (Split s : kAllSplits) {
    const double f = options.paired_fraction_by_split[static_cast<int>(s)].value_or(options.paired_fraction);
    std::array<int, 3> class_counts{};
    for (Diagnosis dx : kAllDiagnoses) {
      const int n = options.counts.at(s, dx);
      if (n < 0) throw std::invalid_argument("dataset counts must be >= 0");
      class_counts[static_cast<int>(dx)] = n;
    }
    const auto alloc = paired_allocation(class_counts, f);
    for (Diagnosis dx : kAllDiagnoses) {
      const int c = static_cast<int>(dx);
      for (int i = 0; i < class_counts[c]; ++i) jobs.push_back({s, dx, i, i < alloc[c]});
    }
  }

  const auto volumes_dir = out_dir / "volumes";
  std::filesystem::create_directories(volumes_dir);

  const int scans = spec.scans_per_subject;
  std::vector<ScanRecord> records(jobs.size() * scans);
  std::exception_ptr failure;
  const auto njobs = static_cast<std::int64_t>(jobs.size());

#pragma omp parallel for schedule(dynamic)
  for (std::int64_t j = 0; j < njobs; ++j) {
    try {
      const Job& job = jobs[j];
      const int cell = static_cast<int>(job.split) * 3 + static_cast<int>(job.dx);
      const std::uint64_t subject_seed =
          derive_seed(derive_seed(spec.seed, static_cast<std::uint64_t>(cell)),
                      static_cast<std::uint64_t>(job.index_in_cell));
      const std::string subject_id =
          "sub-" + to_string(job.split) + "-" + to_string(job.dx) + "-" + std::to_string(job.index_in_cell);
      for (int k = 0; k < scans; ++k) {
        PhantomScan scan = generate_subject(spec, job.dx, subject_seed, subject_id, k);
        ScanRecord rec = scan.record;
        rec.split = job.split;
        rec.provenance = Provenance::real;
        rec.t1_path = "volumes/" + rec.scan_id + "_t1.vol";
        write_volume(scan.t1, out_dir / *rec.t1_path);
        rec.has_dwi = job.paired;
        if (job.paired) {
          rec.dwi_path = "volumes/" + rec.scan_id + "_fa.vol";
          write_volume(scan.fa, out_dir / *rec.dwi_path);
        }
        records[static_cast<std::size_t>(j) * scans + k] = std::move(rec);
      }
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  DatasetManifest manifest{std::move(records), kManifestSchemaVersion};
  save_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

void to_json(nlohmann::json& j, const PhantomSpec& s) {
  nlohmann::json geometry;
  for (Diagnosis dx : kAllDiagnoses) {
    const auto& g = s.class_geometry[static_cast<int>(dx)];
    geometry[to_string(dx)] = {{"ventricle_radius_fraction", g.ventricle_radius_fraction},
                               {"cortical_band_thickness", g.cortical_band_thickness}};
  }
  j = nlohmann::json{
      {"dims", {s.dims.nx, s.dims.ny, s.dims.nz}},
      {"spacing_mm", {s.spacing.sx, s.spacing.sy, s.spacing.sz}},
      {"class_geometry", geometry},
      {"t1_noise_sigma", s.t1_noise_sigma},
      {"fa_noise_sigma", s.fa_noise_sigma},
      {"anatomy_jitter", s.anatomy_jitter},
      {"scans_per_subject", s.scans_per_subject},
      {"seed", s.seed},
  };
}

void from_json(const nlohmann::json& j, PhantomSpec& s) {
  s = PhantomSpec{};
  if (j.contains("dims")) {
    const auto& d = j.at("dims");
    s.dims = {d.at(0).get<int>(), d.at(1).get<int>(), d.at(2).get<int>()};
  }
  if (j.contains("spacing_mm")) {
    const auto& d = j.at("spacing_mm");
    s.spacing = {d.at(0).get<double>(), d.at(1).get<double>(), d.at(2).get<double>()};
  }
  if (j.contains("class_geometry")) {
    for (Diagnosis dx : kAllDiagnoses) {
      const auto& g = j.at("class_geometry").at(to_string(dx));
      s.class_geometry[static_cast<int>(dx)] = {g.at("ventricle_radius_fraction").get<double>(),
                                                g.at("cortical_band_thickness").get<double>()};
    }
  }
  s.t1_noise_sigma = j.value("t1_noise_sigma", s.t1_noise_sigma);
  s.fa_noise_sigma = j.value("fa_noise_sigma", s.fa_noise_sigma);
  s.anatomy_jitter = j.value("anatomy_jitter", s.anatomy_jitter);
  s.scans_per_subject = j.value("scans_per_subject", s.scans_per_subject);
  s.seed = j.value("seed", s.seed);
}

void to_json(nlohmann::json& j, const DatasetOptions& o) {
  nlohmann::json counts;
  nlohmann::json overrides = nlohmann::json::object();
  for (Split s : kAllSplits) {
    for (Diagnosis dx : kAllDiagnoses) counts[to_string(s)][to_string(dx)] = o.counts.at(s, dx);
    if (const auto& f = o.paired_fraction_by_split[static_cast<int>(s)]) overrides[to_string(s)] = *f;
  }
  j = nlohmann::json{{"counts", counts}, {"paired_fraction", o.paired_fraction}};
  if (!overrides.empty()) j["paired_fraction_by_split"] = overrides;
}

void from_json(const nlohmann::json& j, DatasetOptions& o) {
  o = DatasetOptions{};
  for (Split s : kAllSplits) {
    if (!j.at("counts").contains(to_string(s))) continue;
    const auto& row = j.at("counts").at(to_string(s));
    for (Diagnosis dx : kAllDiagnoses) o.counts.at(s, dx) = row.value(to_string(dx), 0);
  }
  o.paired_fraction = j.value("paired_fraction", 1.0);
  if (j.contains("paired_fraction_by_split")) {
    for (Split s : kAllSplits) {
      const auto& ov = j.at("paired_fraction_by_split");
      if (ov.contains(to_string(s))) o.paired_fraction_by_split[static_cast<int>(s)] = ov.at(to_string(s)).get<double>();
    }
  }
}

}  // namespace dwimpute
