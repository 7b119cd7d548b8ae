#include <cmath>
#include <map>

#include "doctest.h"
#include "dwimpute/phantom.hpp"
#include "support.hpp"

using namespace dwimpute;
using support::TempDir;

namespace {

PhantomSpec small_spec(int n = 16) {
  PhantomSpec s;
  s.dims = {n, n, n};
  s.seed = 17;
  return s;
}

// Voxels inside the inner part of the head whose normalized T1 sits at the
// CSF level; the outer rim is excluded so the brain edge blur is not counted.
int ventricle_voxels(const Volume3D& t1) {
  const Dims d = t1.dims();
  int n = 0;
  for (int x = 0; x < d.nx; ++x)
    for (int y = 0; y < d.ny; ++y)
      for (int z = 0; z < d.nz; ++z) {
        const double u = (x + 0.5) / d.nx * 2 - 1, v = (y + 0.5) / d.ny * 2 - 1, w = (z + 0.5) / d.nz * 2 - 1;
        if (u * u + v * v + w * w > 0.36) continue;
        const float t = t1.at(x, y, z);
        if (t > 0.15f && t < 0.42f) ++n;
      }
  return n;
}

}  // namespace

TEST_CASE("FA closed-form examples") {
  CHECK(fractional_anisotropy({1, 1, 1}) == 0.0);
  CHECK(fractional_anisotropy({1, 0, 0}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(fractional_anisotropy({2, 1, 1}) == doctest::Approx(1.0 / std::sqrt(6.0)).epsilon(1e-14));
  CHECK(fractional_anisotropy({0, 0, 0}) == 0.0);
}

TEST_CASE("FA matches the direct formula and its invariances on random triples") {
  Rng rng(99);
  for (int i = 0; i < 2000; ++i) {
    const double a = support::uniform(rng, 0, 3), b = support::uniform(rng, 0, 3), c = support::uniform(rng, 0, 3);
    const double fa = fractional_anisotropy({a, b, c});
    CHECK(std::abs(fa - support::fa_direct(a, b, c)) <= 1e-12);
    CHECK(fa >= 0.0);
    CHECK(fa <= 1.0);
    CHECK(fractional_anisotropy({b, c, a}) == fa);
    CHECK(fractional_anisotropy({c, b, a}) == fa);
    const double k = std::exp(support::uniform(rng, -5, 5));
    CHECK(std::abs(fractional_anisotropy({k * a, k * b, k * c}) - fa) <= 1e-12);
  }
}

TEST_CASE("fa_map evaluates voxelwise") {
  TensorField f{{1, 1, 2}, {}, {{1, 1, 1}, {2, 1, 1}}};
  const auto v = fa_map(f);
  CHECK(v.voxels()[0] == 0.0f);
  CHECK(v.voxels()[1] == doctest::Approx(0.408248).epsilon(1e-6));
  CHECK(v.range_tag() == RangeTag::unit);

  TensorField iso{{2, 2, 2}, {}, std::vector<EigenTriple>(8, {1, 1, 1})};
  const auto iso_fa = fa_map(iso);
  for (float x : iso_fa.voxels()) CHECK(x == 0.0f);
  TensorField stick{{2, 2, 2}, {}, std::vector<EigenTriple>(8, {1, 0, 0})};
  const auto stick_fa = fa_map(stick);
  for (float x : stick_fa.voxels()) CHECK(x == doctest::Approx(1.0f));
}

TEST_CASE("generate_subject is a pure function of its inputs") {
  const auto spec = small_spec();
  const auto a = generate_subject(spec, Diagnosis::MCI, 1234, "s");
  const auto b = generate_subject(spec, Diagnosis::MCI, 1234, "s");
  CHECK(a.t1 == b.t1);
  CHECK(a.fa == b.fa);
  CHECK(a.record == b.record);
  const auto c = generate_subject(spec, Diagnosis::MCI, 1235, "s");
  CHECK_FALSE(a.t1 == c.t1);
}

TEST_CASE("generated volumes are unit-tagged and in [0, 1]") {
  const auto s = generate_subject(small_spec(), Diagnosis::AD, 5, "s");
  for (const auto* v : {&s.t1, &s.fa}) {
    CHECK(v->range_tag() == RangeTag::unit);
    for (float x : v->voxels()) {
      CHECK(x >= 0.0f);
      CHECK(x <= 1.0f);
    }
  }
}

TEST_CASE("AD ventricles are larger than CN ventricles at equal seed") {
  const auto spec = small_spec(24);
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    const auto cn = generate_subject(spec, Diagnosis::CN, seed, "cn");
    const auto ad = generate_subject(spec, Diagnosis::AD, seed, "ad");
    CHECK(ventricle_voxels(ad.t1) > ventricle_voxels(cn.t1));
  }
}

TEST_CASE("mean ventricle size is ordered CN < MCI < AD over 20 subjects per class") {
  const auto spec = small_spec(24);
  std::array<double, 3> mean_count{}, mean_fraction{};
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 20; ++i) {
      const std::uint64_t seed = derive_seed(777, static_cast<std::uint64_t>(c * 100 + i));
      const auto s = generate_subject(spec, kAllDiagnoses[c], seed, "x");
      mean_count[c] += ventricle_voxels(s.t1) / 20.0;
      mean_fraction[c] += s.geometry.ventricle_fraction / 20.0;
    }
  }
  CHECK(mean_count[0] < mean_count[1]);
  CHECK(mean_count[1] < mean_count[2]);
  CHECK(mean_fraction[0] < mean_fraction[1]);
  CHECK(mean_fraction[1] < mean_fraction[2]);
}

TEST_CASE("repeated scans share geometry and differ in noise") {
  const auto spec = small_spec();
  const auto a = generate_subject(spec, Diagnosis::CN, 8, "s", 0);
  const auto b = generate_subject(spec, Diagnosis::CN, 8, "s", 1);
  CHECK(a.geometry.ventricle_fraction == b.geometry.ventricle_fraction);
  CHECK(a.geometry.semi_axes == b.geometry.semi_axes);
  CHECK_FALSE(a.t1 == b.t1);
  CHECK(a.record.scan_id != b.record.scan_id);
}

TEST_CASE("PhantomSpec validation") {
  auto s = small_spec();
  s.class_geometry[2].ventricle_radius_fraction = 0.1;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = small_spec();
  s.dims = {0, 4, 4};
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = small_spec();
  s.t1_noise_sigma = -1;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("paired allocation rounding") {
  CHECK(paired_allocation({4, 4, 4}, 0.5) == std::array<int, 3>{2, 2, 2});
  CHECK(paired_allocation({4, 4, 4}, 1.0) == std::array<int, 3>{4, 4, 4});
  CHECK(paired_allocation({4, 4, 4}, 0.0) == std::array<int, 3>{0, 0, 0});
  // ceil(0.4 * 115) = 46 distributed by largest remainder: 20, 16, 10.
  const auto a = paired_allocation({50, 40, 25}, 0.4);
  CHECK(a[0] + a[1] + a[2] == 46);
  CHECK(a == std::array<int, 3>{20, 16, 10});
  Rng rng(4);
  for (int t = 0; t < 500; ++t) {
    std::array<int, 3> n{support::uniform_int(rng, 0, 30), support::uniform_int(rng, 0, 30), support::uniform_int(rng, 0, 30)};
    const double f = support::uniform(rng, 0, 1);
    const auto p = paired_allocation(n, f);
    const int total = n[0] + n[1] + n[2];
    CHECK(p[0] + p[1] + p[2] == static_cast<int>(std::ceil(f * total - 1e-9)));
    for (int c = 0; c < 3; ++c) {
      CHECK(p[c] >= 0);
      CHECK(p[c] <= n[c]);
    }
  }
}

TEST_CASE("generate_dataset counts, validity and determinism") {
  TempDir a("ds_a"), b("ds_b");
  DatasetOptions opts;
  for (Diagnosis d : kAllDiagnoses) {
    opts.counts.at(Split::train, d) = 4;
    opts.counts.at(Split::val, d) = 1;
    opts.counts.at(Split::test, d) = 1;
  }
  opts.paired_fraction = 0.5;
  opts.paired_fraction_by_split[static_cast<int>(Split::test)] = 1.0;
  const auto spec = small_spec(8);
  const auto m = generate_dataset(spec, opts, a.path());
  const auto m2 = generate_dataset(spec, opts, b.path());
  CHECK(validate_manifest(m).empty());
  CHECK(m == m2);

  std::map<Split, int> paired, t1_only;
  for (const auto& r : m.records) (r.has_dwi ? paired : t1_only)[r.split]++;
  CHECK(paired[Split::train] == 6);
  CHECK(t1_only[Split::train] == 6);
  CHECK(paired[Split::test] == 3);
  CHECK(t1_only[Split::test] == 0);

  for (const auto& r : m.records) {
    for (const auto& p : {r.t1_path, r.dwi_path}) {
      if (!p) continue;
      CHECK(support::read_file(a / *p) == support::read_file(b / *p));
      CHECK(std::filesystem::exists(a / *p));
    }
  }
  CHECK(support::read_file(a / "manifest.json") == support::read_file(b / "manifest.json"));
}

TEST_CASE("fully paired dataset has no T1-only records") {
  TempDir a("ds_full");
  DatasetOptions opts;
  for (Diagnosis d : kAllDiagnoses) opts.counts.at(Split::train, d) = 4;
  const auto m = generate_dataset(small_spec(8), opts, a.path());
  CHECK(m.records.size() == 12);
  for (const auto& r : m.records) CHECK(r.has_dwi);
}

TEST_CASE("adding subjects does not perturb existing ones") {
  TempDir a("ds_small"), b("ds_big");
  DatasetOptions small, big;
  for (Diagnosis d : kAllDiagnoses) {
    small.counts.at(Split::train, d) = 2;
    big.counts.at(Split::train, d) = 3;
  }
  const auto spec = small_spec(8);
  const auto ms = generate_dataset(spec, small, a.path());
  generate_dataset(spec, big, b.path());
  for (const auto& r : ms.records) CHECK(support::read_file(a / *r.t1_path) == support::read_file(b / *r.t1_path));
}

TEST_CASE("PhantomSpec and DatasetOptions JSON round trip") {
  auto s = small_spec();
  s.scans_per_subject = 2;
  nlohmann::json j = s;
  CHECK(j.get<PhantomSpec>().dims == s.dims);
  CHECK(j.get<PhantomSpec>().scans_per_subject == 2);
  DatasetOptions o;
  o.counts.at(Split::val, Diagnosis::AD) = 3;
  o.paired_fraction = 0.25;
  o.paired_fraction_by_split[1] = 1.0;
  nlohmann::json jo = o;
  const auto back = jo.get<DatasetOptions>();
  CHECK(back.counts.at(Split::val, Diagnosis::AD) == 3);
  CHECK(back.paired_fraction == 0.25);
  CHECK(back.paired_fraction_by_split[1] == 1.0);
}
