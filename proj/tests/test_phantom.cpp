#include <catch2/catch_amalgamated.hpp>

#include "dipss/phantom.hpp"

using namespace dipss;

namespace {

long cavity_voxel_count(const Volume& v) {
  // CSF sits far below the gray/white plateau; threshold between them.
  long n = 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v.mask[i] && v.voxels[i] < 60.0f) ++n;
  return n;
}

}  // namespace

TEST_CASE("phantom generation is deterministic") {
  const auto a = generate_phantom(42, 0.4, DiseaseProfile::at_severity(0.5));
  const auto b = generate_phantom(42, 0.4, DiseaseProfile::at_severity(0.5));
  CHECK(a.first.voxels == b.first.voxels);
  CHECK(a.first.mask == b.first.mask);
}

TEST_CASE("subject variation zero collapses all seeds") {
  const auto a = generate_phantom(1, 0.0, DiseaseProfile::healthy());
  const auto b = generate_phantom(999, 0.0, DiseaseProfile::healthy());
  CHECK(a.first.voxels == b.first.voxels);
}

TEST_CASE("disease severity enlarges the cavity") {
  const auto healthy = generate_phantom(5, 0.3, DiseaseProfile::at_severity(0.0));
  const auto diseased = generate_phantom(5, 0.3, DiseaseProfile::at_severity(1.0));
  CHECK(cavity_voxel_count(diseased.first) > cavity_voxel_count(healthy.first));
  CHECK(healthy.second.label == Label::SYNTH_HEALTHY);
  CHECK(diseased.second.label == Label::SYNTH_DISEASED);
}

TEST_CASE("phantom intensities stay in range and the mask is the support") {
  const auto [v, rec] = generate_phantom(9, 1.0, DiseaseProfile::at_severity(1.0));
  REQUIRE(v.has_mask());
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(v.voxels[i] >= 0.0f);
    CHECK(v.voxels[i] <= 255.0f);
    CHECK((v.mask[i] != 0) == (v.voxels[i] != 0.0f));
  }
}

TEST_CASE("disease profile invariants are enforced") {
  DiseaseProfile bad{0.0, 1.5, 0.0};
  CHECK_THROWS_AS(bad.validate(), InvalidProfile);
  DiseaseProfile bad2{0.5, 0.9, 0.0};
  CHECK_THROWS_AS(bad2.validate(), InvalidProfile);
  CHECK_NOTHROW(DiseaseProfile::at_severity(0.7).validate());
}

TEST_CASE("identity scanner profile is the identity map") {
  const auto [v, rec] = generate_phantom(3, 0.5, DiseaseProfile::healthy());
  const Volume out = apply_scanner(v, ScannerProfile::identity(), 77);
  CHECK(out.voxels == v.voxels);
}

TEST_CASE("gamma 2 halves a mid-gray plateau to a quarter") {
  Volume v(4, 4, 4);
  v.mask.assign(v.size(), 0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    v.voxels[i] = 127.5f;
    v.mask[i] = 1;
  }
  ScannerProfile p{"g2", 2.0, 0.0, 0.0, 0.0};
  const Volume out = apply_scanner(v, p, 0);
  for (const float x : out.voxels) CHECK(x == Catch::Approx(63.75).margin(1e-5));
}

TEST_CASE("blur leaves a constant mask interior unchanged away from the boundary") {
  const int n = 16;
  Volume v(n, n, n);
  v.mask.assign(v.size(), 0);
  for (int i = 2; i < n - 2; ++i)
    for (int j = 2; j < n - 2; ++j)
      for (int k = 2; k < n - 2; ++k) {
        v.at(i, j, k) = 100.0f;
        v.mask[v.index(i, j, k)] = 1;
      }
  ScannerProfile p{"blur", 1.0, 0.8, 0.0, 0.0};
  const Volume out = apply_scanner(v, p, 0);
  // Masked renormalized blur preserves constants everywhere inside the mask.
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v.mask[i])
      CHECK(out.voxels[i] == Catch::Approx(100.0).margin(1e-4));
    else
      CHECK(out.voxels[i] == 0.0f);
  }
}

TEST_CASE("background voxels stay exactly zero without noise") {
  const auto [v, rec] = generate_phantom(8, 0.5, DiseaseProfile::healthy());
  ScannerProfile p{"nz", 0.85, 0.6, 0.10, 0.0};
  const Volume out = apply_scanner(v, p, 12);
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!v.mask[i]) CHECK(out.voxels[i] == 0.0f);
}

TEST_CASE("gamma map preserves intensity ordering") {
  const auto [v, rec] = generate_phantom(15, 0.6, DiseaseProfile::healthy(), {16, 16, 16});
  ScannerProfile p{"g", 0.7, 0.0, 0.0, 0.0};
  const Volume out = apply_scanner(v, p, 0);
  for (std::size_t i = 1; i < v.size(); ++i) {
    const auto a = v.voxels[i - 1], b = v.voxels[i];
    if (v.mask[i - 1] && v.mask[i] && a < b) CHECK(out.voxels[i - 1] <= out.voxels[i]);
  }
}

TEST_CASE("scanner render is deterministic per seed") {
  const auto [v, rec] = generate_phantom(21, 0.5, DiseaseProfile::healthy(), {16, 16, 24});
  const Volume a = apply_scanner(v, ScannerProfile::synth_a(), 5);
  const Volume b = apply_scanner(v, ScannerProfile::synth_a(), 5);
  const Volume c = apply_scanner(v, ScannerProfile::synth_a(), 6);
  CHECK(a.voxels == b.voxels);
  CHECK(a.voxels != c.voxels);
}

TEST_CASE("invalid scanner profiles are rejected") {
  ScannerProfile p{"bad", -1.0, 0.0, 0.0, 0.0};
  CHECK_THROWS_AS(p.validate(), InvalidProfile);
  ScannerProfile p2{"bad2", 1.0, 0.0, 2.0, 0.0};
  CHECK_THROWS_AS(p2.validate(), InvalidProfile);
}
