#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dipss/phantom.hpp"
#include "dipss/preprocess.hpp"
#include "dipss/rng.hpp"

using namespace dipss;

TEST_CASE("volume already at the target mean is returned unchanged") {
  Volume v(4, 4, 4);
  for (auto& x : v.voxels) x = 18.0f;
  const auto [out, gamma] = normalize_intensity(v);
  CHECK(gamma == 1.0);
  CHECK(out.voxels == v.voxels);
}

TEST_CASE("all-zero volume raises DegenerateInput") {
  Volume v(4, 4, 4);
  CHECK_THROWS_AS(normalize_intensity(v), DegenerateInput);
}

TEST_CASE("uniform 127.5 volume needs the closed-form gamma") {
  Volume v(6, 6, 6);
  for (auto& x : v.voxels) x = 127.5f;
  const auto [out, gamma] = normalize_intensity(v);
  // 255 (0.5)^g = 18  =>  g = log(18/255)/log(0.5)
  const double expected = std::log(18.0 / 255.0) / std::log(0.5);
  CHECK(gamma == Catch::Approx(expected).epsilon(0.02));
  const double mean = out.region_mean();
  CHECK(mean >= 17.0);
  CHECK(mean <= 19.0);
}

TEST_CASE("normalization lands in band and is idempotent on phantoms") {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    const auto [raw, rec] = generate_phantom(100 + static_cast<std::uint64_t>(trial), 0.8,
                                             trial % 2 ? DiseaseProfile::at_severity(1.0)
                                                       : DiseaseProfile::healthy());
    const Volume scanned = apply_scanner(raw, ScannerProfile::synth_a(), 7 + static_cast<std::uint64_t>(trial));
    const auto [normed, gamma] = normalize_intensity(scanned);
    const double mean = normed.region_mean();
    CHECK(mean >= 17.0);
    CHECK(mean <= 19.0);
    const auto [again, gamma2] = normalize_intensity(normed);
    CHECK(std::abs(gamma2 - 1.0) < 1e-3);
  }
}

TEST_CASE("gamma mapping preserves intensity ordering") {
  const auto [raw, rec] = generate_phantom(77, 0.5, DiseaseProfile::healthy(), {16, 16, 16});
  const auto [normed, gamma] = normalize_intensity(raw);
  REQUIRE(gamma != 1.0);
  for (std::size_t i = 1; i < raw.size(); ++i)
    if (raw.voxels[i - 1] < raw.voxels[i]) CHECK(normed.voxels[i - 1] <= normed.voxels[i]);
}

TEST_CASE("unreachable target raises NoConvergence") {
  Volume v(4, 4, 4);
  for (auto& x : v.voxels) x = 255.0f;  // gamma cannot move saturated voxels
  CHECK_THROWS_AS(normalize_intensity(v), NoConvergence);
}

TEST_CASE("downsample_half averages 2x2x2 blocks") {
  Volume v(2, 2, 2);
  for (std::size_t i = 0; i < 4; ++i) v.voxels[i] = 0.0f;
  for (std::size_t i = 4; i < 8; ++i) v.voxels[i] = 255.0f;
  const Volume out = downsample_half(v);
  REQUIRE(out.dims == std::array<int, 3>{1, 1, 1});
  CHECK(out.voxels[0] == 127.5f);
}

TEST_CASE("downsample_half keeps constants and halves dims") {
  Volume v(8, 6, 4);
  for (auto& x : v.voxels) x = 42.0f;
  const Volume out = downsample_half(v);
  REQUIRE(out.dims == std::array<int, 3>{4, 3, 2});
  for (const float x : out.voxels) CHECK(x == 42.0f);
}

TEST_CASE("downsample_half rejects odd dims") {
  Volume v(5, 4, 4);
  CHECK_THROWS_AS(downsample_half(v), OddDimension);
}

TEST_CASE("downsampling commutes with power-of-two intensity scaling") {
  Rng rng(3);
  Volume v(6, 4, 8);
  for (auto& x : v.voxels) x = static_cast<float>(rng.uniform(0.0, 100.0));
  Volume scaled = v;
  for (auto& x : scaled.voxels) x *= 2.0f;
  Volume down_scaled = downsample_half(scaled);
  Volume down = downsample_half(v);
  for (auto& x : down.voxels) x *= 2.0f;
  CHECK(down_scaled.voxels == down.voxels);
}

TEST_CASE("mask downsampling votes by majority with ties kept") {
  Volume v(2, 2, 2);
  v.mask.assign(8, 0);
  for (auto& x : v.voxels) x = 10.0f;
  for (std::size_t i = 0; i < 4; ++i) v.mask[i] = 1;  // exactly half: tie -> true
  Volume out = downsample_half(v);
  REQUIRE(out.has_mask());
  CHECK(out.mask[0] == 1);
  for (std::size_t i = 0; i < 3; ++i) v.mask[i + 4] = 0;
  v.mask[0] = v.mask[1] = v.mask[2] = 0;  // only one vote left
  out = downsample_half(v);
  CHECK(out.mask[0] == 0);
}
