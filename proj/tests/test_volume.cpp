#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dipss/rng.hpp"
#include "dipss/volume.hpp"
#include "dipss/volume_io.hpp"

using namespace dipss;

namespace {

Volume random_volume(Rng& rng, int nx, int ny, int nz, bool with_mask = false) {
  Volume v(nx, ny, nz);
  for (auto& x : v.voxels) x = static_cast<float>(rng.uniform(0.0, 255.0));
  if (with_mask) {
    v.mask.assign(v.size(), 0);
    for (auto& m : v.mask) m = rng.uniform() < 0.5 ? 1 : 0;
  }
  return v;
}

std::filesystem::path temp_dir(const char* tag) {
  auto dir = std::filesystem::temp_directory_path() / (std::string("dipss_test_") + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("extract_slices produces one slice per coronal index") {
  Volume v(5, 4, 7);
  for (std::size_t i = 0; i < v.size(); ++i) v.voxels[i] = static_cast<float>(i);
  const auto stack = extract_slices(v, Axis::coronal);
  REQUIRE(stack.slices.size() == 7);
  CHECK(stack.slices[0].rows == 5);
  CHECK(stack.slices[0].cols == 4);
  for (int pos = 0; pos < 7; ++pos) CHECK(stack.positions[static_cast<std::size_t>(pos)] == pos);
}

TEST_CASE("2x2x2 volume slices match voxel values on every axis") {
  Volume v(2, 2, 2);
  for (std::size_t i = 0; i < 8; ++i) v.voxels[i] = static_cast<float>(10 * i);
  for (const Axis axis : {Axis::sagittal, Axis::axial, Axis::coronal}) {
    const auto stack = extract_slices(v, axis);
    REQUIRE(stack.slices.size() == 2);
    for (int pos = 0; pos < 2; ++pos)
      for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) {
          const auto idx = detail::unslice_index(axis, r, c, pos);
          CHECK(stack.slices[static_cast<std::size_t>(pos)].at(r, c) ==
                v.at(idx[0], idx[1], idx[2]));
        }
  }
}

TEST_CASE("extract/reassemble round-trips bit-exactly on random volumes") {
  Rng rng(7);
  for (const Axis axis : {Axis::sagittal, Axis::axial, Axis::coronal}) {
    for (int trial = 0; trial < 5; ++trial) {
      const Volume v = random_volume(rng, 6, 5, 9);
      const Volume round = reassemble(extract_slices(v, axis));
      REQUIRE(round.dims == v.dims);
      CHECK(round.voxels == v.voxels);
    }
  }
}

TEST_CASE("reassemble canonicalizes slice order by position") {
  Rng rng(11);
  const Volume v = random_volume(rng, 4, 4, 6);
  auto stack = extract_slices(v, Axis::coronal);
  // Rotate both lists out of order; positions still identify each slice.
  std::rotate(stack.slices.begin(), stack.slices.begin() + 2, stack.slices.end());
  std::rotate(stack.positions.begin(), stack.positions.begin() + 2, stack.positions.end());
  const Volume round = reassemble(stack);
  CHECK(round.voxels == v.voxels);
}

TEST_CASE("reassemble rejects incomplete stacks") {
  Rng rng(13);
  const Volume v = random_volume(rng, 4, 4, 6);
  auto stack = extract_slices(v, Axis::coronal);
  stack.slices.erase(stack.slices.begin() + 3);
  stack.positions.erase(stack.positions.begin() + 3);
  CHECK_THROWS_AS(reassemble(stack), MissingSlices);
}

TEST_CASE("raw ingest round-trips a constructed 4x4x4 file") {
  const auto dir = temp_dir("raw_roundtrip");
  Volume v(4, 4, 4);
  for (std::size_t i = 0; i < 64; ++i) v.voxels[i] = static_cast<float>(i);
  CaseRecord rec;
  rec.case_id = "case0";
  rec.subject_id = "subj0";
  rec.dataset = Dataset::SYNTH;
  rec.label = Label::SYNTH_HEALTHY;
  write_volume(v, rec, (dir / "case0").string());

  const auto [loaded, loaded_rec] = ingest_volume((dir / "case0.vol").string(),
                                                  VolumeFormat::raw_sidecar);
  CHECK(loaded.at(0, 0, 0) == 0.0f);
  CHECK(loaded.at(3, 3, 3) == 63.0f);
  CHECK(loaded_rec.case_id == "case0");
  CHECK(loaded_rec.label == Label::SYNTH_HEALTHY);
}

TEST_CASE("raw ingest rejects payload/dims mismatch") {
  const auto dir = temp_dir("raw_badsize");
  {
    std::ofstream side(dir / "bad.json");
    side << R"({"dims":[4,4,4],"case_id":"bad"})";
    std::ofstream vol(dir / "bad.vol", std::ios::binary);
    std::vector<float> data(60, 1.0f);
    vol.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * 4));
  }
  CHECK_THROWS_AS(ingest_volume((dir / "bad.vol").string(), VolumeFormat::raw_sidecar),
                  DimensionMismatch);
}

TEST_CASE("write/ingest round-trip is bitwise over random volumes with masks") {
  const auto dir = temp_dir("raw_random");
  Rng rng(23);
  for (int trial = 0; trial < 4; ++trial) {
    const Volume v = random_volume(rng, 5, 6, 4, /*with_mask=*/true);
    CaseRecord rec;
    rec.case_id = "rt" + std::to_string(trial);
    rec.subject_id = rec.case_id;
    write_volume(v, rec, (dir / rec.case_id).string());
    const auto [loaded, _] = ingest_volume((dir / (rec.case_id + ".vol")).string(),
                                           VolumeFormat::raw_sidecar);
    CHECK(loaded.voxels == v.voxels);
    CHECK(loaded.mask == v.mask);
  }
}

TEST_CASE("missing files raise UnreadableFile") {
  CHECK_THROWS_AS(ingest_volume("/nonexistent/case.vol", VolumeFormat::raw_sidecar),
                  UnreadableFile);
}

TEST_CASE("manifest round-trip and duplicate rejection") {
  const auto dir = temp_dir("manifest");
  std::vector<CaseRecord> records;
  for (int i = 0; i < 4; ++i) {
    CaseRecord r;
    r.case_id = "case" + std::to_string(i);
    r.subject_id = "subj" + std::to_string(i / 2);
    r.dataset = i % 2 ? Dataset::PPMI : Dataset::ADNI;
    r.vendor = i % 2 ? Vendor::UNKNOWN : Vendor::SI;
    r.label = i % 2 ? Label::PD : Label::CN;
    r.fold = i;
    records.push_back(r);
  }
  const auto path = (dir / "manifest.csv").string();
  write_manifest(path, records);
  const auto loaded = read_manifest(path);
  REQUIRE(loaded.size() == 4);
  CHECK(loaded[1].dataset == Dataset::PPMI);
  CHECK(loaded[1].vendor == Vendor::UNKNOWN);
  CHECK(loaded[2].fold == 2);

  records.push_back(records.front());
  CHECK_THROWS_AS(write_manifest(path, records), DuplicateCaseId);
}

TEST_CASE("PPMI records reject vendor info") {
  CaseRecord r;
  r.case_id = "x";
  r.dataset = Dataset::PPMI;
  r.vendor = Vendor::GE;
  CHECK_THROWS_AS(r.validate(), DataError);
}

TEST_CASE("category naming follows the label/vendor scheme") {
  CaseRecord adni{"a", "a", Dataset::ADNI, Vendor::SI, Label::CN, 0};
  CaseRecord ppmi{"b", "b", Dataset::PPMI, Vendor::UNKNOWN, Label::PD, 0};
  CHECK(category_of(adni) == "CN_SI");
  CHECK(category_of(ppmi) == "PD");
}

TEST_CASE("nifti1 ingestion reads a gzip-compressed single file") {
  const auto dir = temp_dir("nifti");
  // Hand-build a minimal 3x2x2 float32 NIfTI-1 file.
  std::vector<std::uint8_t> hdr(352, 0);
  auto put32 = [&](std::size_t off, std::int32_t v) { std::memcpy(hdr.data() + off, &v, 4); };
  auto put16 = [&](std::size_t off, std::int16_t v) { std::memcpy(hdr.data() + off, &v, 2); };
  auto putf = [&](std::size_t off, float v) { std::memcpy(hdr.data() + off, &v, 4); };
  put32(0, 348);
  put16(40, 3);
  put16(42, 3);
  put16(44, 2);
  put16(46, 2);
  put16(70, 16);  // float32
  put16(72, 32);
  putf(108, 352.0f);
  hdr[344] = 'n';
  hdr[345] = '+';
  hdr[346] = '1';
  std::vector<float> data(12);
  for (std::size_t i = 0; i < 12; ++i) data[i] = static_cast<float>(i);

  const auto path = (dir / "vol.nii.gz").string();
  gzFile f = gzopen(path.c_str(), "wb");
  REQUIRE(f != nullptr);
  gzwrite(f, hdr.data(), static_cast<unsigned>(hdr.size()));
  gzwrite(f, data.data(), static_cast<unsigned>(data.size() * 4));
  gzclose(f);

  const auto [v, rec] = ingest_volume(path, VolumeFormat::nifti1);
  REQUIRE(v.dims == std::array<int, 3>{3, 2, 2});
  // NIfTI stores the first axis fastest: element (i,j,k) sits at i + 3j + 6k.
  CHECK(v.at(0, 0, 0) == 0.0f);
  CHECK(v.at(1, 0, 0) == 1.0f);
  CHECK(v.at(0, 1, 0) == 3.0f);
  CHECK(v.at(0, 0, 1) == 6.0f);
  CHECK(rec.case_id == "vol");
}
