#pragma once

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dipss/common.hpp"
#include "dipss/volume.hpp"

namespace dipss {

enum class VolumeFormat { nifti1, raw_sidecar };

namespace detail {

inline void put_f32_le(std::vector<std::uint8_t>& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  out.push_back(static_cast<std::uint8_t>(bits & 0xff));
  out.push_back(static_cast<std::uint8_t>((bits >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>((bits >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((bits >> 24) & 0xff));
}

inline float get_f32_le(const std::uint8_t* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                             (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) |
                             (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

inline std::vector<std::uint8_t> read_binary_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UnreadableFile("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

/// Reads a whole file through zlib, which transparently handles both plain
/// and gzip-compressed content.
inline std::vector<std::uint8_t> read_maybe_gzipped(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw UnreadableFile("cannot open " + path);
  std::vector<std::uint8_t> bytes;
  std::uint8_t buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) bytes.insert(bytes.end(), buf, buf + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw UnreadableFile("decompression failed for " + path);
  return bytes;
}

}  // namespace detail

/// Derives the (.vol, .json, .mask) sibling paths from any of them or from
/// a bare base path.
struct RawPaths {
  std::string vol, sidecar, mask;

  static RawPaths from(const std::string& path) {
    std::filesystem::path p(path);
    if (p.extension() == ".vol" || p.extension() == ".json" || p.extension() == ".mask")
      p.replace_extension();
    RawPaths r;
    r.vol = p.string() + ".vol";
    r.sidecar = p.string() + ".json";
    r.mask = p.string() + ".mask";
    return r;
  }
};

/// Writes the internal raw representation: `<base>.vol` holds contiguous
/// little-endian float32 voxels (slowest-varying axis first), `<base>.json`
/// is the sidecar, and `<base>.mask` (written only when a mask is present)
/// holds one byte per voxel.
inline void write_volume(const Volume& v, const CaseRecord& rec, const std::string& base_path) {
  v.validate();
  const RawPaths paths = RawPaths::from(base_path);

  std::vector<std::uint8_t> payload;
  payload.reserve(v.size() * 4);
  for (const float x : v.voxels) detail::put_f32_le(payload, x);
  {
    std::ofstream out(paths.vol, std::ios::binary);
    if (!out) throw UnreadableFile("cannot write " + paths.vol);
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
  }

  nlohmann::json side;
  side["dims"] = {v.dims[0], v.dims[1], v.dims[2]};
  side["axis_order"] = {"sagittal", "axial", "coronal"};
  side["case_id"] = rec.case_id;
  side["subject_id"] = rec.subject_id;
  side["dataset"] = to_string(rec.dataset);
  side["vendor"] = to_string(rec.vendor);
  side["label"] = to_string(rec.label);
  if (v.has_mask()) side["mask"] = std::filesystem::path(paths.mask).filename().string();
  {
    std::ofstream out(paths.sidecar);
    if (!out) throw UnreadableFile("cannot write " + paths.sidecar);
    out << side.dump(2) << "\n";
  }

  if (v.has_mask()) {
    std::ofstream out(paths.mask, std::ios::binary);
    if (!out) throw UnreadableFile("cannot write " + paths.mask);
    out.write(reinterpret_cast<const char*>(v.mask.data()),
              static_cast<std::streamsize>(v.mask.size()));
  }
}

namespace detail {

inline std::pair<Volume, CaseRecord> ingest_raw(const std::string& path) {
  const RawPaths paths = RawPaths::from(path);
  std::ifstream side_in(paths.sidecar);
  if (!side_in) throw UnreadableFile("cannot open sidecar " + paths.sidecar);
  nlohmann::json side;
  try {
    side_in >> side;
  } catch (const nlohmann::json::exception& e) {
    throw UnsupportedFormat("malformed sidecar " + paths.sidecar + ": " + e.what());
  }
  if (!side.contains("dims") || !side["dims"].is_array() || side["dims"].size() != 3)
    throw UnsupportedFormat("sidecar missing 3-element dims: " + paths.sidecar);

  std::array<int, 3> dims{};
  for (int a = 0; a < 3; ++a) dims[static_cast<std::size_t>(a)] = side["dims"][a].get<int>();
  if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
    throw DimensionMismatch("non-positive dims in sidecar " + paths.sidecar);

  const auto payload = read_binary_file(paths.vol);
  const std::size_t expected = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  if (payload.size() != expected * 4)
    throw DimensionMismatch("payload of " + std::to_string(payload.size() / 4) +
                            " elements does not match sidecar dims of " + paths.vol);

  Volume v(dims[0], dims[1], dims[2]);
  for (std::size_t i = 0; i < expected; ++i)
    v.voxels[i] = get_f32_le(payload.data() + 4 * i);

  // Optional axis reordering: data stored under a permuted axis_order is
  // transposed into the canonical (sagittal, axial, coronal) layout.
  if (side.contains("axis_order")) {
    const auto order = side["axis_order"].get<std::vector<std::string>>();
    const std::vector<std::string> canonical = {"sagittal", "axial", "coronal"};
    if (order != canonical) {
      if (order.size() != 3) throw UnsupportedFormat("axis_order must name three axes");
      std::array<int, 3> perm{};  // perm[file axis] = canonical axis
      for (int a = 0; a < 3; ++a) {
        const auto it = std::find(canonical.begin(), canonical.end(), order[static_cast<std::size_t>(a)]);
        if (it == canonical.end()) throw UnsupportedFormat("unknown axis name " + order[static_cast<std::size_t>(a)]);
        perm[static_cast<std::size_t>(a)] = static_cast<int>(it - canonical.begin());
      }
      std::array<int, 3> cdims{};
      for (int a = 0; a < 3; ++a) cdims[static_cast<std::size_t>(perm[static_cast<std::size_t>(a)])] = dims[static_cast<std::size_t>(a)];
      Volume c(cdims[0], cdims[1], cdims[2]);
      std::array<int, 3> idx{};
      for (idx[0] = 0; idx[0] < dims[0]; ++idx[0])
        for (idx[1] = 0; idx[1] < dims[1]; ++idx[1])
          for (idx[2] = 0; idx[2] < dims[2]; ++idx[2]) {
            std::array<int, 3> cidx{};
            for (int a = 0; a < 3; ++a) cidx[static_cast<std::size_t>(perm[static_cast<std::size_t>(a)])] = idx[static_cast<std::size_t>(a)];
            c.at(cidx[0], cidx[1], cidx[2]) = v.at(idx[0], idx[1], idx[2]);
          }
      v = std::move(c);
    }
  }

  if (side.contains("mask")) {
    const auto mask_path =
        (std::filesystem::path(paths.sidecar).parent_path() / side["mask"].get<std::string>())
            .string();
    const auto mask_bytes = read_binary_file(mask_path);
    if (mask_bytes.size() != v.size())
      throw DimensionMismatch("mask payload does not match dims: " + mask_path);
    v.mask.assign(mask_bytes.begin(), mask_bytes.end());
  }

  CaseRecord rec;
  rec.case_id = side.value("case_id",
                           std::filesystem::path(paths.vol).stem().string());
  rec.subject_id = side.value("subject_id", rec.case_id);
  rec.dataset = dataset_from_string(side.value("dataset", "SYNTH"));
  rec.vendor = vendor_from_string(side.value("vendor", "UNKNOWN"));
  rec.label = label_from_string(side.value("label", "SYNTH_HEALTHY"));
  rec.validate();
  return {std::move(v), std::move(rec)};
}

inline std::pair<Volume, CaseRecord> ingest_nifti(const std::string& path) {
  const auto bytes = read_maybe_gzipped(path);
  if (bytes.size() < 352) throw UnsupportedFormat("not a NIfTI-1 file (too short): " + path);

  auto rd_i32 = [&](std::size_t off, bool swap) {
    std::uint32_t u;
    std::memcpy(&u, bytes.data() + off, 4);
    if (swap) u = __builtin_bswap32(u);
    return std::bit_cast<std::int32_t>(u);
  };
  auto rd_i16 = [&](std::size_t off, bool swap) {
    std::uint16_t u;
    std::memcpy(&u, bytes.data() + off, 2);
    if (swap) u = static_cast<std::uint16_t>((u << 8) | (u >> 8));
    return std::bit_cast<std::int16_t>(u);
  };
  auto rd_f32 = [&](std::size_t off, bool swap) {
    std::uint32_t u;
    std::memcpy(&u, bytes.data() + off, 4);
    if (swap) u = __builtin_bswap32(u);
    return std::bit_cast<float>(u);
  };

  bool swap = false;
  if (rd_i32(0, false) != 348) {
    if (rd_i32(0, true) == 348)
      swap = true;
    else
      throw UnsupportedFormat("bad NIfTI-1 header size in " + path);
  }
  const char* magic = reinterpret_cast<const char*>(bytes.data() + 344);
  if (std::strncmp(magic, "n+1", 3) != 0)
    throw UnsupportedFormat("only single-file NIfTI-1 (n+1) is supported: " + path);

  const int ndim = rd_i16(40, swap);
  if (ndim < 3) throw UnsupportedFormat("NIfTI with fewer than 3 dimensions: " + path);
  std::array<int, 3> dims{};
  for (int a = 0; a < 3; ++a) dims[static_cast<std::size_t>(a)] = rd_i16(42 + 2 * a, swap);
  for (int a = 3; a < ndim; ++a)
    if (rd_i16(42 + 2 * a, swap) > 1)
      throw UnsupportedFormat("4D NIfTI volumes are not supported: " + path);

  const int datatype = rd_i16(70, swap);
  const float scl_slope_raw = rd_f32(112, swap);
  const float scl_inter = rd_f32(116, swap);
  const double slope = (scl_slope_raw == 0.0f) ? 1.0 : scl_slope_raw;
  const double inter = (scl_slope_raw == 0.0f) ? 0.0 : scl_inter;
  const auto offset = static_cast<std::size_t>(rd_f32(108, swap));

  const std::size_t n = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  std::size_t elem_size = 0;
  switch (datatype) {
    case 2: elem_size = 1; break;    // uint8
    case 4: elem_size = 2; break;    // int16
    case 8: elem_size = 4; break;    // int32
    case 16: elem_size = 4; break;   // float32
    case 64: elem_size = 8; break;   // float64
    case 512: elem_size = 2; break;  // uint16
    default: throw UnsupportedFormat("unsupported NIfTI datatype " + std::to_string(datatype));
  }
  if (bytes.size() < offset + n * elem_size)
    throw DimensionMismatch("NIfTI payload shorter than header dims: " + path);

  auto read_elem = [&](std::size_t i) -> double {
    const std::size_t off = offset + i * elem_size;
    switch (datatype) {
      case 2: return bytes[off];
      case 4: return rd_i16(off, swap);
      case 8: return rd_i32(off, swap);
      case 16: return rd_f32(off, swap);
      case 64: {
        std::uint64_t u;
        std::memcpy(&u, bytes.data() + off, 8);
        if (swap) u = __builtin_bswap64(u);
        return std::bit_cast<double>(u);
      }
      default: {  // 512
        std::uint16_t u;
        std::memcpy(&u, bytes.data() + off, 2);
        if (swap) u = static_cast<std::uint16_t>((u << 8) | (u >> 8));
        return u;
      }
    }
  };

  // NIfTI stores the first axis fastest; transpose into canonical C layout.
  Volume v(dims[0], dims[1], dims[2]);
  std::size_t src = 0;
  for (int k = 0; k < dims[2]; ++k)
    for (int j = 0; j < dims[1]; ++j)
      for (int i = 0; i < dims[0]; ++i, ++src)
        v.at(i, j, k) = static_cast<float>(slope * read_elem(src) + inter);

  CaseRecord rec;
  std::filesystem::path p(path);
  std::string stem = p.filename().string();
  for (const char* ext : {".nii.gz", ".nii"}) {
    const std::string e(ext);
    if (stem.size() > e.size() && stem.substr(stem.size() - e.size()) == e)
      stem = stem.substr(0, stem.size() - e.size());
  }
  rec.case_id = stem;
  rec.subject_id = stem;
  rec.dataset = Dataset::SYNTH;
  rec.vendor = Vendor::UNKNOWN;
  rec.label = Label::SYNTH_HEALTHY;
  return {std::move(v), std::move(rec)};
}

}  // namespace detail

/// Loads one case from disk. Raw volumes resolve their sidecar from the
/// shared base name; NIfTI-1 files may be gzip-compressed. Intensities are
/// never rescaled on ingest.
inline std::pair<Volume, CaseRecord> ingest_volume(const std::string& path, VolumeFormat format) {
  switch (format) {
    case VolumeFormat::raw_sidecar: return detail::ingest_raw(path);
    case VolumeFormat::nifti1: return detail::ingest_nifti(path);
  }
  throw UnsupportedFormat("unknown volume format");
}

/// Guesses the format from the file extension.
inline std::pair<Volume, CaseRecord> ingest_volume(const std::string& path) {
  const std::string s = path;
  if (s.ends_with(".nii") || s.ends_with(".nii.gz")) return detail::ingest_nifti(path);
  return detail::ingest_raw(path);
}

// -- Manifest CSV -------------------------------------------------------------

/// Writes `case_id,dataset,vendor,label,fold` rows. Volumes are expected to
/// live next to the manifest as `<case_id>.vol` / `<case_id>.json`.
inline void write_manifest(const std::string& path, const std::vector<CaseRecord>& records) {
  check_unique_case_ids(records);
  std::ofstream out(path);
  if (!out) throw UnreadableFile("cannot write manifest " + path);
  out << "case_id,dataset,vendor,label,fold\n";
  for (const auto& r : records) {
    out << r.case_id << ',' << to_string(r.dataset) << ',' << to_string(r.vendor) << ','
        << to_string(r.label) << ',' << r.fold << '\n';
  }
}

inline std::vector<CaseRecord> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UnreadableFile("cannot open manifest " + path);
  std::string line;
  if (!std::getline(in, line)) throw UnsupportedFormat("empty manifest " + path);
  std::vector<CaseRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) cols.push_back(col);
    if (cols.size() != 5)
      throw UnsupportedFormat("manifest row needs 5 columns: " + line);
    CaseRecord r;
    r.case_id = cols[0];
    r.subject_id = cols[0];
    r.dataset = dataset_from_string(cols[1]);
    r.vendor = vendor_from_string(cols[2]);
    r.label = label_from_string(cols[3]);
    r.fold = std::stoi(cols[4]);
    r.validate();
    records.push_back(std::move(r));
  }
  check_unique_case_ids(records);
  return records;
}

/// Volume paths are manifest-relative unless DIPSS_DATA_ROOT overrides the
/// base directory.
inline std::string resolve_case_path(const std::string& manifest_path, const std::string& case_id) {
  std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
  if (const char* root = std::getenv("DIPSS_DATA_ROOT")) base = root;
  return (base / (case_id + ".vol")).string();
}

inline Volume load_case_volume(const std::string& manifest_path, const CaseRecord& rec) {
  return detail::ingest_raw(resolve_case_path(manifest_path, rec.case_id)).first;
}

}  // namespace dipss
