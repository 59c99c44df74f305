#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "dipss/common.hpp"

namespace dipss {

/// Slicing / index axes. Index order of every volume is
/// (sagittal, axial, coronal); coronal varies fastest in memory.
enum class Axis { sagittal = 0, axial = 1, coronal = 2 };

inline const char* axis_name(Axis a) {
  switch (a) {
    case Axis::sagittal: return "sagittal";
    case Axis::axial: return "axial";
    default: return "coronal";
  }
}

inline Axis axis_from_name(const std::string& s) {
  if (s == "sagittal") return Axis::sagittal;
  if (s == "axial") return Axis::axial;
  if (s == "coronal") return Axis::coronal;
  throw UsageError("unknown axis: " + s);
}

enum class Dataset { ADNI, PPMI, SYNTH };
enum class Vendor { SI, GE, PH, UNKNOWN };
enum class Label { CN, AD, Control, PD, SYNTH_HEALTHY, SYNTH_DISEASED };

inline const char* to_string(Dataset d) {
  switch (d) {
    case Dataset::ADNI: return "ADNI";
    case Dataset::PPMI: return "PPMI";
    default: return "SYNTH";
  }
}
inline const char* to_string(Vendor v) {
  switch (v) {
    case Vendor::SI: return "SI";
    case Vendor::GE: return "GE";
    case Vendor::PH: return "PH";
    default: return "UNKNOWN";
  }
}
inline const char* to_string(Label l) {
  switch (l) {
    case Label::CN: return "CN";
    case Label::AD: return "AD";
    case Label::Control: return "Control";
    case Label::PD: return "PD";
    case Label::SYNTH_HEALTHY: return "SYNTH_HEALTHY";
    default: return "SYNTH_DISEASED";
  }
}

inline Dataset dataset_from_string(const std::string& s) {
  if (s == "ADNI") return Dataset::ADNI;
  if (s == "PPMI") return Dataset::PPMI;
  if (s == "SYNTH") return Dataset::SYNTH;
  throw DataError("unknown dataset: " + s);
}
inline Vendor vendor_from_string(const std::string& s) {
  if (s == "SI") return Vendor::SI;
  if (s == "GE") return Vendor::GE;
  if (s == "PH") return Vendor::PH;
  if (s == "UNKNOWN" || s == "n/a" || s.empty()) return Vendor::UNKNOWN;
  throw DataError("unknown vendor: " + s);
}
inline Label label_from_string(const std::string& s) {
  if (s == "CN") return Label::CN;
  if (s == "AD") return Label::AD;
  if (s == "Control") return Label::Control;
  if (s == "PD") return Label::PD;
  if (s == "SYNTH_HEALTHY") return Label::SYNTH_HEALTHY;
  if (s == "SYNTH_DISEASED") return Label::SYNTH_DISEASED;
  throw DataError("unknown label: " + s);
}

/// Identity and provenance of one case.
struct CaseRecord {
  std::string case_id;
  std::string subject_id;
  Dataset dataset = Dataset::SYNTH;
  Vendor vendor = Vendor::UNKNOWN;
  Label label = Label::SYNTH_HEALTHY;
  int fold = -1;  // -1 = unassigned

  void validate() const {
    if (case_id.empty()) throw DataError("CaseRecord without case_id");
    if (dataset == Dataset::PPMI && vendor != Vendor::UNKNOWN)
      throw DataError("PPMI cases carry no vendor information: " + case_id);
  }
};

/// Category key used by the distribution statistics: label plus vendor for
/// vendor-resolved datasets ("CN_SI"), plain label for PPMI.
inline std::string category_of(const CaseRecord& rec) {
  if (rec.dataset == Dataset::PPMI || rec.vendor == Vendor::UNKNOWN)
    return to_string(rec.label);
  return std::string(to_string(rec.label)) + "_" + to_string(rec.vendor);
}

inline bool is_healthy(Label l) {
  return l == Label::CN || l == Label::Control || l == Label::SYNTH_HEALTHY;
}

/// One 2D slice, row-major.
struct Slice2d {
  int rows = 0;
  int cols = 0;
  std::vector<float> values;

  Slice2d() = default;
  Slice2d(int r, int c) : rows(r), cols(c), values(static_cast<std::size_t>(r) * c, 0.0f) {}

  float& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
  float at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
  std::size_t size() const { return values.size(); }
};

/// A 3D intensity volume in display units [0, 255], with an optional brain
/// mask of identical dimensions. Voxels are stored contiguously with the
/// coronal index varying fastest. Volumes are treated as immutable once
/// built by an operation, so they are safe to share across readers.
struct Volume {
  std::array<int, 3> dims = {0, 0, 0};  // (sagittal, axial, coronal)
  std::vector<float> voxels;
  std::vector<std::uint8_t> mask;  // empty when absent

  Volume() = default;
  Volume(int nx, int ny, int nz)
      : dims{nx, ny, nz}, voxels(static_cast<std::size_t>(nx) * ny * nz, 0.0f) {}

  std::size_t size() const { return voxels.size(); }
  bool has_mask() const { return !mask.empty(); }

  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * dims[1] + j) * dims[2] + k;
  }
  float& at(int i, int j, int k) { return voxels[index(i, j, k)]; }
  float at(int i, int j, int k) const { return voxels[index(i, j, k)]; }
  bool mask_at(int i, int j, int k) const { return mask[index(i, j, k)] != 0; }

  void validate() const {
    if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
      throw DimensionMismatch("volume with non-positive dimension");
    const std::size_t n = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    if (voxels.size() != n) throw DimensionMismatch("voxel payload does not match dims");
    if (!mask.empty() && mask.size() != n)
      throw DimensionMismatch("mask dims differ from voxel dims");
  }

  /// Reports (does not clamp) intensity-range and finiteness violations.
  void check_intensity_range() const {
    for (const float v : voxels) {
      if (!std::isfinite(v)) throw DataError("volume contains non-finite intensity");
      if (v < 0.0f || v > 255.0f) throw DataError("volume intensity outside [0, 255]");
    }
  }

  /// Mean intensity over mask voxels when a mask is present, over nonzero
  /// voxels otherwise. Returns the voxel count through `count`.
  double region_mean(std::size_t* count = nullptr) const {
    double sum = 0.0;
    std::size_t n = 0;
    if (has_mask()) {
      for (std::size_t i = 0; i < voxels.size(); ++i)
        if (mask[i]) {
          sum += voxels[i];
          ++n;
        }
    } else {
      for (const float v : voxels)
        if (v != 0.0f) {
          sum += v;
          ++n;
        }
    }
    if (count) *count = n;
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
  }
};

inline bool same_dims(const Volume& a, const Volume& b) { return a.dims == b.dims; }

/// Ordered set of parallel 2D slices cut from a volume.
struct SliceStack {
  std::vector<Slice2d> slices;
  Axis axis = Axis::coronal;
  std::vector<int> positions;  // index of each slice within the parent volume
  std::array<int, 3> parent_dims = {0, 0, 0};
};

namespace detail {

// Maps a (slice row, slice col, position) triple back to volume indices.
inline std::array<int, 3> unslice_index(Axis axis, int r, int c, int pos) {
  switch (axis) {
    case Axis::sagittal: return {pos, r, c};
    case Axis::axial: return {r, pos, c};
    default: return {r, c, pos};
  }
}

inline std::pair<int, int> slice_shape(const std::array<int, 3>& dims, Axis axis) {
  switch (axis) {
    case Axis::sagittal: return {dims[1], dims[2]};
    case Axis::axial: return {dims[0], dims[2]};
    default: return {dims[0], dims[1]};
  }
}

}  // namespace detail

/// Cuts the volume into one 2D slice per index along `axis`, in index order.
inline SliceStack extract_slices(const Volume& v, Axis axis = Axis::coronal) {
  v.validate();
  const int n = v.dims[static_cast<int>(axis)];
  const auto [rows, cols] = detail::slice_shape(v.dims, axis);
  SliceStack stack;
  stack.axis = axis;
  stack.parent_dims = v.dims;
  stack.slices.reserve(static_cast<std::size_t>(n));
  stack.positions.reserve(static_cast<std::size_t>(n));
  for (int pos = 0; pos < n; ++pos) {
    Slice2d s(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const auto idx = detail::unslice_index(axis, r, c, pos);
        s.at(r, c) = v.at(idx[0], idx[1], idx[2]);
      }
    stack.slices.push_back(std::move(s));
    stack.positions.push_back(pos);
  }
  return stack;
}

/// Exact inverse of extract_slices. Slice order is canonicalized by
/// position; the positions must cover 0..n-1 without gaps.
inline Volume reassemble(const SliceStack& stack) {
  const int n = stack.parent_dims[static_cast<int>(stack.axis)];
  if (stack.slices.size() != stack.positions.size())
    throw DimensionMismatch("slice/position count mismatch");
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  for (const int p : stack.positions) {
    if (p < 0 || p >= n) throw MissingSlices("slice position out of range");
    if (seen[static_cast<std::size_t>(p)]) throw MissingSlices("duplicate slice position");
    seen[static_cast<std::size_t>(p)] = 1;
  }
  if (stack.slices.size() != static_cast<std::size_t>(n))
    throw MissingSlices("stack does not cover every position");

  const auto [rows, cols] = detail::slice_shape(stack.parent_dims, stack.axis);
  Volume v(stack.parent_dims[0], stack.parent_dims[1], stack.parent_dims[2]);
  for (std::size_t s = 0; s < stack.slices.size(); ++s) {
    const Slice2d& sl = stack.slices[s];
    if (sl.rows != rows || sl.cols != cols)
      throw DimensionMismatch("slice shape does not match parent dims");
    const int pos = stack.positions[s];
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const auto idx = detail::unslice_index(stack.axis, r, c, pos);
        v.at(idx[0], idx[1], idx[2]) = sl.at(r, c);
      }
  }
  return v;
}

/// Case collections reject duplicate case ids.
inline void check_unique_case_ids(const std::vector<CaseRecord>& records) {
  std::vector<std::string> ids;
  ids.reserve(records.size());
  for (const auto& r : records) ids.push_back(r.case_id);
  std::sort(ids.begin(), ids.end());
  const auto dup = std::adjacent_find(ids.begin(), ids.end());
  if (dup != ids.end()) throw DuplicateCaseId("duplicate case_id: " + *dup);
}

}  // namespace dipss
