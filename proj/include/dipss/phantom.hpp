#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dipss/common.hpp"
#include "dipss/rng.hpp"
#include "dipss/volume.hpp"

namespace dipss {

/// Synthetic acquisition effect: contrast exponent, spatial smoothing, a
/// low-frequency multiplicative bias field and additive noise. The identity
/// profile (1, 0, 0, 0) leaves volumes bit-exact.
struct ScannerProfile {
  std::string name = "identity";
  double gamma = 1.0;
  double blur_sigma = 0.0;      // voxels
  double bias_amplitude = 0.0;  // in [0, 1]
  double noise_sigma = 0.0;     // intensity units

  void validate() const {
    if (!(gamma > 0.0)) throw InvalidProfile("scanner gamma must be positive");
    if (blur_sigma < 0.0) throw InvalidProfile("blur_sigma must be nonnegative");
    if (bias_amplitude < 0.0 || bias_amplitude > 1.0)
      throw InvalidProfile("bias_amplitude must lie in [0, 1]");
    if (noise_sigma < 0.0) throw InvalidProfile("noise_sigma must be nonnegative");
  }

  static ScannerProfile identity() { return {}; }
  /// Source domain of the stock conversion pair.
  static ScannerProfile synth_a() { return {"synthA", 0.85, 0.6, 0.10, 2.0}; }
  /// Reference domain (identity rendering).
  static ScannerProfile synth_b() { return {"synthB", 1.0, 0.0, 0.0, 0.0}; }
  /// Holdout vendor used for generalization probes only.
  static ScannerProfile synth_c() { return {"synthC", 1.2, 0.3, 0.05, 1.0}; }

  static ScannerProfile by_name(const std::string& n) {
    if (n == "identity") return identity();
    if (n == "synthA") return synth_a();
    if (n == "synthB") return synth_b();
    if (n == "synthC") return synth_c();
    throw UsageError("unknown scanner profile: " + n);
  }
};

/// Anatomy-change proxy: an enlarged central cavity and a thinned outer shell.
struct DiseaseProfile {
  double severity = 0.0;          // in [0, 1]
  double ventricle_scale = 1.0;   // >= 1
  double cortical_thinning = 0.0; // in [0, 1]

  void validate() const {
    if (severity < 0.0 || severity > 1.0) throw InvalidProfile("severity must lie in [0, 1]");
    if (ventricle_scale < 1.0) throw InvalidProfile("ventricle_scale must be >= 1");
    if (cortical_thinning < 0.0 || cortical_thinning > 1.0)
      throw InvalidProfile("cortical_thinning must lie in [0, 1]");
    if (severity == 0.0 && (ventricle_scale != 1.0 || cortical_thinning != 0.0))
      throw InvalidProfile("severity 0 requires ventricle_scale 1 and cortical_thinning 0");
  }

  static DiseaseProfile healthy() { return {}; }
  static DiseaseProfile at_severity(double s) { return {s, 1.0 + 0.8 * s, 0.5 * s}; }
};

/// Deterministic brain-like phantom: nested ellipsoidal tissue shells around
/// a central cavity, with per-subject shape jitter scaled by
/// subject_variation. All randomness comes from the fixed Rng stream, so a
/// (seed, parameters) pair reproduces bit-identical volumes on any platform.
inline std::pair<Volume, CaseRecord> generate_phantom(std::uint64_t seed,
                                                      double subject_variation,
                                                      const DiseaseProfile& disease,
                                                      std::array<int, 3> dims = {32, 32, 48}) {
  disease.validate();
  if (subject_variation < 0.0 || subject_variation > 1.0)
    throw InvalidProfile("subject_variation must lie in [0, 1]");
  if (dims[0] < 8 || dims[1] < 8 || dims[2] < 8)
    throw InvalidProfile("phantom dims must be at least 8 per axis");

  Rng rng(seed);
  const double sv = subject_variation;

  // Per-subject geometry jitter, all draws scaled by subject_variation so
  // sv = 0 collapses every seed onto the same phantom.
  std::array<double, 3> outer{};
  const std::array<double, 3> base_outer = {0.80, 0.72, 0.85};
  for (int a = 0; a < 3; ++a)
    outer[static_cast<std::size_t>(a)] =
        base_outer[static_cast<std::size_t>(a)] * (1.0 + 0.06 * sv * rng.normal());
  std::array<double, 3> center{};
  for (auto& c : center) c = 0.05 * sv * rng.normal();

  const double wm_rel = 0.74 + 0.12 * disease.cortical_thinning;
  const double cav_rel = 0.20 * disease.ventricle_scale;
  const double gray = 110.0 + 8.0 * sv * rng.normal();
  const double white = 170.0 + 8.0 * sv * rng.normal();
  const double csf = 28.0 + 4.0 * sv * rng.normal();

  const double edge = 0.08;  // boundary ramp width in normalized units
  auto coverage = [edge](double r) {
    return std::clamp(0.5 + (1.0 - r) / edge, 0.0, 1.0);
  };

  Volume v(dims[0], dims[1], dims[2]);
  v.mask.assign(v.size(), 0);
  std::size_t idx = 0;
  for (int i = 0; i < dims[0]; ++i) {
    const double ux = (2.0 * i - (dims[0] - 1)) / dims[0];
    for (int j = 0; j < dims[1]; ++j) {
      const double uy = (2.0 * j - (dims[1] - 1)) / dims[1];
      for (int k = 0; k < dims[2]; ++k, ++idx) {
        const double uz = (2.0 * k - (dims[2] - 1)) / dims[2];
        auto radius = [&](double rel) {
          const double sx = (ux - center[0]) / (outer[0] * rel);
          const double sy = (uy - center[1]) / (outer[1] * rel);
          const double sz = (uz - center[2]) / (outer[2] * rel);
          return std::sqrt(sx * sx + sy * sy + sz * sz);
        };
        const double c_out = coverage(radius(1.0));
        if (c_out <= 0.0) continue;
        const double c_wm = coverage(radius(wm_rel));
        const double c_cav = coverage(radius(cav_rel));
        double val = gray * c_out;
        val = val * (1.0 - c_wm) + white * c_wm;
        val = val * (1.0 - c_cav) + csf * c_cav;
        v.voxels[idx] = static_cast<float>(std::clamp(val, 0.0, 255.0));
        if (v.voxels[idx] != 0.0f) v.mask[idx] = 1;
      }
    }
  }

  CaseRecord rec;
  rec.case_id = "phantom" + std::to_string(seed);
  rec.subject_id = rec.case_id;
  rec.dataset = Dataset::SYNTH;
  rec.vendor = Vendor::UNKNOWN;
  rec.label = disease.severity > 0.0 ? Label::SYNTH_DISEASED : Label::SYNTH_HEALTHY;
  return {std::move(v), std::move(rec)};
}

namespace detail {

/// One separable pass of a mask-aware Gaussian: weights are renormalized
/// over in-mask (or in-bounds) neighbours, so constants are preserved and
/// nothing bleeds across the mask boundary.
inline void blur_axis(Volume& v, int axis, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> w(static_cast<std::size_t>(radius) + 1);
  for (int d = 0; d <= radius; ++d)
    w[static_cast<std::size_t>(d)] = std::exp(-0.5 * (d * d) / (sigma * sigma));

  const auto dims = v.dims;
  const bool masked = v.has_mask();
  std::vector<float> out(v.voxels.size(), 0.0f);
  std::array<int, 3> it{};
  for (it[0] = 0; it[0] < dims[0]; ++it[0])
    for (it[1] = 0; it[1] < dims[1]; ++it[1])
      for (it[2] = 0; it[2] < dims[2]; ++it[2]) {
        const std::size_t idx = v.index(it[0], it[1], it[2]);
        if (masked && !v.mask[idx]) continue;
        double num = 0.0, den = 0.0;
        for (int d = -radius; d <= radius; ++d) {
          auto nb = it;
          nb[static_cast<std::size_t>(axis)] += d;
          if (nb[static_cast<std::size_t>(axis)] < 0 ||
              nb[static_cast<std::size_t>(axis)] >= dims[static_cast<std::size_t>(axis)])
            continue;
          const std::size_t nidx = v.index(nb[0], nb[1], nb[2]);
          if (masked && !v.mask[nidx]) continue;
          const double wd = w[static_cast<std::size_t>(std::abs(d))];
          num += wd * v.voxels[nidx];
          den += wd;
        }
        out[idx] = den > 0.0 ? static_cast<float>(num / den) : v.voxels[idx];
      }
  v.voxels = std::move(out);
}

}  // namespace detail

/// Renders a volume as if acquired by the given scanner:
/// clamp(gamma(blur(v)) * bias + noise). The gamma map acts inside the mask,
/// blurring never crosses the mask boundary, and background voxels stay
/// exactly zero when noise is off. Deterministic per seed.
inline Volume apply_scanner(const Volume& input, const ScannerProfile& p, std::uint64_t seed) {
  input.validate();
  p.validate();
  Volume v = input;
  Rng rng(seed);

  if (p.blur_sigma > 0.0)
    for (int axis = 0; axis < 3; ++axis) detail::blur_axis(v, axis, p.blur_sigma);

  if (p.gamma != 1.0) {
    const bool masked = v.has_mask();
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
      if (masked && !v.mask[i]) continue;
      const double x = v.voxels[i];
      if (x > 0.0) v.voxels[i] = static_cast<float>(255.0 * std::pow(x / 255.0, p.gamma));
    }
  }

  if (p.bias_amplitude > 0.0) {
    // Lowest three separable cosine modes with a random phase per axis and
    // mode; amplitudes decay as 1/m and the sum is normalized to [-1, 1].
    constexpr int kModes = 3;
    double phase[3][kModes];
    for (auto& axis_phases : phase)
      for (auto& ph : axis_phases) ph = rng.uniform(0.0, 2.0 * 3.141592653589793);
    const double norm = 1.0 + 0.5 + 1.0 / 3.0;
    std::size_t idx = 0;
    for (int i = 0; i < v.dims[0]; ++i)
      for (int j = 0; j < v.dims[1]; ++j)
        for (int k = 0; k < v.dims[2]; ++k, ++idx) {
          double b = 0.0;
          for (int m = 1; m <= kModes; ++m) {
            const double fx = std::cos(3.141592653589793 * m * i / v.dims[0] + phase[0][m - 1]);
            const double fy = std::cos(3.141592653589793 * m * j / v.dims[1] + phase[1][m - 1]);
            const double fz = std::cos(3.141592653589793 * m * k / v.dims[2] + phase[2][m - 1]);
            b += fx * fy * fz / m;
          }
          v.voxels[idx] = static_cast<float>(v.voxels[idx] * (1.0 + p.bias_amplitude * b / norm));
        }
  }

  if (p.noise_sigma > 0.0)
    for (auto& x : v.voxels) x = static_cast<float>(x + p.noise_sigma * rng.normal());

  for (auto& x : v.voxels) x = std::clamp(x, 0.0f, 255.0f);
  return v;
}

}  // namespace dipss
