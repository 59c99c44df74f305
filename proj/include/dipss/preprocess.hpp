#pragma once

#include <cmath>
#include <utility>

#include "dipss/common.hpp"
#include "dipss/volume.hpp"

namespace dipss {

/// Iterative gamma-correction target: brain-region mean inside
/// [target_mean - margin, target_mean + margin].
struct NormalizationConfig {
  double target_mean = 18.0;
  double margin = 1.0;
  int max_iterations = 50;
  double gamma_low = 0.1;
  double gamma_high = 10.0;

  void validate() const {
    if (!(margin > 0.0)) throw UsageError("normalization margin must be positive");
    if (!(gamma_low > 0.0) || !(gamma_low < gamma_high))
      throw UsageError("gamma bounds must satisfy 0 < low < high");
    if (max_iterations < 1) throw UsageError("max_iterations must be >= 1");
  }
};

namespace detail {

/// Mean over the brain region (mask voxels when present, nonzero voxels
/// otherwise) after applying x -> 255 (x/255)^gamma.
inline double gamma_region_mean(const Volume& v, double gamma) {
  double sum = 0.0;
  std::size_t n = 0;
  const bool masked = v.has_mask();
  for (std::size_t i = 0; i < v.voxels.size(); ++i) {
    if (masked ? !v.mask[i] : v.voxels[i] == 0.0f) continue;
    const double x = v.voxels[i];
    sum += x > 0.0 ? 255.0 * std::pow(x / 255.0, gamma) : 0.0;
    ++n;
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

inline Volume apply_gamma(const Volume& v, double gamma) {
  Volume out = v;
  if (gamma == 1.0) return out;
  for (auto& x : out.voxels)
    if (x > 0.0f) x = static_cast<float>(255.0 * std::pow(x / 255.0, gamma));
  return out;
}

}  // namespace detail

/// Gamma-corrects the volume so its brain-region mean lands within the
/// configured margin of the target. The resulting mean is monotone
/// decreasing in gamma, so the exponent is found by bisection; zero voxels
/// stay zero and the intensity ordering is preserved.
inline std::pair<Volume, double> normalize_intensity(const Volume& v,
                                                     const NormalizationConfig& cfg = {}) {
  cfg.validate();
  v.validate();

  std::size_t region_count = 0;
  const double mean0 = v.region_mean(&region_count);
  if (region_count == 0 || mean0 <= 0.0)
    throw DegenerateInput("normalize_intensity: volume has no nonzero brain voxels");

  const double lo_target = cfg.target_mean - cfg.margin;
  const double hi_target = cfg.target_mean + cfg.margin;
  if (mean0 >= lo_target && mean0 <= hi_target) return {v, 1.0};

  double lo, hi;  // bracket with mean(lo) > hi_target > lo_target > mean(hi)
  if (mean0 > hi_target) {
    lo = 1.0;
    hi = cfg.gamma_high;
    if (detail::gamma_region_mean(v, hi) > hi_target)
      throw NoConvergence("normalize_intensity: target mean unreachable within gamma bounds");
  } else {
    lo = cfg.gamma_low;
    hi = 1.0;
    if (detail::gamma_region_mean(v, lo) < lo_target)
      throw NoConvergence("normalize_intensity: target mean unreachable within gamma bounds");
  }

  for (int it = 0; it < cfg.max_iterations; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double mean = detail::gamma_region_mean(v, mid);
    if (mean >= lo_target && mean <= hi_target) return {detail::apply_gamma(v, mid), mid};
    if (mean > hi_target)
      lo = mid;
    else
      hi = mid;
  }
  throw NoConvergence("normalize_intensity: bisection budget exhausted");
}

/// Halves every side; each output voxel is the mean of its 2x2x2 block and
/// the mask is carried over by majority vote (ties count as brain).
inline Volume downsample_half(const Volume& v) {
  v.validate();
  if (v.dims[0] % 2 || v.dims[1] % 2 || v.dims[2] % 2)
    throw OddDimension("downsample_half requires even dims");

  Volume out(v.dims[0] / 2, v.dims[1] / 2, v.dims[2] / 2);
  if (v.has_mask()) out.mask.assign(out.size(), 0);
  for (int i = 0; i < out.dims[0]; ++i)
    for (int j = 0; j < out.dims[1]; ++j)
      for (int k = 0; k < out.dims[2]; ++k) {
        double sum = 0.0;
        int mask_votes = 0;
        for (int di = 0; di < 2; ++di)
          for (int dj = 0; dj < 2; ++dj)
            for (int dk = 0; dk < 2; ++dk) {
              const std::size_t idx = v.index(2 * i + di, 2 * j + dj, 2 * k + dk);
              sum += v.voxels[idx];
              if (v.has_mask() && v.mask[idx]) ++mask_votes;
            }
        out.at(i, j, k) = static_cast<float>(sum / 8.0);
        if (v.has_mask()) out.mask[out.index(i, j, k)] = mask_votes >= 4 ? 1 : 0;
      }
  return out;
}

}  // namespace dipss
