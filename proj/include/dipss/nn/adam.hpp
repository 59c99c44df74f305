#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "dipss/nn/layers.hpp"

namespace dipss::nn {

/// Adam with per-parameter moment state keyed by parameter name. Moments
/// are kept in double regardless of the parameter scalar type.
template <typename T>
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// One update over all referenced parameters. lr_scale implements
  /// schedules (e.g. linear decay) without touching optimizer state.
  void step(std::vector<ParamRef<T>>& params, double lr_scale = 1.0) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (auto& p : params) {
      auto& slot = slots_[p.name];
      if (slot.m.empty()) {
        slot.m.assign(p.value->size(), 0.0);
        slot.v.assign(p.value->size(), 0.0);
      }
      for (std::size_t i = 0; i < p.value->size(); ++i) {
        const double g = static_cast<double>((*p.grad)[i]);
        slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * g;
        slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * g * g;
        const double mhat = slot.m[i] / bc1;
        const double vhat = slot.v[i] / bc2;
        (*p.value)[i] = static_cast<T>((*p.value)[i] -
                                       lr_scale * lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, Slot> slots_;
};

}  // namespace dipss::nn
