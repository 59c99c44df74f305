#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "dipss/common.hpp"

namespace dipss::nn {

/// Dense N-d array, row-major (last index fastest). Conv layers use
/// (C, H, W) for slices and (C, D, H, W) for volumes.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), T(0));
  }
  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel_of(shape)) throw ShapeIncompatible("tensor data/shape mismatch");
  }

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (const int d : s) {
      if (d <= 0) throw ShapeIncompatible("tensor dims must be positive");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::size_t numel() const { return data.size(); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  Tensor& operator+=(const Tensor& o) {
    if (!same_shape(o)) throw ShapeIncompatible("tensor += shape mismatch");
    for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
    return *this;
  }

  Tensor& scale(T s) {
    for (auto& v : data) v *= s;
    return *this;
  }

  bool all_finite() const {
    for (const T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return Tensor<T>(t.shape);
}

/// Mean of |a - b|; the L1 building block of the translation losses.
template <typename T>
double l1_mean_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw ShapeIncompatible("L1 over differently shaped tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    acc += std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]));
  return acc / static_cast<double>(a.data.size());
}

/// d/da of l1_mean_diff(a, b), scaled by `weight`.
template <typename T>
Tensor<T> l1_mean_diff_grad(const Tensor<T>& a, const Tensor<T>& b, double weight) {
  if (!a.same_shape(b)) throw ShapeIncompatible("L1 grad over differently shaped tensors");
  Tensor<T> g(a.shape);
  const double w = weight / static_cast<double>(a.data.size());
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    g.data[i] = static_cast<T>(d > 0.0 ? w : (d < 0.0 ? -w : 0.0));
  }
  return g;
}

}  // namespace dipss::nn
