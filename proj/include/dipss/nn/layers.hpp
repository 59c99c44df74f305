#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "dipss/common.hpp"
#include "dipss/nn/tensor.hpp"
#include "dipss/rng.hpp"

namespace dipss::nn {

template <typename T>
struct ParamRef {
  std::string name;
  std::vector<T>* value;
  std::vector<T>* grad;
};

/// Layer base. forward() caches whatever backward() needs, so a module
/// instance supports one forward-then-backward chain at a time and is not
/// thread-safe. backward(dy, false) propagates the input gradient without
/// touching parameter gradients (used when a discriminator serves as a
/// frozen critic for the generator step).
template <typename T>
class Module {
 public:
  virtual ~Module() = default;
  virtual Tensor<T> forward(const Tensor<T>& x) = 0;
  virtual Tensor<T> backward(const Tensor<T>& dy, bool accumulate_param_grads = true) = 0;
  virtual void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    (void)prefix;
    (void)out;
  }
};

enum class PadMode { zero, reflect };

namespace detail {

// Reflection without edge repetition; valid while |pad| < extent.
inline int reflect_index(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * n - 2 - i;
  return i;
}

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using EMapRowMajor =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using EMapRowMajorConst =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace detail

/// 2D convolution, GEMM-backed (im2col).
template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d(int in_c, int out_c, int kernel, int stride, int pad, PadMode mode, Rng& rng,
         T init_sd = T(0.02))
      : in_c_(in_c), out_c_(out_c), k_(kernel), stride_(stride), pad_(pad), mode_(mode) {
    weight_.resize(static_cast<std::size_t>(out_c_) * in_c_ * k_ * k_);
    bias_.assign(static_cast<std::size_t>(out_c_), T(0));
    for (auto& w : weight_) w = static_cast<T>(rng.normal(0.0, static_cast<double>(init_sd)));
    dweight_.assign(weight_.size(), T(0));
    dbias_.assign(bias_.size(), T(0));
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.shape.size() != 3 || x.dim(0) != in_c_)
      throw ShapeIncompatible("Conv2d: expected (" + std::to_string(in_c_) + ",H,W) input");
    h_in_ = x.dim(1);
    w_in_ = x.dim(2);
    h_out_ = (h_in_ + 2 * pad_ - k_) / stride_ + 1;
    w_out_ = (w_in_ + 2 * pad_ - k_) / stride_ + 1;
    if (h_out_ <= 0 || w_out_ <= 0) throw ShapeIncompatible("Conv2d: input too small");
    if (mode_ == PadMode::reflect && (pad_ >= h_in_ || pad_ >= w_in_))
      throw ShapeIncompatible("Conv2d: reflect pad larger than input");

    im2col(x);
    const int kdim = in_c_ * k_ * k_;
    const int n = h_out_ * w_out_;
    Tensor<T> y({out_c_, h_out_, w_out_});
    detail::EMapRowMajorConst<T> w_map(weight_.data(), out_c_, kdim);
    detail::EMapRowMajor<T> y_map(y.data.data(), out_c_, n);
    y_map.noalias() = w_map * col_;
    for (int c = 0; c < out_c_; ++c) y_map.row(c).array() += bias_[static_cast<std::size_t>(c)];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool accumulate_param_grads = true) override {
    const int kdim = in_c_ * k_ * k_;
    const int n = h_out_ * w_out_;
    detail::EMapRowMajorConst<T> dy_map(dy.data.data(), out_c_, n);
    if (accumulate_param_grads) {
      detail::EMapRowMajor<T> dw_map(dweight_.data(), out_c_, kdim);
      dw_map.noalias() += dy_map * col_.transpose();
      for (int c = 0; c < out_c_; ++c) dbias_[static_cast<std::size_t>(c)] += dy_map.row(c).sum();
    }
    detail::EMat<T> dcol = detail::EMat<T>::Zero(kdim, n);
    detail::EMapRowMajorConst<T> w_map(weight_.data(), out_c_, kdim);
    dcol.noalias() = w_map.transpose() * dy_map;
    return col2im(dcol);
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    out.push_back({prefix + "weight", &weight_, &dweight_});
    out.push_back({prefix + "bias", &bias_, &dbias_});
  }

 private:
  void im2col(const Tensor<T>& x) {
    const int kdim = in_c_ * k_ * k_;
    const int n = h_out_ * w_out_;
    col_.resize(kdim, n);
    for (int oh = 0; oh < h_out_; ++oh)
      for (int ow = 0; ow < w_out_; ++ow) {
        const int ncol = oh * w_out_ + ow;
        int row = 0;
        for (int c = 0; c < in_c_; ++c) {
          const T* plane = x.data.data() + static_cast<std::size_t>(c) * h_in_ * w_in_;
          for (int kh = 0; kh < k_; ++kh)
            for (int kw = 0; kw < k_; ++kw, ++row) {
              int ih = oh * stride_ - pad_ + kh;
              int iw = ow * stride_ - pad_ + kw;
              if (mode_ == PadMode::reflect) {
                ih = detail::reflect_index(ih, h_in_);
                iw = detail::reflect_index(iw, w_in_);
              } else if (ih < 0 || ih >= h_in_ || iw < 0 || iw >= w_in_) {
                col_(row, ncol) = T(0);
                continue;
              }
              col_(row, ncol) = plane[ih * w_in_ + iw];
            }
        }
      }
  }

  Tensor<T> col2im(const detail::EMat<T>& dcol) const {
    Tensor<T> dx({in_c_, h_in_, w_in_});
    for (int oh = 0; oh < h_out_; ++oh)
      for (int ow = 0; ow < w_out_; ++ow) {
        const int ncol = oh * w_out_ + ow;
        int row = 0;
        for (int c = 0; c < in_c_; ++c) {
          T* plane = dx.data.data() + static_cast<std::size_t>(c) * h_in_ * w_in_;
          for (int kh = 0; kh < k_; ++kh)
            for (int kw = 0; kw < k_; ++kw, ++row) {
              int ih = oh * stride_ - pad_ + kh;
              int iw = ow * stride_ - pad_ + kw;
              if (mode_ == PadMode::reflect) {
                ih = detail::reflect_index(ih, h_in_);
                iw = detail::reflect_index(iw, w_in_);
              } else if (ih < 0 || ih >= h_in_ || iw < 0 || iw >= w_in_) {
                continue;
              }
              plane[ih * w_in_ + iw] += dcol(row, ncol);
            }
        }
      }
    return dx;
  }

  int in_c_, out_c_, k_, stride_, pad_;
  PadMode mode_;
  int h_in_ = 0, w_in_ = 0, h_out_ = 0, w_out_ = 0;
  std::vector<T> weight_, bias_, dweight_, dbias_;
  detail::EMat<T> col_;
};

/// Strided transposed 2D convolution (the up-sampling stage of the
/// generator). output = (H-1)*stride - 2*pad + kernel + output_pad.
template <typename T>
class ConvTranspose2d : public Module<T> {
 public:
  ConvTranspose2d(int in_c, int out_c, int kernel, int stride, int pad, int output_pad, Rng& rng,
                  T init_sd = T(0.02))
      : in_c_(in_c), out_c_(out_c), k_(kernel), stride_(stride), pad_(pad), opad_(output_pad) {
    weight_.resize(static_cast<std::size_t>(out_c_) * k_ * k_ * in_c_);
    bias_.assign(static_cast<std::size_t>(out_c_), T(0));
    for (auto& w : weight_) w = static_cast<T>(rng.normal(0.0, static_cast<double>(init_sd)));
    dweight_.assign(weight_.size(), T(0));
    dbias_.assign(bias_.size(), T(0));
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.shape.size() != 3 || x.dim(0) != in_c_)
      throw ShapeIncompatible("ConvTranspose2d: bad input shape");
    h_in_ = x.dim(1);
    w_in_ = x.dim(2);
    h_out_ = (h_in_ - 1) * stride_ - 2 * pad_ + k_ + opad_;
    w_out_ = (w_in_ - 1) * stride_ - 2 * pad_ + k_ + opad_;
    if (h_out_ <= 0 || w_out_ <= 0) throw ShapeIncompatible("ConvTranspose2d: input too small");
    x_ = x;

    // col[(c_out, kh, kw), (ih, iw)] = sum_cin W[...] x[cin, ih, iw]
    const int kdim = out_c_ * k_ * k_;
    const int n = h_in_ * w_in_;
    detail::EMapRowMajorConst<T> w_map(weight_.data(), kdim, in_c_);
    detail::EMapRowMajorConst<T> x_map(x.data.data(), in_c_, n);
    detail::EMat<T> col(kdim, n);
    col.noalias() = w_map * x_map;

    Tensor<T> y({out_c_, h_out_, w_out_});
    for (int ih = 0; ih < h_in_; ++ih)
      for (int iw = 0; iw < w_in_; ++iw) {
        const int ncol = ih * w_in_ + iw;
        int row = 0;
        for (int c = 0; c < out_c_; ++c) {
          T* plane = y.data.data() + static_cast<std::size_t>(c) * h_out_ * w_out_;
          for (int kh = 0; kh < k_; ++kh)
            for (int kw = 0; kw < k_; ++kw, ++row) {
              const int oh = ih * stride_ - pad_ + kh;
              const int ow = iw * stride_ - pad_ + kw;
              if (oh < 0 || oh >= h_out_ || ow < 0 || ow >= w_out_) continue;
              plane[oh * w_out_ + ow] += col(row, ncol);
            }
        }
      }
    for (int c = 0; c < out_c_; ++c) {
      T* plane = y.data.data() + static_cast<std::size_t>(c) * h_out_ * w_out_;
      for (int i = 0; i < h_out_ * w_out_; ++i) plane[i] += bias_[static_cast<std::size_t>(c)];
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool accumulate_param_grads = true) override {
    const int kdim = out_c_ * k_ * k_;
    const int n = h_in_ * w_in_;
    // Gather dy back into column layout (adjoint of the scatter above).
    detail::EMat<T> dcol = detail::EMat<T>::Zero(kdim, n);
    for (int ih = 0; ih < h_in_; ++ih)
      for (int iw = 0; iw < w_in_; ++iw) {
        const int ncol = ih * w_in_ + iw;
        int row = 0;
        for (int c = 0; c < out_c_; ++c) {
          const T* plane = dy.data.data() + static_cast<std::size_t>(c) * h_out_ * w_out_;
          for (int kh = 0; kh < k_; ++kh)
            for (int kw = 0; kw < k_; ++kw, ++row) {
              const int oh = ih * stride_ - pad_ + kh;
              const int ow = iw * stride_ - pad_ + kw;
              if (oh < 0 || oh >= h_out_ || ow < 0 || ow >= w_out_) continue;
              dcol(row, ncol) = plane[oh * w_out_ + ow];
            }
        }
      }

    if (accumulate_param_grads) {
      detail::EMapRowMajorConst<T> x_map(x_.data.data(), in_c_, n);
      detail::EMapRowMajor<T> dw_map(dweight_.data(), kdim, in_c_);
      dw_map.noalias() += dcol * x_map.transpose();
      for (int c = 0; c < out_c_; ++c) {
        const T* plane = dy.data.data() + static_cast<std::size_t>(c) * h_out_ * w_out_;
        T acc = T(0);
        for (int i = 0; i < h_out_ * w_out_; ++i) acc += plane[i];
        dbias_[static_cast<std::size_t>(c)] += acc;
      }
    }

    Tensor<T> dx({in_c_, h_in_, w_in_});
    detail::EMapRowMajorConst<T> w_map(weight_.data(), kdim, in_c_);
    detail::EMapRowMajor<T> dx_map(dx.data.data(), in_c_, n);
    dx_map.noalias() = w_map.transpose() * dcol;
    return dx;
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    out.push_back({prefix + "weight", &weight_, &dweight_});
    out.push_back({prefix + "bias", &bias_, &dbias_});
  }

 private:
  int in_c_, out_c_, k_, stride_, pad_, opad_;
  int h_in_ = 0, w_in_ = 0, h_out_ = 0, w_out_ = 0;
  std::vector<T> weight_, bias_, dweight_, dbias_;
  Tensor<T> x_;
};

/// Per-channel instance normalization without learnable affine terms.
/// Works for both (C,H,W) and (C,D,H,W) inputs.
template <typename T>
class InstanceNorm : public Module<T> {
 public:
  explicit InstanceNorm(double eps = 1e-5) : eps_(eps) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.shape.size() < 2) throw ShapeIncompatible("InstanceNorm: rank-1 input");
    channels_ = x.dim(0);
    plane_ = static_cast<int>(x.numel()) / channels_;
    y_ = Tensor<T>(x.shape);
    inv_std_.assign(static_cast<std::size_t>(channels_), 0.0);
    for (int c = 0; c < channels_; ++c) {
      const T* in = x.data.data() + static_cast<std::size_t>(c) * plane_;
      T* out = y_.data.data() + static_cast<std::size_t>(c) * plane_;
      double mean = 0.0;
      for (int i = 0; i < plane_; ++i) mean += in[i];
      mean /= plane_;
      double var = 0.0;
      for (int i = 0; i < plane_; ++i) {
        const double d = in[i] - mean;
        var += d * d;
      }
      var /= plane_;
      const double inv = 1.0 / std::sqrt(var + eps_);
      inv_std_[static_cast<std::size_t>(c)] = inv;
      for (int i = 0; i < plane_; ++i) out[i] = static_cast<T>((in[i] - mean) * inv);
    }
    return y_;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool /*accumulate*/ = true) override {
    Tensor<T> dx(dy.shape);
    for (int c = 0; c < channels_; ++c) {
      const T* g = dy.data.data() + static_cast<std::size_t>(c) * plane_;
      const T* y = y_.data.data() + static_cast<std::size_t>(c) * plane_;
      T* out = dx.data.data() + static_cast<std::size_t>(c) * plane_;
      double mean_g = 0.0, mean_gy = 0.0;
      for (int i = 0; i < plane_; ++i) {
        mean_g += g[i];
        mean_gy += static_cast<double>(g[i]) * y[i];
      }
      mean_g /= plane_;
      mean_gy /= plane_;
      const double inv = inv_std_[static_cast<std::size_t>(c)];
      for (int i = 0; i < plane_; ++i)
        out[i] = static_cast<T>(inv * (g[i] - mean_g - y[i] * mean_gy));
    }
    return dx;
  }

 private:
  double eps_;
  int channels_ = 0, plane_ = 0;
  Tensor<T> y_;
  std::vector<double> inv_std_;
};

template <typename T>
class LeakyReLU : public Module<T> {
 public:
  explicit LeakyReLU(double slope = 0.0) : slope_(static_cast<T>(slope)) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    y_ = x;
    for (auto& v : y_.data)
      if (v < T(0)) v *= slope_;
    return y_;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool /*accumulate*/ = true) override {
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.data.size(); ++i)
      if (y_.data[i] <= T(0)) dx.data[i] *= slope_;
    return dx;
  }

 private:
  T slope_;
  Tensor<T> y_;
};

template <typename T>
using ReLU = LeakyReLU<T>;

template <typename T>
class Tanh : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) override {
    y_ = x;
    for (auto& v : y_.data) v = std::tanh(v);
    return y_;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool /*accumulate*/ = true) override {
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.data.size(); ++i)
      dx.data[i] *= T(1) - y_.data[i] * y_.data[i];
    return dx;
  }

 private:
  Tensor<T> y_;
};

/// 3D convolution, stride 1, zero padding; GEMM-backed like Conv2d.
template <typename T>
class Conv3d : public Module<T> {
 public:
  Conv3d(int in_c, int out_c, int kernel, int pad, Rng& rng, T init_sd = T(0.05))
      : in_c_(in_c), out_c_(out_c), k_(kernel), pad_(pad) {
    weight_.resize(static_cast<std::size_t>(out_c_) * in_c_ * k_ * k_ * k_);
    bias_.assign(static_cast<std::size_t>(out_c_), T(0));
    for (auto& w : weight_) w = static_cast<T>(rng.normal(0.0, static_cast<double>(init_sd)));
    dweight_.assign(weight_.size(), T(0));
    dbias_.assign(bias_.size(), T(0));
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.shape.size() != 4 || x.dim(0) != in_c_) throw ShapeIncompatible("Conv3d: bad input");
    d_ = x.dim(1);
    h_ = x.dim(2);
    w_ = x.dim(3);
    do_ = d_ + 2 * pad_ - k_ + 1;
    ho_ = h_ + 2 * pad_ - k_ + 1;
    wo_ = w_ + 2 * pad_ - k_ + 1;
    if (do_ <= 0 || ho_ <= 0 || wo_ <= 0) throw ShapeIncompatible("Conv3d: input too small");

    im2col(x);
    const int kdim = in_c_ * k_ * k_ * k_;
    const int n = do_ * ho_ * wo_;
    Tensor<T> y({out_c_, do_, ho_, wo_});
    detail::EMapRowMajorConst<T> w_map(weight_.data(), out_c_, kdim);
    detail::EMapRowMajor<T> y_map(y.data.data(), out_c_, n);
    y_map.noalias() = w_map * col_;
    for (int c = 0; c < out_c_; ++c) y_map.row(c).array() += bias_[static_cast<std::size_t>(c)];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool accumulate_param_grads = true) override {
    const int kdim = in_c_ * k_ * k_ * k_;
    const int n = do_ * ho_ * wo_;
    detail::EMapRowMajorConst<T> dy_map(dy.data.data(), out_c_, n);
    if (accumulate_param_grads) {
      detail::EMapRowMajor<T> dw_map(dweight_.data(), out_c_, kdim);
      dw_map.noalias() += dy_map * col_.transpose();
      for (int c = 0; c < out_c_; ++c) dbias_[static_cast<std::size_t>(c)] += dy_map.row(c).sum();
    }
    detail::EMat<T> dcol(kdim, n);
    detail::EMapRowMajorConst<T> w_map(weight_.data(), out_c_, kdim);
    dcol.noalias() = w_map.transpose() * dy_map;
    return col2im(dcol);
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    out.push_back({prefix + "weight", &weight_, &dweight_});
    out.push_back({prefix + "bias", &bias_, &dbias_});
  }

 private:
  void im2col(const Tensor<T>& x) {
    const int kdim = in_c_ * k_ * k_ * k_;
    const int n = do_ * ho_ * wo_;
    col_.resize(kdim, n);
    int ncol = 0;
    for (int od = 0; od < do_; ++od)
      for (int oh = 0; oh < ho_; ++oh)
        for (int ow = 0; ow < wo_; ++ow, ++ncol) {
          int row = 0;
          for (int c = 0; c < in_c_; ++c) {
            const T* grid = x.data.data() + static_cast<std::size_t>(c) * d_ * h_ * w_;
            for (int kd = 0; kd < k_; ++kd)
              for (int kh = 0; kh < k_; ++kh)
                for (int kw = 0; kw < k_; ++kw, ++row) {
                  const int id = od - pad_ + kd;
                  const int ih = oh - pad_ + kh;
                  const int iw = ow - pad_ + kw;
                  col_(row, ncol) = (id < 0 || id >= d_ || ih < 0 || ih >= h_ || iw < 0 || iw >= w_)
                                        ? T(0)
                                        : grid[(id * h_ + ih) * w_ + iw];
                }
          }
        }
  }

  Tensor<T> col2im(const detail::EMat<T>& dcol) const {
    Tensor<T> dx({in_c_, d_, h_, w_});
    int ncol = 0;
    for (int od = 0; od < do_; ++od)
      for (int oh = 0; oh < ho_; ++oh)
        for (int ow = 0; ow < wo_; ++ow, ++ncol) {
          int row = 0;
          for (int c = 0; c < in_c_; ++c) {
            T* grid = dx.data.data() + static_cast<std::size_t>(c) * d_ * h_ * w_;
            for (int kd = 0; kd < k_; ++kd)
              for (int kh = 0; kh < k_; ++kh)
                for (int kw = 0; kw < k_; ++kw, ++row) {
                  const int id = od - pad_ + kd;
                  const int ih = oh - pad_ + kh;
                  const int iw = ow - pad_ + kw;
                  if (id < 0 || id >= d_ || ih < 0 || ih >= h_ || iw < 0 || iw >= w_) continue;
                  grid[(id * h_ + ih) * w_ + iw] += dcol(row, ncol);
                }
          }
        }
    return dx;
  }

  int in_c_, out_c_, k_, pad_;
  int d_ = 0, h_ = 0, w_ = 0, do_ = 0, ho_ = 0, wo_ = 0;
  std::vector<T> weight_, bias_, dweight_, dbias_;
  detail::EMat<T> col_;
};

/// 2x2x2 average pooling, stride 2.
template <typename T>
class AvgPool3d : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.shape.size() != 4) throw ShapeIncompatible("AvgPool3d: rank-4 input required");
    if (x.dim(1) % 2 || x.dim(2) % 2 || x.dim(3) % 2)
      throw ShapeIncompatible("AvgPool3d: spatial dims must be even");
    in_shape_ = x.shape;
    const int c = x.dim(0), d = x.dim(1) / 2, h = x.dim(2) / 2, w = x.dim(3) / 2;
    Tensor<T> y({c, d, h, w});
    for (int ch = 0; ch < c; ++ch) {
      const T* in = x.data.data() + static_cast<std::size_t>(ch) * x.dim(1) * x.dim(2) * x.dim(3);
      T* out = y.data.data() + static_cast<std::size_t>(ch) * d * h * w;
      for (int od = 0; od < d; ++od)
        for (int oh = 0; oh < h; ++oh)
          for (int ow = 0; ow < w; ++ow) {
            double acc = 0.0;
            for (int dd = 0; dd < 2; ++dd)
              for (int dh = 0; dh < 2; ++dh)
                for (int dw = 0; dw < 2; ++dw)
                  acc += in[((2 * od + dd) * x.dim(2) + 2 * oh + dh) * x.dim(3) + 2 * ow + dw];
            out[(od * h + oh) * w + ow] = static_cast<T>(acc / 8.0);
          }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool /*accumulate*/ = true) override {
    Tensor<T> dx(in_shape_);
    const int c = dy.dim(0), d = dy.dim(1), h = dy.dim(2), w = dy.dim(3);
    for (int ch = 0; ch < c; ++ch) {
      const T* g = dy.data.data() + static_cast<std::size_t>(ch) * d * h * w;
      T* out = dx.data.data() +
               static_cast<std::size_t>(ch) * in_shape_[1] * in_shape_[2] * in_shape_[3];
      for (int od = 0; od < d; ++od)
        for (int oh = 0; oh < h; ++oh)
          for (int ow = 0; ow < w; ++ow) {
            const T v = g[(od * h + oh) * w + ow] / T(8);
            for (int dd = 0; dd < 2; ++dd)
              for (int dh = 0; dh < 2; ++dh)
                for (int dw = 0; dw < 2; ++dw)
                  out[((2 * od + dd) * in_shape_[2] + 2 * oh + dh) * in_shape_[3] + 2 * ow + dw] = v;
          }
    }
    return dx;
  }

 private:
  std::vector<int> in_shape_;
};

/// Doubling tri-linear upsampling (half-pixel sampling, clamped borders),
/// applied separably along the three spatial axes.
template <typename T>
class Upsample3d : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.shape.size() != 4) throw ShapeIncompatible("Upsample3d: rank-4 input required");
    in_shape_ = x.shape;
    Tensor<T> cur = x;
    for (int axis = 1; axis <= 3; ++axis) cur = stretch_axis(cur, axis, /*adjoint=*/false);
    return cur;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool /*accumulate*/ = true) override {
    Tensor<T> cur = dy;
    for (int axis = 3; axis >= 1; --axis) cur = stretch_axis(cur, axis, /*adjoint=*/true);
    return cur;
  }

 private:
  // Doubles (or, for the adjoint, halves) one axis. For output index o the
  // source coordinate is o/2 - 0.25, linearly interpolated with clamping.
  static Tensor<T> stretch_axis(const Tensor<T>& x, int axis, bool adjoint) {
    std::vector<int> out_shape = x.shape;
    const int n_in = adjoint ? x.shape[static_cast<std::size_t>(axis)] / 2
                             : x.shape[static_cast<std::size_t>(axis)];
    const int n_out = 2 * n_in;
    out_shape[static_cast<std::size_t>(axis)] = adjoint ? n_in : n_out;
    Tensor<T> y(out_shape);

    // Treat the tensor as (outer, axis, inner).
    int outer = 1, inner = 1;
    for (int a = 0; a < static_cast<int>(x.shape.size()); ++a) {
      if (a < axis) outer *= x.shape[static_cast<std::size_t>(a)];
      if (a > axis) inner *= x.shape[static_cast<std::size_t>(a)];
    }
    const int len_x = x.shape[static_cast<std::size_t>(axis)];
    const int len_y = out_shape[static_cast<std::size_t>(axis)];

    for (int o = 0; o < n_out; ++o) {
      const double src = 0.5 * o - 0.25;
      int i0 = static_cast<int>(std::floor(src));
      const double frac = src - i0;
      int i1 = i0 + 1;
      i0 = std::min(std::max(i0, 0), n_in - 1);
      i1 = std::min(std::max(i1, 0), n_in - 1);
      const T w0 = static_cast<T>(1.0 - frac);
      const T w1 = static_cast<T>(frac);
      for (int u = 0; u < outer; ++u)
        for (int v = 0; v < inner; ++v) {
          if (!adjoint) {
            const T a = x.data[(static_cast<std::size_t>(u) * len_x + i0) * inner + v];
            const T b = x.data[(static_cast<std::size_t>(u) * len_x + i1) * inner + v];
            y.data[(static_cast<std::size_t>(u) * len_y + o) * inner + v] = w0 * a + w1 * b;
          } else {
            const T g = x.data[(static_cast<std::size_t>(u) * len_x + o) * inner + v];
            y.data[(static_cast<std::size_t>(u) * len_y + i0) * inner + v] += w0 * g;
            y.data[(static_cast<std::size_t>(u) * len_y + i1) * inner + v] += w1 * g;
          }
        }
    }
    return y;
  }

  std::vector<int> in_shape_;
};

/// Reshapes to a flat vector; the inverse happens in backward.
template <typename T>
class Flatten : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) override {
    in_shape_ = x.shape;
    Tensor<T> y;
    y.shape = {static_cast<int>(x.numel())};
    y.data = x.data;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool /*accumulate*/ = true) override {
    Tensor<T> dx;
    dx.shape = in_shape_;
    dx.data = dy.data;
    return dx;
  }

 private:
  std::vector<int> in_shape_;
};

/// Fully connected layer on flat inputs.
template <typename T>
class Linear : public Module<T> {
 public:
  Linear(int in_dim, int out_dim, Rng& rng, T init_sd = T(0.02))
      : in_dim_(in_dim), out_dim_(out_dim) {
    weight_.resize(static_cast<std::size_t>(out_dim_) * in_dim_);
    bias_.assign(static_cast<std::size_t>(out_dim_), T(0));
    for (auto& w : weight_) w = static_cast<T>(rng.normal(0.0, static_cast<double>(init_sd)));
    dweight_.assign(weight_.size(), T(0));
    dbias_.assign(bias_.size(), T(0));
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    if (static_cast<int>(x.numel()) != in_dim_)
      throw ShapeIncompatible("Linear: expected " + std::to_string(in_dim_) + " inputs, got " +
                              std::to_string(x.numel()));
    x_ = x;
    Tensor<T> y({out_dim_});
    for (int o = 0; o < out_dim_; ++o) {
      double acc = bias_[static_cast<std::size_t>(o)];
      const T* w = weight_.data() + static_cast<std::size_t>(o) * in_dim_;
      for (int i = 0; i < in_dim_; ++i) acc += static_cast<double>(w[i]) * x.data[static_cast<std::size_t>(i)];
      y.data[static_cast<std::size_t>(o)] = static_cast<T>(acc);
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool accumulate_param_grads = true) override {
    Tensor<T> dx;
    dx.shape = x_.shape;
    dx.data.assign(x_.data.size(), T(0));
    for (int o = 0; o < out_dim_; ++o) {
      const T g = dy.data[static_cast<std::size_t>(o)];
      const T* w = weight_.data() + static_cast<std::size_t>(o) * in_dim_;
      T* dw = dweight_.data() + static_cast<std::size_t>(o) * in_dim_;
      for (int i = 0; i < in_dim_; ++i) {
        dx.data[static_cast<std::size_t>(i)] += w[i] * g;
        if (accumulate_param_grads) dw[i] += g * x_.data[static_cast<std::size_t>(i)];
      }
      if (accumulate_param_grads) dbias_[static_cast<std::size_t>(o)] += g;
    }
    return dx;
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    out.push_back({prefix + "weight", &weight_, &dweight_});
    out.push_back({prefix + "bias", &bias_, &dbias_});
  }

 private:
  int in_dim_, out_dim_;
  std::vector<T> weight_, bias_, dweight_, dbias_;
  Tensor<T> x_;
};

/// Ordered module chain.
template <typename T>
class Sequential : public Module<T> {
 public:
  Sequential() = default;
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <typename M, typename... Args>
  Sequential& emplace(Args&&... args) {
    layers_.push_back(std::make_unique<M>(std::forward<Args>(args)...));
    return *this;
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> cur = x;
    for (auto& l : layers_) cur = l->forward(cur);
    return cur;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool accumulate_param_grads = true) override {
    Tensor<T> cur = dy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
      cur = (*it)->backward(cur, accumulate_param_grads);
    return cur;
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i]->collect_params(prefix + "l" + std::to_string(i) + ".", out);
  }

  std::size_t size() const { return layers_.size(); }

 private:
  std::vector<std::unique_ptr<Module<T>>> layers_;
};

/// Residual block: x + body(x), body = conv/IN/ReLU/conv/IN with reflect pad.
template <typename T>
class ResidualBlock : public Module<T> {
 public:
  ResidualBlock(int channels, Rng& rng) {
    body_.template emplace<Conv2d<T>>(channels, channels, 3, 1, 1, PadMode::reflect, rng);
    body_.template emplace<InstanceNorm<T>>();
    body_.template emplace<ReLU<T>>();
    body_.template emplace<Conv2d<T>>(channels, channels, 3, 1, 1, PadMode::reflect, rng);
    body_.template emplace<InstanceNorm<T>>();
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> y = body_.forward(x);
    y += x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool accumulate_param_grads = true) override {
    Tensor<T> dx = body_.backward(dy, accumulate_param_grads);
    dx += dy;
    return dx;
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    body_.collect_params(prefix + "body.", out);
  }

 private:
  Sequential<T> body_;
};

/// Zeroes all collected parameter gradients.
template <typename T>
void zero_grads(std::vector<ParamRef<T>>& params) {
  for (auto& p : params) std::fill(p.grad->begin(), p.grad->end(), T(0));
}

}  // namespace dipss::nn
