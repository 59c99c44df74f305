#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dipss/common.hpp"
#include "dipss/nn/adam.hpp"
#include "dipss/nn/layers.hpp"
#include "dipss/nn/tensor.hpp"
#include "dipss/rng.hpp"
#include "dipss/volume.hpp"

namespace dipss {

/// Architecture knobs for the translation networks. The defaults follow the
/// canonical unpaired-translation recipe at 160x160; toy runs shrink the
/// width and residual depth.
struct PssArch {
  int base_width = 64;
  int n_res_blocks = 6;
  int disc_head_channels = 16;
  int slice_rows = 160;
  int slice_cols = 160;
};

struct PssTrainConfig {
  double lambda_cycle = 10.0;     // weight of the cycle-consistency term
  double lambda_identity = 0.5;   // weight of the identity-mapping term
  double learning_rate = 2e-4;
  int batch_size = 1;
  int iterations = 2000;
  int history_pool = 50;
  std::uint64_t seed = 0;
  PssArch arch;
  std::string diagnostics_dir;  // when set, a divergence dumps a snapshot here

  void validate() const {
    if (lambda_cycle < 0.0 || lambda_identity < 0.0)
      throw UsageError("loss weights must be nonnegative");
    if (batch_size < 1) throw UsageError("batch size must be >= 1");
    if (iterations < 1) throw UsageError("iteration budget must be >= 1");
  }
};

namespace detail {

template <typename T>
nn::Sequential<T> build_generator(const PssArch& arch, Rng& rng) {
  using namespace nn;
  const int w = arch.base_width;
  Sequential<T> g;
  g.template emplace<Conv2d<T>>(1, w, 7, 1, 3, PadMode::reflect, rng);
  g.template emplace<InstanceNorm<T>>();
  g.template emplace<ReLU<T>>();
  g.template emplace<Conv2d<T>>(w, 2 * w, 3, 2, 1, PadMode::zero, rng);
  g.template emplace<InstanceNorm<T>>();
  g.template emplace<ReLU<T>>();
  g.template emplace<Conv2d<T>>(2 * w, 4 * w, 3, 2, 1, PadMode::zero, rng);
  g.template emplace<InstanceNorm<T>>();
  g.template emplace<ReLU<T>>();
  for (int i = 0; i < arch.n_res_blocks; ++i) g.template emplace<ResidualBlock<T>>(4 * w, rng);
  g.template emplace<ConvTranspose2d<T>>(4 * w, 2 * w, 3, 2, 1, 1, rng);
  g.template emplace<InstanceNorm<T>>();
  g.template emplace<ReLU<T>>();
  g.template emplace<ConvTranspose2d<T>>(2 * w, w, 3, 2, 1, 1, rng);
  g.template emplace<InstanceNorm<T>>();
  g.template emplace<ReLU<T>>();
  g.template emplace<Conv2d<T>>(w, 1, 7, 1, 3, PadMode::reflect, rng);
  g.template emplace<Tanh<T>>();
  return g;
}

inline int conv_out(int n) { return (n + 2 - 4) / 2 + 1; }  // k4 s2 p1

/// Spatial extent after the five strided stages of the discriminator.
inline std::pair<int, int> disc_spatial(int rows, int cols) {
  int r = rows, c = cols;
  for (int i = 0; i < 5; ++i) {
    r = conv_out(r);
    c = conv_out(c);
    if (r <= 0 || c <= 0) throw ShapeIncompatible("discriminator input too small");
  }
  return {r, c};
}

/// Strided conv ladder ending in a flat fully connected head. The head
/// channel count is chosen so the flattened feature size is 400 at the
/// 160x160 reference input; other sizes re-dimension the head.
template <typename T>
nn::Sequential<T> build_discriminator(const PssArch& arch, Rng& rng) {
  using namespace nn;
  const int w = arch.base_width;
  const auto [r, c] = disc_spatial(arch.slice_rows, arch.slice_cols);
  Sequential<T> d;
  d.template emplace<Conv2d<T>>(1, w, 4, 2, 1, PadMode::zero, rng);
  d.template emplace<LeakyReLU<T>>(0.2);
  int prev = w;
  for (const int mult : {2, 4, 4}) {
    d.template emplace<Conv2d<T>>(prev, mult * w, 4, 2, 1, PadMode::zero, rng);
    d.template emplace<InstanceNorm<T>>();
    d.template emplace<LeakyReLU<T>>(0.2);
    prev = mult * w;
  }
  d.template emplace<Conv2d<T>>(prev, arch.disc_head_channels, 4, 2, 1, PadMode::zero, rng);
  d.template emplace<Flatten<T>>();
  d.template emplace<Linear<T>>(arch.disc_head_channels * r * c, 1, rng);
  return d;
}

/// Display units [0,255] <-> network range [-1,1] via a fixed affine map.
template <typename T>
nn::Tensor<T> slice_to_tensor(const Slice2d& s) {
  nn::Tensor<T> t({1, s.rows, s.cols});
  for (std::size_t i = 0; i < s.values.size(); ++i)
    t.data[i] = static_cast<T>(s.values[i] / 127.5f - 1.0f);
  return t;
}

template <typename T>
Slice2d tensor_to_slice(const nn::Tensor<T>& t) {
  Slice2d s(t.dim(1), t.dim(2));
  for (std::size_t i = 0; i < s.values.size(); ++i) {
    const double v = (static_cast<double>(t.data[i]) + 1.0) * 127.5;
    s.values[i] = static_cast<float>(std::clamp(v, 0.0, 255.0));
  }
  return s;
}

}  // namespace detail

/// The four trained networks plus training metadata. Generators share one
/// architecture, as do the discriminators. gen_y_to_x plays the paper's
/// standardization role (applied at deployment).
struct PssParams {
  PssArch arch;
  nn::Sequential<float> gen_x_to_y;  // G_Y: reference -> source
  nn::Sequential<float> gen_y_to_x;  // G_X: source -> reference
  nn::Sequential<float> disc_x;
  nn::Sequential<float> disc_y;
  long iterations_done = 0;
  std::uint64_t seed = 0;
  std::string config_hash;

  std::vector<nn::ParamRef<float>> generator_params() {
    std::vector<nn::ParamRef<float>> out;
    gen_x_to_y.collect_params("gen_x_to_y.", out);
    gen_y_to_x.collect_params("gen_y_to_x.", out);
    return out;
  }
  std::vector<nn::ParamRef<float>> discriminator_params() {
    std::vector<nn::ParamRef<float>> out;
    disc_x.collect_params("disc_x.", out);
    disc_y.collect_params("disc_y.", out);
    return out;
  }
  std::vector<nn::ParamRef<float>> all_params() {
    auto out = generator_params();
    auto d = discriminator_params();
    out.insert(out.end(), d.begin(), d.end());
    return out;
  }
};

/// Freshly initialized model; deterministic in (arch, seed).
inline PssParams make_pss_params(const PssArch& arch, std::uint64_t seed) {
  Rng rng(seed);
  PssParams p;
  p.arch = arch;
  p.seed = seed;
  p.gen_x_to_y = detail::build_generator<float>(arch, rng);
  p.gen_y_to_x = detail::build_generator<float>(arch, rng);
  p.disc_x = detail::build_discriminator<float>(arch, rng);
  p.disc_y = detail::build_discriminator<float>(arch, rng);
  return p;
}

/// Runs one slice through a generator. The two down-convolutions impose a
/// divisibility-by-4 requirement on both sides.
inline Slice2d generator_forward(const Slice2d& slice, nn::Sequential<float>& gen) {
  if (slice.rows % 4 || slice.cols % 4)
    throw ShapeIncompatible("generator input dims must be divisible by 4");
  const auto y = gen.forward(detail::slice_to_tensor<float>(slice));
  return detail::tensor_to_slice(y);
}

/// Scalar realness score of a slice (unbounded; least-squares targets 0/1).
inline double discriminator_forward(const Slice2d& slice, nn::Sequential<float>& disc,
                                    const PssArch& arch) {
  if (slice.rows != arch.slice_rows || slice.cols != arch.slice_cols)
    throw ShapeIncompatible("discriminator input must match the configured slice shape");
  const auto y = disc.forward(detail::slice_to_tensor<float>(slice));
  return static_cast<double>(y.data[0]);
}

// -- Loss surface -------------------------------------------------------------

/// Least-squares adversarial objective: mean (real - 1)^2 + mean fake^2.
inline double adversarial_loss(const std::vector<double>& real_scores,
                               const std::vector<double>& fake_scores) {
  if (real_scores.empty() || fake_scores.empty())
    throw EmptyBatch("adversarial_loss needs nonempty score batches");
  double real = 0.0, fake = 0.0;
  for (const double s : real_scores) real += (s - 1.0) * (s - 1.0);
  for (const double s : fake_scores) fake += s * s;
  return real / static_cast<double>(real_scores.size()) +
         fake / static_cast<double>(fake_scores.size());
}

namespace detail {

inline double l1_mean(const Slice2d& a, const Slice2d& b) {
  if (a.rows != b.rows || a.cols != b.cols)
    throw ShapeIncompatible("L1 over differently shaped slices");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i)
    acc += std::abs(static_cast<double>(a.values[i]) - static_cast<double>(b.values[i]));
  return acc / static_cast<double>(a.values.size());
}

}  // namespace detail

/// Round-trip residual through both generators.
inline double cycle_loss(const Slice2d& x, const Slice2d& x_cycled, const Slice2d& y,
                         const Slice2d& y_cycled) {
  return detail::l1_mean(x, x_cycled) + detail::l1_mean(y, y_cycled);
}

/// Own-domain residual: generators should leave target-domain inputs alone.
inline double identity_loss(const Slice2d& x, const Slice2d& gx_of_x, const Slice2d& y,
                            const Slice2d& gy_of_y) {
  return detail::l1_mean(gx_of_x, x) + detail::l1_mean(gy_of_y, y);
}

inline double total_pss_loss(double l_gan_y, double l_gan_x, double l_cycle, double l_identity,
                             const PssTrainConfig& cfg) {
  return l_gan_y + l_gan_x + cfg.lambda_cycle * l_cycle + cfg.lambda_identity * l_identity;
}

// -- Training -----------------------------------------------------------------

struct PssLossRow {
  int iteration;
  double adv_y, adv_x, cycle, identity, total;
};

struct PssTrainResult {
  PssParams params;
  std::vector<PssLossRow> log;
};

namespace detail {

/// Generated-image history pool: the discriminator trains on a mix of the
/// newest fakes and a rolling reservoir of older ones.
template <typename T>
class ImagePool {
 public:
  ImagePool(int capacity, Rng rng) : capacity_(capacity), rng_(rng) {}

  nn::Tensor<T> query(const nn::Tensor<T>& image) {
    if (capacity_ <= 0) return image;
    if (static_cast<int>(pool_.size()) < capacity_) {
      pool_.push_back(image);
      return image;
    }
    if (rng_.uniform() < 0.5) {
      const auto idx = static_cast<std::size_t>(rng_.below(pool_.size()));
      nn::Tensor<T> old = pool_[idx];
      pool_[idx] = image;
      return old;
    }
    return image;
  }

 private:
  int capacity_;
  Rng rng_;
  std::vector<nn::Tensor<T>> pool_;
};

struct SlicePool {
  std::vector<const Slice2d*> slices;
  int rows = 0, cols = 0;
};

inline SlicePool flatten_pool(const std::vector<SliceStack>& stacks, const char* domain) {
  SlicePool pool;
  for (const auto& st : stacks)
    for (const auto& s : st.slices) pool.slices.push_back(&s);
  if (pool.slices.empty())
    throw EmptyPool(std::string("no training slices for domain ") + domain);
  pool.rows = pool.slices.front()->rows;
  pool.cols = pool.slices.front()->cols;
  for (const auto* s : pool.slices)
    if (s->rows != pool.rows || s->cols != pool.cols)
      throw ShapeIncompatible("training slices must share one shape");
  return pool;
}

}  // namespace detail

/// Alternating least-squares adversarial training of the two generator /
/// discriminator pairs, deterministic in (pools, config, seed). Pools are
/// expected to contain healthy-category slices only; the caller enforces
/// that and records which cases were consumed.
inline PssTrainResult train_pss(const std::vector<SliceStack>& domain_x,
                                const std::vector<SliceStack>& domain_y,
                                const PssTrainConfig& cfg) {
  cfg.validate();
  const auto pool_x = detail::flatten_pool(domain_x, "X");
  const auto pool_y = detail::flatten_pool(domain_y, "Y");
  if (pool_x.rows != pool_y.rows || pool_x.cols != pool_y.cols)
    throw ShapeIncompatible("domain X and Y slices must share one shape");
  if (pool_x.rows % 4 || pool_x.cols % 4)
    throw ShapeIncompatible("slice dims must be divisible by 4");

  PssArch arch = cfg.arch;
  arch.slice_rows = pool_x.rows;
  arch.slice_cols = pool_x.cols;

  Rng rng(cfg.seed);
  PssTrainResult result{make_pss_params(arch, rng.next_u64()), {}};
  PssParams& m = result.params;

  auto g_params = m.generator_params();
  auto d_params = m.discriminator_params();
  nn::Adam<float> opt_g(cfg.learning_rate, 0.5, 0.999);
  nn::Adam<float> opt_d(cfg.learning_rate, 0.5, 0.999);
  detail::ImagePool<float> hist_x(cfg.history_pool, rng.fork(1));
  detail::ImagePool<float> hist_y(cfg.history_pool, rng.fork(2));

  using nn::Tensor;
  const double inv_b = 1.0 / cfg.batch_size;

  for (int it = 0; it < cfg.iterations; ++it) {
    // Linear learning-rate decay over the second half of the budget.
    const int half = cfg.iterations / 2;
    const double lr_scale =
        (it < half || cfg.iterations == half)
            ? 1.0
            : static_cast<double>(cfg.iterations - it) / static_cast<double>(cfg.iterations - half);

    std::vector<Tensor<float>> xs, ys;
    for (int b = 0; b < cfg.batch_size; ++b) {
      xs.push_back(detail::slice_to_tensor<float>(*pool_x.slices[rng.below(pool_x.slices.size())]));
      ys.push_back(detail::slice_to_tensor<float>(*pool_y.slices[rng.below(pool_y.slices.size())]));
    }

    // Generator phase. Each additive loss term runs forward then backward
    // immediately, so per-layer caches stay coherent.
    nn::zero_grads(g_params);
    double cycle_acc = 0.0, identity_acc = 0.0;
    std::vector<Tensor<float>> fakes_y, fakes_x;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const Tensor<float>& x = xs[static_cast<std::size_t>(b)];
      const Tensor<float>& y = ys[static_cast<std::size_t>(b)];

      {  // X -> Y -> X: adversarial on D_Y plus forward cycle.
        Tensor<float> fake_y = m.gen_x_to_y.forward(x);
        fakes_y.push_back(fake_y);
        Tensor<float> score = m.disc_y.forward(fake_y);
        Tensor<float> dscore({1});
        dscore.data[0] = static_cast<float>(2.0 * (score.data[0] - 1.0) * inv_b);
        Tensor<float> dfake = m.disc_y.backward(dscore, /*accumulate_param_grads=*/false);

        Tensor<float> rec_x = m.gen_y_to_x.forward(fake_y);
        cycle_acc += nn::l1_mean_diff(rec_x, x);
        dfake += m.gen_y_to_x.backward(
            nn::l1_mean_diff_grad(rec_x, x, cfg.lambda_cycle * inv_b));
        m.gen_x_to_y.backward(dfake);
      }
      {  // Y -> X -> Y.
        Tensor<float> fake_x = m.gen_y_to_x.forward(y);
        fakes_x.push_back(fake_x);
        Tensor<float> score = m.disc_x.forward(fake_x);
        Tensor<float> dscore({1});
        dscore.data[0] = static_cast<float>(2.0 * (score.data[0] - 1.0) * inv_b);
        Tensor<float> dfake = m.disc_x.backward(dscore, /*accumulate_param_grads=*/false);

        Tensor<float> rec_y = m.gen_x_to_y.forward(fake_x);
        cycle_acc += nn::l1_mean_diff(rec_y, y);
        dfake += m.gen_x_to_y.backward(
            nn::l1_mean_diff_grad(rec_y, y, cfg.lambda_cycle * inv_b));
        m.gen_y_to_x.backward(dfake);
      }
      if (cfg.lambda_identity > 0.0) {
        Tensor<float> id_x = m.gen_y_to_x.forward(x);
        identity_acc += nn::l1_mean_diff(id_x, x);
        m.gen_y_to_x.backward(nn::l1_mean_diff_grad(id_x, x, cfg.lambda_identity * inv_b));
        Tensor<float> id_y = m.gen_x_to_y.forward(y);
        identity_acc += nn::l1_mean_diff(id_y, y);
        m.gen_x_to_y.backward(nn::l1_mean_diff_grad(id_y, y, cfg.lambda_identity * inv_b));
      }
    }
    opt_g.step(g_params, lr_scale);

    // Discriminator phase, on real samples and history-pooled fakes.
    nn::zero_grads(d_params);
    std::vector<double> real_y, fake_y_scores, real_x, fake_x_scores;
    for (int b = 0; b < cfg.batch_size; ++b) {
      auto d_pass = [&](nn::Sequential<float>& disc, const Tensor<float>& input, double target,
                        std::vector<double>& scores) {
        Tensor<float> s = disc.forward(input);
        scores.push_back(static_cast<double>(s.data[0]));
        Tensor<float> ds({1});
        ds.data[0] = static_cast<float>(2.0 * (s.data[0] - target) * inv_b);
        disc.backward(ds);
      };
      d_pass(m.disc_y, ys[static_cast<std::size_t>(b)], 1.0, real_y);
      d_pass(m.disc_y, hist_y.query(fakes_y[static_cast<std::size_t>(b)]), 0.0, fake_y_scores);
      d_pass(m.disc_x, xs[static_cast<std::size_t>(b)], 1.0, real_x);
      d_pass(m.disc_x, hist_x.query(fakes_x[static_cast<std::size_t>(b)]), 0.0, fake_x_scores);
    }
    opt_d.step(d_params, lr_scale);

    PssLossRow row;
    row.iteration = it;
    row.adv_y = adversarial_loss(real_y, fake_y_scores);
    row.adv_x = adversarial_loss(real_x, fake_x_scores);
    row.cycle = cycle_acc * inv_b;
    row.identity = identity_acc * inv_b;
    row.total = total_pss_loss(row.adv_y, row.adv_x, row.cycle, row.identity, cfg);
    result.log.push_back(row);
    if (!std::isfinite(row.total))
      throw NonFiniteLoss("PSS training diverged at iteration " + std::to_string(it));
    m.iterations_done = it + 1;
  }
  return result;
}

/// Slice-wise standardization of a full volume through the trained G_X.
/// Shape and mask are preserved; intensities are clamped to [0, 255].
inline Volume apply_pss(const Volume& v, PssParams& params, Axis axis = Axis::coronal) {
  SliceStack stack = extract_slices(v, axis);
  for (auto& s : stack.slices) s = generator_forward(s, params.gen_y_to_x);
  Volume out = reassemble(stack);
  out.mask = v.mask;
  return out;
}

}  // namespace dipss
