#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dipss/common.hpp"
#include "dipss/nn/adam.hpp"
#include "dipss/nn/layers.hpp"
#include "dipss/nn/tensor.hpp"
#include "dipss/rng.hpp"
#include "dipss/volume.hpp"

namespace dipss {

/// Hourglass architecture: conv/ReLU/avg-pool stages down to a bottleneck
/// projection, mirrored with tri-linear upsampling. The default realizes a
/// 150-dimensional code from 80x80x96 input (4 pooling stages to 5x5x6 with
/// a single-channel projection, no flattening layer).
struct EmbedArch {
  std::array<int, 3> input_dims = {80, 80, 96};
  std::vector<int> channels = {8, 16, 32, 32};  // one entry per pooling stage
  int bottleneck_channels = 1;

  int stages() const { return static_cast<int>(channels.size()); }

  std::array<int, 3> bottleneck_dims() const {
    const int f = 1 << stages();
    return {input_dims[0] / f, input_dims[1] / f, input_dims[2] / f};
  }

  int embedding_dim() const {
    const auto b = bottleneck_dims();
    return bottleneck_channels * b[0] * b[1] * b[2];
  }

  void validate() const {
    if (channels.empty()) throw UsageError("embedder needs at least one stage");
    if (bottleneck_channels < 1) throw UsageError("bottleneck_channels must be >= 1");
    const int f = 1 << stages();
    for (const int d : input_dims)
      if (d % f != 0 || d / f < 1)
        throw UsageError("input dims must be divisible by 2^stages");
  }
};

struct EmbedTrainConfig {
  double alpha = 1.0 / 3.0;  // weight of the metric term
  double learning_rate = 1e-3;
  int batch_size = 8;
  int epochs = 20;
  std::uint64_t seed = 0;
  EmbedArch arch;

  void validate() const {
    if (alpha < 0.0) throw UsageError("alpha must be nonnegative");
    if (batch_size < 2) throw UsageError("batch size must be >= 2");
    if (epochs < 1) throw UsageError("epochs must be >= 1");
    arch.validate();
  }
};

template <typename T>
struct EmbedNets {
  nn::Sequential<T> encoder;
  nn::Sequential<T> decoder;

  std::vector<nn::ParamRef<T>> params() {
    std::vector<nn::ParamRef<T>> out;
    encoder.collect_params("encoder.", out);
    decoder.collect_params("decoder.", out);
    return out;
  }
};

template <typename T>
EmbedNets<T> build_embed_nets(const EmbedArch& arch, Rng& rng) {
  arch.validate();
  using namespace nn;
  EmbedNets<T> nets;
  int prev = 1;
  for (const int c : arch.channels) {
    nets.encoder.template emplace<Conv3d<T>>(prev, c, 3, 1, rng);
    nets.encoder.template emplace<ReLU<T>>();
    nets.encoder.template emplace<AvgPool3d<T>>();
    prev = c;
  }
  nets.encoder.template emplace<Conv3d<T>>(prev, arch.bottleneck_channels, 3, 1, rng);

  nets.decoder.template emplace<Conv3d<T>>(arch.bottleneck_channels, prev, 3, 1, rng);
  nets.decoder.template emplace<ReLU<T>>();
  for (int s = arch.stages() - 1; s >= 1; --s) {
    nets.decoder.template emplace<Upsample3d<T>>();
    nets.decoder.template emplace<Conv3d<T>>(arch.channels[static_cast<std::size_t>(s)],
                                             arch.channels[static_cast<std::size_t>(s - 1)], 3, 1,
                                             rng);
    nets.decoder.template emplace<ReLU<T>>();
  }
  nets.decoder.template emplace<Upsample3d<T>>();
  nets.decoder.template emplace<Conv3d<T>>(arch.channels[0], 1, 3, 1, rng);
  return nets;
}

/// Trained embedder plus metadata.
struct EmbedParams {
  EmbedArch arch;
  EmbedNets<float> nets;
  std::uint64_t seed = 0;
  long epochs_done = 0;
  std::string config_hash;
};

inline EmbedParams make_embed_params(const EmbedArch& arch, std::uint64_t seed) {
  Rng rng(seed);
  EmbedParams p;
  p.arch = arch;
  p.seed = seed;
  p.nets = build_embed_nets<float>(arch, rng);
  return p;
}

/// One low-dimensional code.
struct Embedding {
  std::vector<double> values;
  std::string case_id;
  int fold = -1;
};

struct StoredEmbedding {
  CaseRecord record;
  std::vector<double> values;
};
using EmbeddingStore = std::vector<StoredEmbedding>;

namespace detail {

template <typename T>
nn::Tensor<T> volume_to_unit_tensor(const Volume& v) {
  nn::Tensor<T> t({1, v.dims[0], v.dims[1], v.dims[2]});
  for (std::size_t i = 0; i < v.voxels.size(); ++i)
    t.data[i] = static_cast<T>(v.voxels[i] / 255.0f);
  return t;
}

}  // namespace detail

/// Deterministic 150-vector (by default) for a volume at the configured
/// input size.
inline Embedding encode(const Volume& v, EmbedParams& params) {
  if (v.dims != params.arch.input_dims)
    throw ShapeIncompatible("encode: volume dims do not match the embedder input size");
  const auto bott = params.nets.encoder.forward(detail::volume_to_unit_tensor<float>(v));
  Embedding e;
  e.values.assign(bott.data.begin(), bott.data.end());
  return e;
}

/// Decoder mirror; the result is clamped back to display units.
inline Volume decode(const Embedding& e, EmbedParams& params) {
  if (static_cast<int>(e.values.size()) != params.arch.embedding_dim())
    throw ShapeIncompatible("decode: embedding length does not match the architecture");
  const auto b = params.arch.bottleneck_dims();
  nn::Tensor<float> bott({params.arch.bottleneck_channels, b[0], b[1], b[2]});
  for (std::size_t i = 0; i < e.values.size(); ++i)
    bott.data[i] = static_cast<float>(e.values[i]);
  const auto y = params.nets.decoder.forward(bott);
  Volume v(params.arch.input_dims[0], params.arch.input_dims[1], params.arch.input_dims[2]);
  for (std::size_t i = 0; i < v.voxels.size(); ++i)
    v.voxels[i] = std::clamp(y.data[i] * 255.0f, 0.0f, 255.0f);
  return v;
}

/// Root-mean-square voxel error on whatever scale the inputs carry (the
/// embedder trains on [0,1]-rescaled volumes).
inline double reconstruction_loss(const Volume& v, const Volume& v_hat) {
  if (!same_dims(v, v_hat)) throw ShapeIncompatible("reconstruction_loss: dims differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < v.voxels.size(); ++i) {
    const double d = static_cast<double>(v.voxels[i]) - v_hat.voxels[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(v.voxels.size()));
}

/// One exemplar per class, classes distinct.
struct ExemplarSet {
  std::vector<std::vector<double>> exemplars;
  std::vector<int> class_ids;

  void validate() const {
    if (exemplars.size() != class_ids.size() || exemplars.size() < 2)
      throw DimensionMismatch("exemplar set needs >= 2 classes with one exemplar each");
    for (std::size_t i = 0; i < class_ids.size(); ++i)
      for (std::size_t j = i + 1; j < class_ids.size(); ++j)
        if (class_ids[i] == class_ids[j]) throw DimensionMismatch("duplicate exemplar class");
  }
};

/// Softmax over negative squared distances to the exemplars, computed with
/// max-subtraction so squared distances in the hundreds stay finite.
inline std::vector<double> metric_probability(const std::vector<double>& e,
                                              const ExemplarSet& ex) {
  ex.validate();
  const std::size_t c = ex.exemplars.size();
  std::vector<double> d2(c);
  for (std::size_t i = 0; i < c; ++i) {
    if (ex.exemplars[i].size() != e.size())
      throw DimensionMismatch("embedding and exemplar dimensions differ");
    double acc = 0.0;
    for (std::size_t k = 0; k < e.size(); ++k) {
      const double d = e[k] - ex.exemplars[i][k];
      acc += d * d;
    }
    d2[i] = acc;
  }
  const double dmin = *std::min_element(d2.begin(), d2.end());
  std::vector<double> p(c);
  double total = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    p[i] = std::exp(-(d2[i] - dmin));
    total += p[i];
  }
  for (auto& v : p) v /= total;
  return p;
}

/// Cross-entropy against the one-hot class indicator.
inline double metric_loss(const std::vector<double>& e, int true_class, const ExemplarSet& ex) {
  if (true_class < 0 || true_class >= static_cast<int>(ex.exemplars.size()))
    throw ClassOutOfRange("metric_loss: class index outside the exemplar set");
  const auto p = metric_probability(e, ex);
  return -std::log(p[static_cast<std::size_t>(true_class)]);
}

inline double cae_loss(double l_rmse, double l_dist, const EmbedTrainConfig& cfg) {
  return l_rmse + cfg.alpha * l_dist;
}

// -- Training core -------------------------------------------------------------

struct EmbedBatchStats {
  double rmse = 0.0;  // mean over the batch
  double dist = 0.0;  // mean over anchors with a usable exemplar set
  int anchors = 0;
};

namespace detail {

/// Forward + backward for one batch: reconstruction RMSE per sample plus the
/// exemplar metric term coupling the batch. Exemplar indices come from the
/// caller; when an anchor is its own class exemplar the alternate index is
/// substituted (or the anchor skips the metric term if none exists).
/// Parameter gradients accumulate into the nets.
template <typename T>
EmbedBatchStats embed_batch_backward(EmbedNets<T>& nets,
                                     const std::vector<const nn::Tensor<T>*>& inputs,
                                     const std::vector<int>& classes,
                                     const std::vector<std::array<int, 2>>& exemplar_choice,
                                     double alpha) {
  const std::size_t batch = inputs.size();
  const int n_classes = static_cast<int>(exemplar_choice.size());
  EmbedBatchStats stats;

  // Pass 1: bottleneck activations for the whole batch.
  std::vector<nn::Tensor<T>> bottlenecks(batch);
  for (std::size_t i = 0; i < batch; ++i) bottlenecks[i] = nets.encoder.forward(*inputs[i]);
  const std::size_t edim = bottlenecks.front().numel();

  // Metric-term gradients w.r.t. each embedding.
  std::vector<std::vector<double>> de(batch, std::vector<double>(edim, 0.0));
  double dist_acc = 0.0;
  int anchors = 0;
  for (std::size_t a = 0; a < batch; ++a) {
    const int t = classes[a];
    std::vector<int> ex(static_cast<std::size_t>(n_classes), -1);
    bool usable = true;
    for (int c = 0; c < n_classes; ++c) {
      int idx = exemplar_choice[static_cast<std::size_t>(c)][0];
      if (idx == static_cast<int>(a)) idx = exemplar_choice[static_cast<std::size_t>(c)][1];
      if (idx < 0) {
        usable = false;
        break;
      }
      ex[static_cast<std::size_t>(c)] = idx;
    }
    if (!usable) continue;

    std::vector<double> d2(static_cast<std::size_t>(n_classes), 0.0);
    for (int c = 0; c < n_classes; ++c) {
      const auto& eb = bottlenecks[static_cast<std::size_t>(ex[static_cast<std::size_t>(c)])];
      const auto& ea = bottlenecks[a];
      double acc = 0.0;
      for (std::size_t k = 0; k < edim; ++k) {
        const double d = static_cast<double>(ea.data[k]) - static_cast<double>(eb.data[k]);
        acc += d * d;
      }
      d2[static_cast<std::size_t>(c)] = acc;
    }
    const double dmin = *std::min_element(d2.begin(), d2.end());
    std::vector<double> p(static_cast<std::size_t>(n_classes));
    double total = 0.0;
    for (int c = 0; c < n_classes; ++c) {
      p[static_cast<std::size_t>(c)] = std::exp(-(d2[static_cast<std::size_t>(c)] - dmin));
      total += p[static_cast<std::size_t>(c)];
    }
    for (auto& v : p) v /= total;
    dist_acc += -std::log(p[static_cast<std::size_t>(t)]);
    ++anchors;

    for (int c = 0; c < n_classes; ++c) {
      // dL/d d2_c = [c == t] - p_c ; d d2_c/de_a = 2 (e_a - e_c).
      const double g = (c == t ? 1.0 : 0.0) - p[static_cast<std::size_t>(c)];
      const std::size_t exi = static_cast<std::size_t>(ex[static_cast<std::size_t>(c)]);
      const auto& ea = bottlenecks[a];
      const auto& ec = bottlenecks[exi];
      for (std::size_t k = 0; k < edim; ++k) {
        const double diff = 2.0 * (static_cast<double>(ea.data[k]) - static_cast<double>(ec.data[k]));
        de[a][k] += g * diff;
        de[exi][k] -= g * diff;
      }
    }
  }
  stats.anchors = anchors;
  stats.dist = anchors > 0 ? dist_acc / anchors : 0.0;
  const double metric_scale = anchors > 0 ? alpha / anchors : 0.0;

  // Pass 2: per-sample reconstruction plus the accumulated metric gradient,
  // re-running the encoder forward to rebuild its caches.
  double rmse_acc = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    nn::Tensor<T> bott = nets.encoder.forward(*inputs[i]);
    nn::Tensor<T> recon = nets.decoder.forward(bott);
    const auto& x = *inputs[i];
    double sq = 0.0;
    for (std::size_t k = 0; k < x.numel(); ++k) {
      const double d = static_cast<double>(recon.data[k]) - static_cast<double>(x.data[k]);
      sq += d * d;
    }
    const double rmse = std::sqrt(sq / static_cast<double>(x.numel()));
    rmse_acc += rmse;

    nn::Tensor<T> drecon(recon.shape);
    const double denom = std::max(rmse, 1e-12) * static_cast<double>(x.numel()) *
                         static_cast<double>(batch);
    for (std::size_t k = 0; k < x.numel(); ++k)
      drecon.data[k] = static_cast<T>(
          (static_cast<double>(recon.data[k]) - static_cast<double>(x.data[k])) / denom);
    nn::Tensor<T> dbott = nets.decoder.backward(drecon);
    for (std::size_t k = 0; k < edim; ++k)
      dbott.data[k] += static_cast<T>(metric_scale * de[i][k]);
    nets.encoder.backward(dbott);
  }
  stats.rmse = rmse_acc / static_cast<double>(batch);
  return stats;
}

}  // namespace detail

struct EmbedLossRow {
  int epoch;
  double rmse, dist, cae;
};

struct EmbedTrainResult {
  EmbedParams params;
  std::vector<EmbedLossRow> log;
};

namespace detail {

inline int metric_class_of(Label l) {
  if (l == Label::AD || l == Label::SYNTH_DISEASED) return 1;
  if (is_healthy(l)) return 0;
  return -1;  // excluded from training (PD)
}

}  // namespace detail

/// Minimizes reconstruction RMSE plus the exemplar metric term over the
/// two-class partition (disease vs healthy); PD-like labels never enter
/// training. Deterministic per seed.
inline EmbedTrainResult train_embedding(
    const std::vector<std::pair<const Volume*, const CaseRecord*>>& cases,
    const EmbedTrainConfig& cfg) {
  cfg.validate();

  std::vector<const Volume*> vols;
  std::vector<int> classes;
  std::array<std::vector<int>, 2> by_class;  // indices into vols
  for (const auto& [vol, rec] : cases) {
    const int c = detail::metric_class_of(rec->label);
    if (c < 0) continue;
    if (vol->dims != cfg.arch.input_dims)
      throw ShapeIncompatible("train_embedding: volume dims do not match the configured input");
    by_class[static_cast<std::size_t>(c)].push_back(static_cast<int>(vols.size()));
    vols.push_back(vol);
    classes.push_back(c);
  }
  if (by_class[0].empty() || by_class[1].empty())
    throw MissingClass("train_embedding needs at least one case per metric class");

  std::vector<nn::Tensor<float>> tensors;
  tensors.reserve(vols.size());
  for (const auto* v : vols) tensors.push_back(detail::volume_to_unit_tensor<float>(*v));

  Rng rng(cfg.seed);
  EmbedTrainResult result{make_embed_params(cfg.arch, rng.next_u64()), {}};
  auto params = result.params.nets.params();
  nn::Adam<float> opt(cfg.learning_rate);

  const int half = cfg.batch_size / 2;
  const int n_batches = std::max<int>(
      1, static_cast<int>((by_class[0].size() + by_class[1].size()) / cfg.batch_size));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order0 = by_class[0];
    auto order1 = by_class[1];
    rng.shuffle(order0);
    rng.shuffle(order1);

    double rmse_acc = 0.0, dist_acc = 0.0;
    for (int b = 0; b < n_batches; ++b) {
      std::vector<int> batch_idx;
      for (int j = 0; j < half; ++j)
        batch_idx.push_back(order0[static_cast<std::size_t>((b * half + j) % order0.size())]);
      for (int j = 0; j < cfg.batch_size - half; ++j)
        batch_idx.push_back(order1[static_cast<std::size_t>((b * (cfg.batch_size - half) + j) %
                                                            order1.size())]);

      std::vector<const nn::Tensor<float>*> inputs;
      std::vector<int> batch_classes;
      for (const int i : batch_idx) {
        inputs.push_back(&tensors[static_cast<std::size_t>(i)]);
        batch_classes.push_back(classes[static_cast<std::size_t>(i)]);
      }

      // Fresh exemplars per batch: a primary and an alternate (used when an
      // anchor would otherwise match itself) per class.
      std::vector<std::array<int, 2>> exemplar_choice(2, {-1, -1});
      for (int c = 0; c < 2; ++c) {
        std::vector<int> members;
        for (std::size_t i = 0; i < batch_classes.size(); ++i)
          if (batch_classes[i] == c) members.push_back(static_cast<int>(i));
        if (members.empty()) continue;
        const int pick = members[static_cast<std::size_t>(rng.below(members.size()))];
        int alt = -1;
        if (members.size() > 1) {
          int second = members[static_cast<std::size_t>(rng.below(members.size()))];
          while (second == pick)
            second = members[static_cast<std::size_t>(rng.below(members.size()))];
          alt = second;
        }
        exemplar_choice[static_cast<std::size_t>(c)] = {pick, alt};
      }

      nn::zero_grads(params);
      const auto stats = detail::embed_batch_backward(result.params.nets, inputs, batch_classes,
                                                      exemplar_choice, cfg.alpha);
      if (!std::isfinite(stats.rmse) || !std::isfinite(stats.dist))
        throw NonFiniteLoss("embedding training diverged at epoch " + std::to_string(epoch));
      opt.step(params);
      rmse_acc += stats.rmse;
      dist_acc += stats.dist;
    }

    EmbedLossRow row;
    row.epoch = epoch;
    row.rmse = rmse_acc / n_batches;
    row.dist = dist_acc / n_batches;
    row.cae = cae_loss(row.rmse, row.dist, cfg);
    result.log.push_back(row);
    result.params.epochs_done = epoch + 1;
  }
  return result;
}

// -- Embedding store ------------------------------------------------------------

struct EmbedAllResult {
  EmbeddingStore store;
  std::vector<std::string> skipped;  // case ids whose dims did not fit
};

inline EmbedAllResult embed_all(
    const std::vector<std::pair<const Volume*, const CaseRecord*>>& cases, EmbedParams& params) {
  EmbedAllResult out;
  for (const auto& [vol, rec] : cases) {
    try {
      Embedding e = encode(*vol, params);
      out.store.push_back({*rec, std::move(e.values)});
    } catch (const ShapeIncompatible&) {
      out.skipped.push_back(rec->case_id);
    }
  }
  return out;
}

/// JSON-lines store, one record per case. Doubles survive the round trip
/// bit-exactly.
inline void save_embedding_store(const std::string& path, const EmbeddingStore& store) {
  std::ofstream out(path);
  if (!out) throw UnreadableFile("cannot write embedding store " + path);
  for (const auto& s : store) {
    nlohmann::json j;
    j["case_id"] = s.record.case_id;
    j["subject_id"] = s.record.subject_id;
    j["dataset"] = to_string(s.record.dataset);
    j["vendor"] = to_string(s.record.vendor);
    j["label"] = to_string(s.record.label);
    j["fold"] = s.record.fold;
    j["vector"] = s.values;
    out << j.dump() << "\n";
  }
}

inline EmbeddingStore load_embedding_store(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UnreadableFile("cannot open embedding store " + path);
  EmbeddingStore store;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw UnsupportedFormat("malformed embedding store line: " + std::string(e.what()));
    }
    StoredEmbedding s;
    s.record.case_id = j.at("case_id").get<std::string>();
    s.record.subject_id = j.value("subject_id", s.record.case_id);
    s.record.dataset = dataset_from_string(j.value("dataset", "SYNTH"));
    s.record.vendor = vendor_from_string(j.value("vendor", "UNKNOWN"));
    s.record.label = label_from_string(j.value("label", "SYNTH_HEALTHY"));
    s.record.fold = j.value("fold", -1);
    s.values = j.at("vector").get<std::vector<double>>();
    store.push_back(std::move(s));
  }
  return store;
}

}  // namespace dipss
