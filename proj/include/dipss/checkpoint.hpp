#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dipss/common.hpp"
#include "dipss/embedder.hpp"
#include "dipss/pss.hpp"

namespace dipss {

/// Checkpoint container: a single binary archive holding a JSON metadata
/// document plus named flat float32 parameter arrays.
///
/// Layout (all integers little-endian):
///   8 bytes   magic "DPSSCKP1"
///   u32       metadata byte count M
///   M bytes   UTF-8 JSON metadata (kind, arch, iteration, seed, config_hash)
///   u32       array count K
///   per array:
///     u16       name byte count, then the name
///     u64       element count N
///     N * f32   values
///   u32       CRC-32 of everything above
///
/// Parameters round-trip bit-exactly; a truncated or edited file fails the
/// CRC and raises CorruptCheckpoint.
namespace ckpt {

struct NamedArray {
  std::string name;
  std::vector<float> values;
};

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v & 0xff));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw CorruptCheckpoint("checkpoint truncated");
  }
  std::uint16_t u16() {
    need(2);
    const std::uint16_t v = static_cast<std::uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += 8;
    return v;
  }
};

}  // namespace detail

inline void save(const std::string& path, const nlohmann::json& metadata,
                 const std::vector<NamedArray>& arrays) {
  std::vector<std::uint8_t> b;
  const char* magic = "DPSSCKP1";
  b.insert(b.end(), magic, magic + 8);
  const std::string meta = metadata.dump();
  detail::put_u32(b, static_cast<std::uint32_t>(meta.size()));
  b.insert(b.end(), meta.begin(), meta.end());
  detail::put_u32(b, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    detail::put_u16(b, static_cast<std::uint16_t>(a.name.size()));
    b.insert(b.end(), a.name.begin(), a.name.end());
    detail::put_u64(b, a.values.size());
    for (const float v : a.values) detail::put_u32(b, std::bit_cast<std::uint32_t>(v));
  }
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(b.data()), static_cast<uInt>(b.size())));
  detail::put_u32(b, crc);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw UnreadableFile("cannot write checkpoint " + path);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

inline std::pair<nlohmann::json, std::vector<NamedArray>> load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UnreadableFile("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < 16) throw CorruptCheckpoint("checkpoint too short: " + path);
  if (std::memcmp(bytes.data(), "DPSSCKP1", 8) != 0)
    throw CorruptCheckpoint("bad checkpoint magic: " + path);

  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i)
    stored_crc |= static_cast<std::uint32_t>(bytes[body + static_cast<std::size_t>(i)]) << (8 * i);
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(body)));
  if (crc != stored_crc) throw CorruptCheckpoint("checkpoint CRC mismatch: " + path);

  detail::Reader r{bytes, 8};
  const std::uint32_t meta_len = r.u32();
  r.need(meta_len);
  nlohmann::json metadata;
  try {
    metadata = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos),
                                     bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint("bad checkpoint metadata: " + std::string(e.what()));
  }
  r.pos += meta_len;

  const std::uint32_t count = r.u32();
  std::vector<NamedArray> arrays;
  arrays.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    const std::uint16_t name_len = r.u16();
    r.need(name_len);
    a.name.assign(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos),
                  bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + name_len));
    r.pos += name_len;
    const std::uint64_t n = r.u64();
    r.need(n * 4);
    a.values.resize(n);
    for (std::uint64_t k = 0; k < n; ++k) {
      std::uint32_t u = 0;
      for (int byte = 0; byte < 4; ++byte)
        u |= static_cast<std::uint32_t>(bytes[r.pos + static_cast<std::size_t>(4 * k + static_cast<std::uint64_t>(byte))])
             << (8 * byte);
      a.values[k] = std::bit_cast<float>(u);
    }
    r.pos += n * 4;
  }
  if (r.pos != body) throw CorruptCheckpoint("checkpoint has trailing bytes: " + path);
  return {std::move(metadata), std::move(arrays)};
}

template <typename T>
std::vector<NamedArray> snapshot_params(std::vector<nn::ParamRef<T>> refs) {
  std::vector<NamedArray> arrays;
  arrays.reserve(refs.size());
  for (const auto& p : refs) {
    NamedArray a;
    a.name = p.name;
    a.values.assign(p.value->begin(), p.value->end());
    arrays.push_back(std::move(a));
  }
  return arrays;
}

template <typename T>
void restore_params(std::vector<nn::ParamRef<T>> refs, const std::vector<NamedArray>& arrays) {
  if (refs.size() != arrays.size())
    throw CorruptCheckpoint("checkpoint parameter count does not match the architecture");
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (refs[i].name != arrays[i].name)
      throw CorruptCheckpoint("checkpoint parameter " + arrays[i].name + " does not match " +
                              refs[i].name);
    if (refs[i].value->size() != arrays[i].values.size())
      throw CorruptCheckpoint("checkpoint parameter size mismatch for " + arrays[i].name);
    std::copy(arrays[i].values.begin(), arrays[i].values.end(), refs[i].value->begin());
  }
}

}  // namespace ckpt

// -- Model wrappers -------------------------------------------------------------

inline void save_pss_checkpoint(PssParams& params, const std::string& path) {
  nlohmann::json meta;
  meta["kind"] = "pss";
  meta["arch"] = {{"base_width", params.arch.base_width},
                  {"n_res_blocks", params.arch.n_res_blocks},
                  {"disc_head_channels", params.arch.disc_head_channels},
                  {"slice_rows", params.arch.slice_rows},
                  {"slice_cols", params.arch.slice_cols}};
  meta["iterations"] = params.iterations_done;
  meta["seed"] = params.seed;
  meta["config_hash"] = params.config_hash;
  ckpt::save(path, meta, ckpt::snapshot_params(params.all_params()));
}

inline PssParams load_pss_checkpoint(const std::string& path) {
  const auto [meta, arrays] = ckpt::load(path);
  if (meta.value("kind", "") != "pss")
    throw CorruptCheckpoint("not a PSS checkpoint: " + path);
  PssArch arch;
  arch.base_width = meta.at("arch").at("base_width").get<int>();
  arch.n_res_blocks = meta.at("arch").at("n_res_blocks").get<int>();
  arch.disc_head_channels = meta.at("arch").at("disc_head_channels").get<int>();
  arch.slice_rows = meta.at("arch").at("slice_rows").get<int>();
  arch.slice_cols = meta.at("arch").at("slice_cols").get<int>();
  PssParams params = make_pss_params(arch, meta.value("seed", std::uint64_t{0}));
  params.iterations_done = meta.value("iterations", 0L);
  params.config_hash = meta.value("config_hash", "");
  ckpt::restore_params(params.all_params(), arrays);
  return params;
}

inline void save_embed_checkpoint(EmbedParams& params, const std::string& path) {
  nlohmann::json meta;
  meta["kind"] = "embed";
  meta["arch"] = {{"input_dims", params.arch.input_dims},
                  {"channels", params.arch.channels},
                  {"bottleneck_channels", params.arch.bottleneck_channels}};
  meta["epochs"] = params.epochs_done;
  meta["seed"] = params.seed;
  meta["config_hash"] = params.config_hash;
  ckpt::save(path, meta, ckpt::snapshot_params(params.nets.params()));
}

inline EmbedParams load_embed_checkpoint(const std::string& path) {
  const auto [meta, arrays] = ckpt::load(path);
  if (meta.value("kind", "") != "embed")
    throw CorruptCheckpoint("not an embedder checkpoint: " + path);
  EmbedArch arch;
  arch.input_dims = meta.at("arch").at("input_dims").get<std::array<int, 3>>();
  arch.channels = meta.at("arch").at("channels").get<std::vector<int>>();
  arch.bottleneck_channels = meta.at("arch").at("bottleneck_channels").get<int>();
  EmbedParams params = make_embed_params(arch, meta.value("seed", std::uint64_t{0}));
  params.epochs_done = meta.value("epochs", 0L);
  params.config_hash = meta.value("config_hash", "");
  ckpt::restore_params(params.nets.params(), arrays);
  return params;
}

}  // namespace dipss
