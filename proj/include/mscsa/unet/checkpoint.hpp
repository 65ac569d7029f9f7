#pragma once

// Flat binary checkpoint: magic "MSCSAv1", then one record per tensor:
//   uint32 path length, path bytes, uint32 rank, rank x uint32 extents,
//   numel x float32 values. Integers and floats little-endian.
// Batch-norm running statistics are stored alongside weights; they are
// recognised on load by the ".running_" path segment.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mscsa/core/error.hpp"
#include "mscsa/data/nifti.hpp"
#include "mscsa/tensor/params.hpp"

namespace mscsa::unet {

inline constexpr char kCheckpointMagic[] = "MSCSAv1";

inline bool is_buffer_key(const std::string& key) { return key.find(".running_") != std::string::npos; }

inline std::vector<std::uint8_t> encode_checkpoint(const NetworkParams<float>& p) {
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 7);
  const auto put32 = [&](std::uint32_t v) {
    out.resize(out.size() + 4);
    data::nifti::store_le(out.data() + out.size() - 4, v);
  };
  const auto record = [&](const std::string& key, const Tensor<float>& t) {
    put32(static_cast<std::uint32_t>(key.size()));
    out.insert(out.end(), key.begin(), key.end());
    put32(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put32(static_cast<std::uint32_t>(e));
    const std::size_t at = out.size();
    out.resize(at + 4 * t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) data::nifti::store_le(out.data() + at + 4 * i, t.data()[i]);
  };
  for (const auto& [k, v] : p.weights()) record(k, v);
  for (const auto& [k, v] : p.buffers()) record(k, v);
  return out;
}

inline NetworkParams<float> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 7 || std::memcmp(bytes.data(), kCheckpointMagic, 7) != 0) {
    throw DataError("checkpoint: bad magic");
  }
  std::size_t pos = 7;
  const auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n) throw DataError("checkpoint: truncated");
  };
  const auto get32 = [&]() {
    need(4);
    const auto v = data::nifti::load<std::uint32_t>(bytes.data() + pos, false);
    pos += 4;
    return v;
  };
  NetworkParams<float> p;
  while (pos < bytes.size()) {
    const std::uint32_t len = get32();
    need(len);
    std::string key(reinterpret_cast<const char*>(bytes.data() + pos), len);
    pos += len;
    const std::uint32_t rank = get32();
    if (rank > 8) throw DataError("checkpoint: implausible rank for '" + key + "'");
    Shape shape(rank);
    for (auto& e : shape) e = get32();
    const std::size_t n = numel(shape);
    need(4 * n);
    std::vector<float> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = data::nifti::load<float>(bytes.data() + pos + 4 * i, false);
    pos += 4 * n;
    Tensor<float> t(std::move(shape), std::move(values));
    if (is_buffer_key(key)) {
      p.add_buffer(key, std::move(t));
    } else {
      p.add_weight(key, std::move(t));
    }
  }
  return p;
}

inline void save_checkpoint(const NetworkParams<float>& p, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(p);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline NetworkParams<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace mscsa::unet
