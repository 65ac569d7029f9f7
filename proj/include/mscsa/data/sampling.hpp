#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "mscsa/core/rng.hpp"
#include "mscsa/data/volume.hpp"

namespace mscsa::data {

inline constexpr double kDefaultForegroundBias = 1.0 / 3.0;

struct PatchPair {
  Volume image;
  LabelMask mask;
};

using Origin = std::array<std::int64_t, 3>;

/// Copies the box [origin, origin + patch) out of the volume; voxels outside
/// the volume read as zero.
inline PatchPair extract_patch(const Volume& v, const LabelMask& m, const Origin& origin, const Triple& patch) {
  if (v.extents != m.extents()) throw DimensionError("extract_patch: volume/mask extents differ");
  const std::size_t n = voxel_count(patch);
  std::vector<float> img(n, 0.0f);
  std::vector<std::uint8_t> lab(n, 0);
  const auto& e = v.extents;
  for (std::size_t i = 0; i < patch[0]; ++i) {
    const auto si = origin[0] + static_cast<std::int64_t>(i);
    if (si < 0 || si >= static_cast<std::int64_t>(e[0])) continue;
    for (std::size_t j = 0; j < patch[1]; ++j) {
      const auto sj = origin[1] + static_cast<std::int64_t>(j);
      if (sj < 0 || sj >= static_cast<std::int64_t>(e[1])) continue;
      for (std::size_t k = 0; k < patch[2]; ++k) {
        const auto sk = origin[2] + static_cast<std::int64_t>(k);
        if (sk < 0 || sk >= static_cast<std::int64_t>(e[2])) continue;
        const auto src = voxel_index(e, static_cast<std::size_t>(si), static_cast<std::size_t>(sj),
                                     static_cast<std::size_t>(sk));
        const auto dst = voxel_index(patch, i, j, k);
        img[dst] = v.voxels[src];
        lab[dst] = m[src];
      }
    }
  }
  return {Volume(patch, std::move(img), v.spacing), LabelMask(patch, std::move(lab), m.spacing)};
}

/// Origin placing `center` in the middle of the patch, clamped so the patch
/// stays inside the volume when it fits and is centred on it otherwise.
inline Origin patch_origin(const Triple& extents, const Triple& patch, const std::array<std::size_t, 3>& center) {
  Origin o{};
  for (int a = 0; a < 3; ++a) {
    const auto ext = static_cast<std::int64_t>(extents[a]);
    const auto p = static_cast<std::int64_t>(patch[a]);
    const std::int64_t lo = std::min<std::int64_t>(0, (ext - p) / 2);
    const std::int64_t hi = ext - p >= 0 ? ext - p : (ext - p) / 2;
    o[a] = std::clamp(static_cast<std::int64_t>(center[a]) - p / 2, lo, hi);
  }
  return o;
}

/// With probability foreground_bias (and a non-empty mask) the patch is
/// centred on a uniformly chosen lesion voxel; otherwise on a uniform voxel.
inline PatchPair sample_patch(const Volume& v, const LabelMask& m, const Triple& patch, double foreground_bias,
                              Rng& rng) {
  std::array<std::size_t, 3> center{};
  const bool foreground = m.lesion_volume() > 0 && rng.bernoulli(foreground_bias);
  if (foreground) {
    std::size_t target = rng.index(m.lesion_volume());
    std::size_t flat = 0;
    for (; flat < m.size(); ++flat) {
      if (m[flat] && target-- == 0) break;
    }
    const auto& e = m.extents();
    center = {flat / (e[1] * e[2]), (flat / e[2]) % e[1], flat % e[2]};
  } else {
    for (int a = 0; a < 3; ++a) center[a] = rng.index(v.extents[a]);
  }
  return extract_patch(v, m, patch_origin(v.extents, patch, center), patch);
}

inline PatchPair flip(const PatchPair& p, const std::array<bool, 3>& axes) {
  const auto& e = p.image.extents;
  const std::size_t n = voxel_count(e);
  std::vector<float> img(n);
  std::vector<std::uint8_t> lab(n);
  for (std::size_t i = 0; i < e[0]; ++i)
    for (std::size_t j = 0; j < e[1]; ++j)
      for (std::size_t k = 0; k < e[2]; ++k) {
        const auto src = voxel_index(e, axes[0] ? e[0] - 1 - i : i, axes[1] ? e[1] - 1 - j : j,
                                     axes[2] ? e[2] - 1 - k : k);
        const auto dst = voxel_index(e, i, j, k);
        img[dst] = p.image.voxels[src];
        lab[dst] = p.mask[src];
      }
  return {Volume(e, std::move(img), p.image.spacing), LabelMask(e, std::move(lab), p.mask.spacing)};
}

/// Independent flips per axis with probability 0.5 each.
inline PatchPair augment(const PatchPair& p, Rng& rng) {
  std::array<bool, 3> axes{};
  for (auto& a : axes) a = rng.bernoulli(0.5);
  return flip(p, axes);
}

}  // namespace mscsa::data
