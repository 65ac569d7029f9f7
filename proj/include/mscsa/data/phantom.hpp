#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mscsa/core/error.hpp"
#include "mscsa/core/rng.hpp"
#include "mscsa/data/volume.hpp"
#include "mscsa/tensor/ops.hpp"
#include "mscsa/tensor/tensor.hpp"

namespace mscsa::data {

struct PhantomSpec {
  Triple extents{32, 32, 32};
  std::size_t min_lesions = 1;
  std::size_t max_lesions = 3;
  std::size_t min_radius = 2;
  std::size_t max_radius = 6;
  double contrast = 0.5;       // lesion intensity = background * (1 - contrast)
  double smooth_noise = 0.2;   // amplitude of the low-frequency background field
  double white_noise = 0.02;
  std::size_t noise_grid = 4;  // control points per axis of the smooth field
  std::size_t max_attempts = 32;
  std::uint64_t seed = 0;

  void validate() const {
    for (auto e : extents) {
      if (e == 0) throw ConfigError("phantom: zero extent");
    }
    if (min_radius < 1 || max_radius < min_radius) throw ConfigError("phantom: radii must satisfy 1 <= min <= max");
    if (max_lesions < min_lesions) throw ConfigError("phantom: max_lesions < min_lesions");
    if (contrast < 0 || contrast > 1) throw ConfigError("phantom: contrast must be in [0, 1]");
    if (noise_grid < 1) throw ConfigError("phantom: noise_grid must be >= 1");
  }
};

struct Ellipsoid {
  std::array<std::size_t, 3> center{};
  Triple radii{1, 1, 1};

  /// (di/rx)^2 + (dj/ry)^2 + (dk/rz)^2 <= 1, evaluated in integers.
  bool contains(std::size_t i, std::size_t j, std::size_t k) const {
    const auto d = [](std::size_t a, std::size_t b) {
      const auto v = static_cast<std::int64_t>(a) - static_cast<std::int64_t>(b);
      return v * v;
    };
    const auto rx = static_cast<std::int64_t>(radii[0] * radii[0]);
    const auto ry = static_cast<std::int64_t>(radii[1] * radii[1]);
    const auto rz = static_cast<std::int64_t>(radii[2] * radii[2]);
    return d(i, center[0]) * ry * rz + d(j, center[1]) * rx * rz + d(k, center[2]) * rx * ry <= rx * ry * rz;
  }
};

struct Phantom {
  Volume volume;
  LabelMask mask;
  std::vector<Ellipsoid> lesions;
  std::vector<std::string> warnings;
};

/// Stamps a single ellipsoid into a voxel buffer.
inline void stamp(const Triple& extents, const Ellipsoid& e, std::vector<std::uint8_t>& mask) {
  std::array<std::size_t, 3> lo{}, hi{};
  for (int a = 0; a < 3; ++a) {
    lo[a] = e.center[a] >= e.radii[a] ? e.center[a] - e.radii[a] : 0;
    hi[a] = std::min(extents[a] - 1, e.center[a] + e.radii[a]);
  }
  for (std::size_t i = lo[0]; i <= hi[0]; ++i)
    for (std::size_t j = lo[1]; j <= hi[1]; ++j)
      for (std::size_t k = lo[2]; k <= hi[2]; ++k)
        if (e.contains(i, j, k)) mask[voxel_index(extents, i, j, k)] = 1;
}

inline Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const Triple& ext = spec.extents;
  const std::size_t n = voxel_count(ext);

  const std::size_t g = spec.noise_grid;
  std::vector<double> coarse(g * g * g);
  for (auto& c : coarse) c = rng.uniform(-1.0, 1.0);
  auto field = ops::resize_trilinear(Tensor<double>({1, 1, g, g, g}, std::move(coarse)), ext);

  std::vector<float> image(n);
  for (std::size_t i = 0; i < n; ++i) {
    image[i] = static_cast<float>(1.0 + spec.smooth_noise * field[i] + spec.white_noise * rng.uniform(-1.0, 1.0));
  }

  Phantom out;
  std::vector<std::uint8_t> mask(n, 0);
  const auto count = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(spec.min_lesions),
                                                              static_cast<std::int64_t>(spec.max_lesions)));
  for (std::size_t l = 0; l < count; ++l) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < spec.max_attempts && !placed; ++attempt) {
      Ellipsoid e;
      bool fits = true;
      for (int a = 0; a < 3; ++a) {
        e.radii[a] = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(spec.min_radius),
                                                              static_cast<std::int64_t>(spec.max_radius)));
        if (2 * e.radii[a] + 1 > ext[a]) fits = false;
      }
      if (!fits) continue;
      for (int a = 0; a < 3; ++a) {
        e.center[a] = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(e.radii[a]),
                                                               static_cast<std::int64_t>(ext[a] - 1 - e.radii[a])));
      }
      stamp(ext, e, mask);
      out.lesions.push_back(e);
      placed = true;
    }
    if (!placed) {
      out.warnings.push_back("lesion " + std::to_string(l) + " skipped: no fit after " +
                             std::to_string(spec.max_attempts) + " attempts");
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i]) image[i] = static_cast<float>(image[i] * (1.0 - spec.contrast));
  }
  out.volume = Volume(ext, std::move(image));
  out.mask = LabelMask(ext, std::move(mask));
  return out;
}

}  // namespace mscsa::data
