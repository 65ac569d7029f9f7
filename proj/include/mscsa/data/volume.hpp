#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mscsa/core/error.hpp"
#include "mscsa/tensor/ops.hpp"

namespace mscsa::data {

using ops::Triple;
using Affine = std::array<double, 16>;  // row-major 4x4

inline constexpr Affine identity_affine() {
  return {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
}

inline std::size_t voxel_count(const Triple& e) { return e[0] * e[1] * e[2]; }

/// Row-major (x slowest, z fastest), matching Tensor [H, W, D].
inline std::size_t voxel_index(const Triple& e, std::size_t i, std::size_t j, std::size_t k) {
  return (i * e[1] + j) * e[2] + k;
}

/// A 3D scalar image.
struct Volume {
  Triple extents{1, 1, 1};
  std::vector<float> voxels;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  Affine affine = identity_affine();

  Volume() = default;
  Volume(Triple ext, std::vector<float> values, std::array<double, 3> sp = {1.0, 1.0, 1.0})
      : extents(ext), voxels(std::move(values)), spacing(sp) {
    validate();
  }

  std::size_t size() const { return voxels.size(); }
  float at(std::size_t i, std::size_t j, std::size_t k) const { return voxels[voxel_index(extents, i, j, k)]; }

  void validate() const {
    for (auto e : extents) {
      if (e == 0) throw DimensionError("volume: zero extent");
    }
    for (auto s : spacing) {
      if (!(s > 0)) throw DataError("volume: spacing must be positive");
    }
    if (voxels.size() != voxel_count(extents)) throw DimensionError("volume: voxel count does not match extents");
  }
};

/// Binary lesion annotation with a cached foreground count.
class LabelMask {
 public:
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  Affine affine = identity_affine();

  LabelMask() = default;

  LabelMask(Triple extents, std::vector<std::uint8_t> voxels, std::array<double, 3> sp = {1.0, 1.0, 1.0})
      : spacing(sp), extents_(extents), voxels_(std::move(voxels)) {
    for (auto e : extents_) {
      if (e == 0) throw DimensionError("mask: zero extent");
    }
    if (voxels_.size() != voxel_count(extents_)) throw DimensionError("mask: voxel count does not match extents");
    for (auto v : voxels_) {
      if (v > 1) throw DataError("mask: values must be 0 or 1");
      lesion_volume_ += v;
    }
  }

  static LabelMask empty(Triple extents) { return LabelMask(extents, std::vector<std::uint8_t>(voxel_count(extents), 0)); }

  const Triple& extents() const { return extents_; }
  std::span<const std::uint8_t> voxels() const { return voxels_; }
  std::size_t size() const { return voxels_.size(); }
  std::uint8_t operator[](std::size_t i) const { return voxels_[i]; }
  std::uint8_t at(std::size_t i, std::size_t j, std::size_t k) const { return voxels_[voxel_index(extents_, i, j, k)]; }
  std::size_t lesion_volume() const { return lesion_volume_; }

 private:
  Triple extents_{1, 1, 1};
  std::vector<std::uint8_t> voxels_{0};
  std::size_t lesion_volume_ = 0;
};

}  // namespace mscsa::data
