#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mscsa/core/error.hpp"
#include "mscsa/data/volume.hpp"

namespace mscsa::eval {

using data::LabelMask;

namespace detail {

inline void check_extents(const LabelMask& a, const LabelMask& b, const char* what) {
  if (a.extents() != b.extents()) throw DimensionError(std::string(what) + ": mask extents differ");
}

}  // namespace detail

/// 2|P & G| / (|P| + |G|); two empty masks score 1.
inline double dice_score(const LabelMask& pred, const LabelMask& gt) {
  detail::check_extents(pred, gt, "dice_score");
  std::size_t inter = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) inter += pred[i] & gt[i];
  const std::size_t denom = pred.lesion_volume() + gt.lesion_volume();
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(denom);
}

struct Components {
  std::vector<std::uint32_t> labels;  // 0 = background, 1..count in first-voxel scan order
  std::size_t count = 0;
  std::vector<std::size_t> sizes;     // sizes[l - 1] for label l
};

/// 26-connected labelling by flood fill.
inline Components connected_components(const LabelMask& mask) {
  const auto e = mask.extents();
  Components out;
  out.labels.assign(mask.size(), 0);
  std::vector<std::size_t> stack;
  for (std::size_t seed = 0; seed < mask.size(); ++seed) {
    if (!mask[seed] || out.labels[seed] != 0) continue;
    const auto label = static_cast<std::uint32_t>(++out.count);
    std::size_t size = 0;
    out.labels[seed] = label;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t v = stack.back();
      stack.pop_back();
      ++size;
      const std::array<std::size_t, 3> c{v / (e[1] * e[2]), (v / e[2]) % e[1], v % e[2]};
      for (int dx = -1; dx <= 1; ++dx)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dz = -1; dz <= 1; ++dz) {
            const std::array<std::int64_t, 3> n{static_cast<std::int64_t>(c[0]) + dx,
                                                static_cast<std::int64_t>(c[1]) + dy,
                                                static_cast<std::int64_t>(c[2]) + dz};
            bool inside = true;
            for (int a = 0; a < 3; ++a) inside = inside && n[a] >= 0 && n[a] < static_cast<std::int64_t>(e[a]);
            if (!inside) continue;
            const auto w = data::voxel_index(e, n[0], n[1], n[2]);
            if (mask[w] && out.labels[w] == 0) {
              out.labels[w] = label;
              stack.push_back(w);
            }
          }
    }
    out.sizes.push_back(size);
  }
  return out;
}

struct LesionF1 {
  std::size_t tp = 0, fp = 0, fn = 0;
  double f1 = 1.0;
};

inline double f1_from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
  const std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

/// Lesion-wise matching: a ground-truth component counts as found when any
/// predicted voxel touches it; a predicted component touching no lesion is a
/// false positive.
inline LesionF1 lesion_f1(const LabelMask& pred, const LabelMask& gt) {
  detail::check_extents(pred, gt, "lesion_f1");
  const auto pc = connected_components(pred);
  const auto gc = connected_components(gt);
  std::vector<bool> gt_hit(gc.count, false), pred_hit(pc.count, false);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pc.labels[i] != 0 && gc.labels[i] != 0) {
      gt_hit[gc.labels[i] - 1] = true;
      pred_hit[pc.labels[i] - 1] = true;
    }
  }
  LesionF1 r;
  for (bool h : gt_hit) (h ? r.tp : r.fn) += 1;
  for (bool h : pred_hit) r.fp += h ? 0 : 1;
  r.f1 = f1_from_counts(r.tp, r.fp, r.fn);
  return r;
}

}  // namespace mscsa::eval
