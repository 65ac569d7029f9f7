#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include "mscsa/core/error.hpp"
#include "mscsa/tensor/ops.hpp"
#include "mscsa/tensor/tensor.hpp"

namespace mscsa::training {

enum class LossKind { dice_ce, dice_topk };

inline std::string to_string(LossKind k) { return k == LossKind::dice_ce ? "dice_ce" : "dtk10"; }

inline LossKind parse_loss(const std::string& s) {
  if (s == "dice_ce") return LossKind::dice_ce;
  if (s == "dtk10" || s == "dice_topk") return LossKind::dice_topk;
  throw ConfigError("loss must be dice_ce or dtk10, got '" + s + "'");
}

struct LossConfig {
  LossKind kind = LossKind::dice_ce;
  double topk_fraction = 0.10;
  double dice_smooth = 1e-5;

  void validate() const {
    if (!(topk_fraction > 0.0 && topk_fraction <= 1.0)) throw ConfigError("topk_fraction must be in (0, 1]");
    if (!(dice_smooth > 0.0)) throw ConfigError("dice_smooth must be positive");
  }
};

namespace detail {

inline Shape label_shape(const Shape& logits) {
  if (logits.size() < 3) throw DimensionError("loss: logits must be [N, C, spatial...]");
  Shape s{logits[0]};
  s.insert(s.end(), logits.begin() + 2, logits.end());
  return s;
}

template <typename T>
void check_target(const Tensor<T>& logits, const Tensor<T>& target) {
  if (target.shape() != label_shape(logits.shape())) {
    throw DimensionError("loss: target " + mscsa::to_string(target.shape()) + " does not match logits " +
                         mscsa::to_string(logits.shape()));
  }
}

}  // namespace detail

/// Voxels kept by the top-k CE: ceil(fraction * n), at least one.
inline std::size_t topk_count(std::size_t n, double fraction) {
  const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

/// Soft Dice on the foreground (class 1) softmax channel, summed jointly
/// over the whole batch:
///
///   1 - (2 * sum(p * t) + eps) / (sum(p) + sum(t) + eps)
///
/// `target` holds class ids with shape [N, spatial...].
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, const Tensor<T>& target, double eps = 1e-5) {
  detail::check_target(logits, target);
  if (logits.dim(1) < 2) throw DimensionError("dice_loss: need at least two classes");
  auto p = ops::slice(ops::softmax(logits, 1), 1, 1, 1);
  std::vector<T> onehot(target.numel());
  for (std::size_t i = 0; i < onehot.size(); ++i) onehot[i] = target[i] == T{1} ? T{1} : T{0};
  Tensor<T> t(p.shape(), std::move(onehot));
  auto inter = ops::sum(ops::mul(p, t));
  auto denom = ops::add_scalar(ops::add(ops::sum(p), ops::sum(t)), static_cast<T>(eps));
  auto ratio = ops::div(ops::add_scalar(ops::scale(inter, T{2}), static_cast<T>(eps)), denom);
  return ops::add_scalar(ops::scale(ratio, T{-1}), T{1});
}

/// Per-voxel cross-entropy, shape [N, spatial...].
template <typename T>
Tensor<T> voxel_ce(const Tensor<T>& logits, const Tensor<T>& target) {
  detail::check_target(logits, target);
  return ops::scale(ops::select_class(ops::log_softmax(logits, 1), target), T{-1});
}

template <typename T>
Tensor<T> ce_loss(const Tensor<T>& logits, const Tensor<T>& target) {
  return ops::mean(voxel_ce(logits, target));
}

/// Mean of the largest ceil(fraction * count) per-voxel CE values.
template <typename T>
Tensor<T> topk_ce_loss(const Tensor<T>& logits, const Tensor<T>& target, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("topk_ce_loss: fraction must be in (0, 1]");
  auto ce = voxel_ce(logits, target);
  return ops::topk_mean(ce, topk_count(ce.numel(), fraction));
}

/// Dice + CE (or top-k CE), equal weights.
template <typename T>
Tensor<T> segmentation_loss(const Tensor<T>& logits, const Tensor<T>& target, const LossConfig& cfg) {
  cfg.validate();
  auto dice = dice_loss(logits, target, cfg.dice_smooth);
  auto ce = cfg.kind == LossKind::dice_ce ? ce_loss(logits, target) : topk_ce_loss(logits, target, cfg.topk_fraction);
  return ops::add(dice, ce);
}

}  // namespace mscsa::training
