#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mscsa/core/error.hpp"
#include "mscsa/tensor/tensor.hpp"

namespace mscsa::ops {

using Triple = std::array<std::size_t, 3>;

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMapMat = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMapMat = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                                      " vs " + to_string(b.shape()));
}

inline std::size_t prod(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t p = 1;
  for (std::size_t i = from; i < to; ++i) p *= s[i];
  return p;
}

// (outer, extent, inner) factorisation of a shape around one axis.
struct AxisSplit {
  std::size_t outer, extent, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  return {prod(s, 0, axis), s[axis], prod(s, axis + 1, s.size())};
}

inline void require_volume(const Shape& s, const char* op) {
  require(s.size() == 5, std::string(op) + ": expected [N,C,H,W,D], got " + to_string(s));
}

template <typename T>
Buffer<T>& grad_of(Node<T>& n) {
  return n.ensure_grad();
}

template <typename T, typename F, typename G>
Tensor<T> unary(const Tensor<T>& x, F forward, G derivative, const char* op) {
  Buffer<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(xd[i]);
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x},
      [derivative](Node<T>& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        auto& gi = in.grad;
        for (std::size_t i = 0; i < gi.size(); ++i) {
          gi[i] += self.grad[i] * derivative(in.data[i], self.data[i]);
        }
      },
      op);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a, b},
      [](Node<T>& self) {
        for (auto& in : self.inputs) {
          if (!in->requires_grad) continue;
          for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
        }
      },
      "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a, b},
      [](Node<T>& self) {
        auto& ia = *self.inputs[0];
        auto& ib = *self.inputs[1];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (ia.requires_grad) ia.grad[i] += self.grad[i];
          if (ib.requires_grad) ib.grad[i] -= self.grad[i];
        }
      },
      "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a, b},
      [](Node<T>& self) {
        auto& ia = *self.inputs[0];
        auto& ib = *self.inputs[1];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (ia.requires_grad) ia.grad[i] += self.grad[i] * ib.data[i];
          if (ib.requires_grad) ib.grad[i] += self.grad[i] * ia.data[i];
        }
      },
      "mul");
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "div");
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a, b},
      [](Node<T>& self) {
        auto& ia = *self.inputs[0];
        auto& ib = *self.inputs[1];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const T inv = T{1} / ib.data[i];
          if (ia.requires_grad) ia.grad[i] += self.grad[i] * inv;
          if (ib.requires_grad) ib.grad[i] -= self.grad[i] * self.data[i] * inv;
        }
      },
      "div");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary(
      x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; }, "scale");
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
  return detail::unary(
      x, [offset](T v) { return v + offset; }, [](T, T) { return T{1}; }, "add_scalar");
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { none, leaky_relu, silu };

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.01)) {
  return detail::unary(
      x, [slope](T v) { return v > T{0} ? v : v * slope; },
      [slope](T v, T) { return v > T{0} ? T{1} : slope; }, "leaky_relu");
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v / (T{1} + std::exp(-v)); },
      [](T v, T) {
        const T s = T{1} / (T{1} + std::exp(-v));
        return s * (T{1} + v * (T{1} - s));
      },
      "silu");
}

template <typename T>
Tensor<T> activate(const Tensor<T>& x, Activation kind, T slope = T(0.01)) {
  switch (kind) {
    case Activation::leaky_relu: return leaky_relu(x, slope);
    case Activation::silu: return silu(x);
    case Activation::none: break;
  }
  return x;
}

// ---------------------------------------------------------------------------
// Reductions

namespace detail {

// Mean over the entries flagged in `selected`, summed in index order. Both
// mean() and topk_mean() go through here, which makes topk_mean(x, numel)
// bit-identical to mean(x).
template <typename T>
Tensor<T> masked_mean(const Tensor<T>& x, std::vector<bool> selected, std::size_t count,
                      const char* op) {
  T acc{0};
  const auto xd = x.data();
  for (std::size_t i = 0; i < xd.size(); ++i) {
    if (selected[i]) acc += xd[i];
  }
  const T inv = T{1} / static_cast<T>(count);
  return Tensor<T>::make_result(
      Shape{1}, {acc * inv}, {x},
      [sel = std::move(selected), inv](Node<T>& self) {
        auto& in = *self.inputs[0];
        const T g = self.grad[0] * inv;
        for (std::size_t i = 0; i < in.grad.size(); ++i) {
          if (sel[i]) in.grad[i] += g;
        }
      },
      op);
}

}  // namespace detail

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc{0};
  for (T v : x.data()) acc += v;
  return Tensor<T>::make_result(
      Shape{1}, {acc}, {x},
      [](Node<T>& self) {
        auto& in = *self.inputs[0];
        for (auto& g : in.grad) g += self.grad[0];
      },
      "sum");
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return detail::masked_mean(x, std::vector<bool>(x.numel(), true), x.numel(), "mean");
}

/// Mean of the k largest entries (ties broken by lower flat index).
template <typename T>
Tensor<T> topk_mean(const Tensor<T>& x, std::size_t k) {
  const std::size_t n = x.numel();
  if (k == 0 || k > n) throw DimensionError("topk_mean: k must be in [1, numel]");
  std::vector<bool> selected(n, true);
  if (k < n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const auto xd = x.data();
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1), idx.end(),
                     [&](std::size_t a, std::size_t b) {
                       return xd[a] > xd[b] || (xd[a] == xd[b] && a < b);
                     });
    std::fill(selected.begin(), selected.end(), false);
    for (std::size_t i = 0; i < k; ++i) selected[idx[i]] = true;
  }
  return detail::masked_mean(x, std::move(selected), k, "topk_mean");
}

/// Sums out one axis (the axis is removed; a rank-1 input gives shape [1]).
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis) {
  detail::require(axis < x.rank(), "sum_axis: axis out of range");
  const auto sp = detail::split_axis(x.shape(), axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i != axis) out_shape.push_back(x.dim(i));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Buffer<T> out(sp.outer * sp.inner, T{0});
  const auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += xd[(o * sp.extent + e) * sp.inner + i];
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), {x},
      [sp](Node<T>& self) {
        auto& in = *self.inputs[0];
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t e = 0; e < sp.extent; ++e)
            for (std::size_t i = 0; i < sp.inner; ++i)
              in.grad[(o * sp.extent + e) * sp.inner + i] += self.grad[o * sp.inner + i];
      },
      "sum_axis");
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(numel(shape) == x.numel(),
                  "reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  Buffer<T> out(x.data().begin(), x.data().end());
  return Tensor<T>::make_result(
      std::move(shape), std::move(out), {x},
      [](Node<T>& self) {
        auto& in = *self.inputs[0];
        for (std::size_t i = 0; i < in.grad.size(); ++i) in.grad[i] += self.grad[i];
      },
      "reshape");
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  detail::require(perm.size() == r, "permute: permutation rank mismatch");
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    detail::require(p < r && !seen[p], "permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * x.dim(i);
  // source offset for each destination element, computed once and reused in backward
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[perm[i]];
    src[flat] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  Buffer<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[src[i]];
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), {x},
      [src = std::move(src)](Node<T>& self) {
        auto& in = *self.inputs[0];
        for (std::size_t i = 0; i < src.size(); ++i) in.grad[src[i]] += self.grad[i];
      },
      "permute");
}

/// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require(x.rank() >= 2, "transpose: rank < 2");
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
  return permute(x, perm);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no tensors");
  const Shape& ref = parts[0].shape();
  detail::require(axis < ref.size(), "concat: axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == ref.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis) {
        detail::require(p.dim(i) == ref[i], "concat: extent mismatch " + to_string(p.shape()) +
                                                " vs " + to_string(ref));
      }
    }
    out_shape[axis] += p.dim(axis);
  }
  const std::size_t outer = detail::prod(ref, 0, axis);
  const std::size_t inner = detail::prod(ref, axis + 1, ref.size());
  const std::size_t total = out_shape[axis];
  Buffer<T> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t ext = p.dim(axis);
    const auto pd = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * ext * inner), ext * inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * inner));
    }
    offset += ext;
  }
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), parts,
      [outer, inner, total, offsets = std::move(offsets), axis](Node<T>& self) {
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
          auto& in = *self.inputs[k];
          if (!in.requires_grad) continue;
          const std::size_t ext = in.shape[axis];
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < ext * inner; ++j)
              in.grad[o * ext * inner + j] += self.grad[(o * total + offsets[k]) * inner + j];
        }
      },
      "concat");
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  detail::require(axis < x.rank(), "slice: axis out of range");
  detail::require(length > 0 && start + length <= x.dim(axis), "slice: range out of bounds");
  const auto sp = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Buffer<T> out(numel(out_shape));
  const auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>((o * sp.extent + start) * sp.inner),
                length * sp.inner, out.begin() + static_cast<std::ptrdiff_t>(o * length * sp.inner));
  }
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), {x},
      [sp, start, length](Node<T>& self) {
        auto& in = *self.inputs[0];
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t j = 0; j < length * sp.inner; ++j)
            in.grad[(o * sp.extent + start) * sp.inner + j] += self.grad[o * length * sp.inner + j];
      },
      "slice");
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, const std::vector<std::size_t>& sizes,
                             std::size_t axis) {
  detail::require(axis < x.rank(), "split: axis out of range");
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  detail::require(total == x.dim(axis), "split: sizes sum to " + std::to_string(total) +
                                            ", axis extent is " + std::to_string(x.dim(axis)));
  std::vector<Tensor<T>> parts;
  std::size_t start = 0;
  for (auto s : sizes) {
    parts.push_back(slice(x, axis, start, s));
    start += s;
  }
  return parts;
}

// ---------------------------------------------------------------------------
// Softmax family

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  detail::require(axis < x.rank(), "softmax: axis out of range");
  const auto sp = detail::split_axis(x.shape(), axis);
  Buffer<T> out(x.numel());
  const auto xd = x.data();
  if (sp.inner == 1) {
    detail::ConstMapMat<T> xm(xd.data(), sp.outer, sp.extent);
    detail::MapMat<T> om(out.data(), sp.outer, sp.extent);
    om = (xm.colwise() - xm.rowwise().maxCoeff()).array().exp().matrix();
    om.array().colwise() /= om.rowwise().sum().array();
  }
  for (std::size_t o = 0; o < sp.outer && sp.inner != 1; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < sp.extent; ++e) mx = std::max(mx, xd[base + e * sp.inner]);
      T z{0};
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const T v = std::exp(xd[base + e * sp.inner] - mx);
        out[base + e * sp.inner] = v;
        z += v;
      }
      for (std::size_t e = 0; e < sp.extent; ++e) out[base + e * sp.inner] /= z;
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x},
      [sp](Node<T>& self) {
        auto& in = *self.inputs[0];
        if (sp.inner == 1) {
          detail::ConstMapMat<T> y(self.data.data(), sp.outer, sp.extent), gy(self.grad.data(), sp.outer, sp.extent);
          detail::MapMat<T> gx(in.grad.data(), sp.outer, sp.extent);
          const auto dot = (y.array() * gy.array()).rowwise().sum().eval();
          gx.array() += y.array() * (gy.array().colwise() - dot);
          return;
        }
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.extent * sp.inner + i;
            T dot{0};
            for (std::size_t e = 0; e < sp.extent; ++e) {
              const std::size_t k = base + e * sp.inner;
              dot += self.grad[k] * self.data[k];
            }
            for (std::size_t e = 0; e < sp.extent; ++e) {
              const std::size_t k = base + e * sp.inner;
              in.grad[k] += self.data[k] * (self.grad[k] - dot);
            }
          }
        }
      },
      "softmax");
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  detail::require(axis < x.rank(), "log_softmax: axis out of range");
  const auto sp = detail::split_axis(x.shape(), axis);
  Buffer<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < sp.extent; ++e) mx = std::max(mx, xd[base + e * sp.inner]);
      T z{0};
      for (std::size_t e = 0; e < sp.extent; ++e) z += std::exp(xd[base + e * sp.inner] - mx);
      const T lse = mx + std::log(z);
      for (std::size_t e = 0; e < sp.extent; ++e) out[base + e * sp.inner] = xd[base + e * sp.inner] - lse;
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x},
      [sp](Node<T>& self) {
        auto& in = *self.inputs[0];
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.extent * sp.inner + i;
            T gsum{0};
            for (std::size_t e = 0; e < sp.extent; ++e) gsum += self.grad[base + e * sp.inner];
            for (std::size_t e = 0; e < sp.extent; ++e) {
              const std::size_t k = base + e * sp.inner;
              in.grad[k] += self.grad[k] - std::exp(self.data[k]) * gsum;
            }
          }
        }
      },
      "log_softmax");
}

/// Picks x[n, labels[n, s], s] for every sample n and spatial index s.
/// `labels` has shape [N, spatial...] holding integral class ids.
template <typename T>
Tensor<T> select_class(const Tensor<T>& x, const Tensor<T>& labels) {
  detail::require(x.rank() >= 2, "select_class: expected [N,C,...]");
  Shape expected{x.dim(0)};
  for (std::size_t i = 2; i < x.rank(); ++i) expected.push_back(x.dim(i));
  detail::require(labels.shape() == expected,
                  "select_class: labels " + to_string(labels.shape()) + ", expected " + to_string(expected));
  const std::size_t n = x.dim(0), c = x.dim(1), s = detail::prod(x.shape(), 2, x.rank());
  std::vector<std::size_t> src(n * s);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < s; ++i) {
      const auto cls = static_cast<std::size_t>(labels[b * s + i]);
      detail::require(cls < c, "select_class: label out of range");
      src[b * s + i] = (b * c + cls) * s + i;
    }
  }
  Buffer<T> out(n * s);
  const auto xd = x.data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = xd[src[k]];
  return Tensor<T>::make_result(
      std::move(expected), std::move(out), {x},
      [src = std::move(src)](Node<T>& self) {
        auto& in = *self.inputs[0];
        for (std::size_t k = 0; k < src.size(); ++k) in.grad[src[k]] += self.grad[k];
      },
      "select_class");
}

// ---------------------------------------------------------------------------
// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n]. Rank-2 operands and batch
// extent 1 broadcast against the other side.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() >= 2 && a.rank() <= 3 && b.rank() >= 2 && b.rank() <= 3,
                  "matmul: operands must be rank 2 or 3");
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  detail::require(k == kb, "matmul: inner dimension mismatch " + to_string(a.shape()) + " x " +
                               to_string(b.shape()));
  const std::size_t ba = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t bb = b.rank() == 3 ? b.dim(0) : 1;
  detail::require(ba == bb || ba == 1 || bb == 1, "matmul: batch extents not broadcastable");
  const std::size_t batch = std::max(ba, bb);
  Shape out_shape = (a.rank() == 3 || b.rank() == 3) ? Shape{batch, m, n} : Shape{m, n};
  Buffer<T> out(batch * m * n);
  using CM = detail::ConstMapMat<T>;
  using MM = detail::MapMat<T>;
  for (std::size_t t = 0; t < batch; ++t) {
    CM am(a.begin() + (ba == 1 ? 0 : t) * m * k, m, k);
    CM bm(b.begin() + (bb == 1 ? 0 : t) * k * n, k, n);
    MM(out.data() + t * m * n, m, n).noalias() = am * bm;
  }
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), {a, b},
      [=](Node<T>& self) {
        auto& ia = *self.inputs[0];
        auto& ib = *self.inputs[1];
        for (std::size_t t = 0; t < batch; ++t) {
          CM g(self.grad.data() + t * m * n, m, n);
          const std::size_t oa = (ba == 1 ? 0 : t) * m * k;
          const std::size_t ob = (bb == 1 ? 0 : t) * k * n;
          if (ia.requires_grad) {
            MM(ia.grad.data() + oa, m, k).noalias() += g * CM(ib.data.data() + ob, k, n).transpose();
          }
          if (ib.requires_grad) {
            MM(ib.grad.data() + ob, k, n).noalias() += CM(ia.data.data() + oa, m, k).transpose() * g;
          }
        }
      },
      "matmul");
}

// ---------------------------------------------------------------------------
// 3D convolution

struct Conv3dOptions {
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};
  std::size_t groups = 1;
};

inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                      std::size_t pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace detail {

struct ConvGeometry {
  std::size_t n, cin, h, w, d;
  std::size_t cout, cin_g, cout_g, groups;
  std::size_t kh, kw, kd;
  std::size_t oh, ow, od;
  Triple stride, pad;

  std::size_t taps() const { return kh * kw * kd; }
  std::size_t in_spatial() const { return h * w * d; }
  std::size_t out_spatial() const { return oh * ow * od; }
  bool is_pointwise() const {
    return kh == 1 && kw == 1 && kd == 1 && stride == Triple{1, 1, 1} && pad == Triple{0, 0, 0};
  }
};

// Output indices o with 0 <= o*stride + tap - pad < extent form [lo, hi).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t extent, std::size_t stride,
                                                       std::size_t tap, std::size_t pad) {
  const auto first = [&](std::ptrdiff_t bound) {  // smallest o with o*stride + tap - pad >= bound
    const std::ptrdiff_t need = bound + static_cast<std::ptrdiff_t>(pad) - static_cast<std::ptrdiff_t>(tap);
    if (need <= 0) return std::size_t{0};
    return static_cast<std::size_t>((need + static_cast<std::ptrdiff_t>(stride) - 1) /
                                    static_cast<std::ptrdiff_t>(stride));
  };
  const std::size_t lo = std::min(first(0), out);
  const std::size_t hi = std::min(first(static_cast<std::ptrdiff_t>(extent)), out);
  return {lo, std::max(lo, hi)};
}

// col[(ci*K + tap), p] for the cin_g channels starting at `x`, restricted to
// output rows oh in [oh0, oh1); p counts from the first row of the slab.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col, std::size_t oh0, std::size_t oh1) {
  const std::size_t plane = g.ow * g.od, P = (oh1 - oh0) * plane;
  const std::size_t sd = g.stride[2];
  for (std::size_t ci = 0; ci < g.cin_g; ++ci) {
    const T* xc = x + ci * g.in_spatial();
    for (std::size_t a = 0; a < g.kh; ++a) {
      auto [h_lo, h_hi] = valid_range(g.oh, g.h, g.stride[0], a, g.pad[0]);
      h_lo = std::clamp(h_lo, oh0, oh1);
      h_hi = std::clamp(h_hi, h_lo, oh1);
      for (std::size_t b = 0; b < g.kw; ++b) {
        const auto [w_lo, w_hi] = valid_range(g.ow, g.w, g.stride[1], b, g.pad[1]);
        for (std::size_t c = 0; c < g.kd; ++c) {
          const auto [d_lo, d_hi] = valid_range(g.od, g.d, sd, c, g.pad[2]);
          T* dst = col + (((ci * g.kh + a) * g.kw + b) * g.kd + c) * P;
          if (h_lo >= h_hi || w_lo >= w_hi || d_lo >= d_hi) {
            std::fill_n(dst, P, T{0});
            continue;
          }
          std::fill_n(dst, (h_lo - oh0) * plane, T{0});
          for (std::size_t oh = h_lo; oh < h_hi; ++oh) {
            const std::size_t ih = oh * g.stride[0] + a - g.pad[0];
            T* row = dst + (oh - oh0) * plane;
            std::fill_n(row, w_lo * g.od, T{0});
            for (std::size_t ow = w_lo; ow < w_hi; ++ow) {
              const std::size_t iw = ow * g.stride[1] + b - g.pad[1];
              T* out = row + ow * g.od;
              const T* src = xc + (ih * g.w + iw) * g.d + (d_lo * sd + c - g.pad[2]);
              std::fill_n(out, d_lo, T{0});
              if (sd == 1) {
                std::copy_n(src, d_hi - d_lo, out + d_lo);
              } else {
                for (std::size_t od = d_lo; od < d_hi; ++od) out[od] = src[(od - d_lo) * sd];
              }
              std::fill(out + d_hi, out + g.od, T{0});
            }
            std::fill(row + w_hi * g.od, row + plane, T{0});
          }
          std::fill(dst + (h_hi - oh0) * plane, dst + P, T{0});
        }
      }
    }
  }
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  im2col(x, g, col, 0, g.oh);
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* x, std::size_t oh0, std::size_t oh1) {
  const std::size_t plane = g.ow * g.od, P = (oh1 - oh0) * plane;
  const std::size_t sd = g.stride[2];
  for (std::size_t ci = 0; ci < g.cin_g; ++ci) {
    T* xc = x + ci * g.in_spatial();
    for (std::size_t a = 0; a < g.kh; ++a) {
      auto [h_lo, h_hi] = valid_range(g.oh, g.h, g.stride[0], a, g.pad[0]);
      h_lo = std::clamp(h_lo, oh0, oh1);
      h_hi = std::clamp(h_hi, h_lo, oh1);
      for (std::size_t b = 0; b < g.kw; ++b) {
        const auto [w_lo, w_hi] = valid_range(g.ow, g.w, g.stride[1], b, g.pad[1]);
        for (std::size_t c = 0; c < g.kd; ++c) {
          const auto [d_lo, d_hi] = valid_range(g.od, g.d, sd, c, g.pad[2]);
          const T* src_row = col + (((ci * g.kh + a) * g.kw + b) * g.kd + c) * P;
          for (std::size_t oh = h_lo; oh < h_hi; ++oh) {
            const std::size_t ih = oh * g.stride[0] + a - g.pad[0];
            for (std::size_t ow = w_lo; ow < w_hi; ++ow) {
              const std::size_t iw = ow * g.stride[1] + b - g.pad[1];
              const T* src = src_row + ((oh - oh0) * g.ow + ow) * g.od;
              T* dst = xc + (ih * g.w + iw) * g.d + (d_lo * sd + c - g.pad[2]);
              for (std::size_t od = d_lo; od < d_hi; ++od) dst[(od - d_lo) * sd] += src[od];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* x) {
  col2im_add(col, g, x, 0, g.oh);
}

// Output rows per im2col slab: keeps the column buffer around 1 MiB.
inline std::size_t slab_rows(const ConvGeometry& g) {
  const std::size_t per_row = g.cin_g * g.taps() * g.ow * g.od;
  return std::clamp<std::size_t>((std::size_t{1} << 18) / std::max<std::size_t>(per_row, 1), 1, g.oh);
}

}  // namespace detail

/// x: [N,Cin,H,W,D], weight: [Cout,Cin/groups,kh,kw,kd], bias: [Cout] or undefined.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv3dOptions& opt = {}) {
  detail::require_volume(x.shape(), "conv3d");
  detail::require(weight.rank() == 5, "conv3d: weight must be [Cout,Cin/g,kh,kw,kd]");
  if (opt.groups == 0 || x.dim(1) % opt.groups != 0 || weight.dim(0) % opt.groups != 0) {
    throw ConfigError("conv3d: groups=" + std::to_string(opt.groups) + " must divide Cin=" +
                      std::to_string(x.dim(1)) + " and Cout=" + std::to_string(weight.dim(0)));
  }
  for (auto s : opt.stride) {
    if (s == 0) throw ConfigError("conv3d: zero stride");
  }
  detail::ConvGeometry g{};
  g.n = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.d = x.dim(4);
  g.groups = opt.groups;
  g.cout = weight.dim(0);
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.kd = weight.dim(4);
  g.stride = opt.stride;
  g.pad = opt.padding;
  detail::require(weight.dim(1) == g.cin_g, "conv3d: weight expects " + std::to_string(weight.dim(1)) +
                                                " input channels per group, input has " +
                                                std::to_string(g.cin_g));
  const Triple in_ext{g.h, g.w, g.d}, k_ext{g.kh, g.kw, g.kd};
  for (int a = 0; a < 3; ++a) {
    detail::require(k_ext[a] <= in_ext[a] + 2 * g.pad[a], "conv3d: kernel larger than padded input");
  }
  g.oh = conv_output_extent(g.h, g.kh, g.stride[0], g.pad[0]);
  g.ow = conv_output_extent(g.w, g.kw, g.stride[1], g.pad[1]);
  g.od = conv_output_extent(g.d, g.kd, g.stride[2], g.pad[2]);
  if (bias.defined()) {
    detail::require(bias.numel() == g.cout, "conv3d: bias must have Cout entries");
  }

  const std::size_t P = g.out_spatial(), K = g.cin_g * g.taps();
  const std::size_t rows = detail::slab_rows(g), plane = g.ow * g.od;
  Buffer<T> out(g.n * g.cout * P);
  Buffer<T> col(g.is_pointwise() ? 0 : K * rows * plane);
  using CM = detail::ConstMapMat<T>;
  using MM = detail::MapMat<T>;
  using SM = detail::StridedMapMat<T>;
  using CSM = detail::ConstStridedMapMat<T>;
  for (std::size_t b = 0; b < g.n; ++b) {
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      const T* xin = x.begin() + (b * g.cin + grp * g.cin_g) * g.in_spatial();
      CM wm(weight.begin() + grp * g.cout_g * K, g.cout_g, K);
      T* yout = out.data() + (b * g.cout + grp * g.cout_g) * P;
      if (g.is_pointwise()) {
        MM(yout, g.cout_g, P).noalias() = wm * CM(xin, K, P);
        continue;
      }
      for (std::size_t oh0 = 0; oh0 < g.oh; oh0 += rows) {
        const std::size_t oh1 = std::min(g.oh, oh0 + rows), Pc = (oh1 - oh0) * plane;
        detail::im2col(xin, g, col.data(), oh0, oh1);
        SM(yout + oh0 * plane, g.cout_g, Pc, Eigen::OuterStride<>(P)).noalias() = wm * CM(col.data(), K, Pc);
      }
    }
    if (bias.defined()) {
      for (std::size_t co = 0; co < g.cout; ++co) {
        T* y = out.data() + (b * g.cout + co) * P;
        const T bv = bias[co];
        for (std::size_t p = 0; p < P; ++p) y[p] += bv;
      }
    }
  }

  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor<T>::make_result(
      Shape{g.n, g.cout, g.oh, g.ow, g.od}, std::move(out), std::move(inputs),
      [g](Node<T>& self) {
        auto& ix = *self.inputs[0];
        auto& iw = *self.inputs[1];
        const std::size_t P = g.out_spatial(), K = g.cin_g * g.taps();
        const std::size_t rows = detail::slab_rows(g), plane = g.ow * g.od;
        Buffer<T> col(g.is_pointwise() ? 0 : K * rows * plane);
        for (std::size_t b = 0; b < g.n; ++b) {
          for (std::size_t grp = 0; grp < g.groups; ++grp) {
            const std::size_t xoff = (b * g.cin + grp * g.cin_g) * g.in_spatial();
            const T* gyp = self.grad.data() + (b * g.cout + grp * g.cout_g) * P;
            CM wm(iw.data.data() + grp * g.cout_g * K, g.cout_g, K);
            MM wgrad(iw.requires_grad ? iw.grad.data() + grp * g.cout_g * K : nullptr, g.cout_g, K);
            if (g.is_pointwise()) {
              CM gy(gyp, g.cout_g, P);
              if (iw.requires_grad) wgrad.noalias() += gy * CM(ix.data.data() + xoff, K, P).transpose();
              if (ix.requires_grad) MM(ix.grad.data() + xoff, K, P).noalias() += wm.transpose() * gy;
              continue;
            }
            for (std::size_t oh0 = 0; oh0 < g.oh; oh0 += rows) {
              const std::size_t oh1 = std::min(g.oh, oh0 + rows), Pc = (oh1 - oh0) * plane;
              CSM gy(gyp + oh0 * plane, g.cout_g, Pc, Eigen::OuterStride<>(P));
              if (iw.requires_grad) {
                detail::im2col(ix.data.data() + xoff, g, col.data(), oh0, oh1);
                wgrad.noalias() += gy * CM(col.data(), K, Pc).transpose();
              }
              if (ix.requires_grad) {
                MM(col.data(), K, Pc).noalias() = wm.transpose() * gy;
                detail::col2im_add(col.data(), g, ix.grad.data() + xoff, oh0, oh1);
              }
            }
          }
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
          auto& ib = *self.inputs[2];
          for (std::size_t b = 0; b < g.n; ++b)
            for (std::size_t co = 0; co < g.cout; ++co) {
              const T* gy = self.grad.data() + (b * g.cout + co) * P;
              T acc{0};
              for (std::size_t p = 0; p < P; ++p) acc += gy[p];
              ib.grad[co] += acc;
            }
        }
      },
      "conv3d");
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Conv3dOptions& opt = {}) {
  return conv3d(x, weight, Tensor<T>{}, opt);
}

/// Per-voxel linear map. weight: [Cout, Cin], bias: [Cout] or undefined.
template <typename T>
Tensor<T> pointwise(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  detail::require_volume(x.shape(), "pointwise");
  detail::require(weight.rank() == 2 && weight.dim(1) == x.dim(1),
                  "pointwise: weight " + to_string(weight.shape()) + " does not match input channels " +
                      std::to_string(x.dim(1)));
  const std::size_t n = x.dim(0), cin = x.dim(1), cout = weight.dim(0);
  const std::size_t P = x.dim(2) * x.dim(3) * x.dim(4);
  if (bias.defined()) detail::require(bias.numel() == cout, "pointwise: bias must have Cout entries");
  Buffer<T> out(n * cout * P);
  using CM = detail::ConstMapMat<T>;
  using MM = detail::MapMat<T>;
  CM wm(weight.begin(), cout, cin);
  for (std::size_t b = 0; b < n; ++b) {
    MM ym(out.data() + b * cout * P, cout, P);
    ym.noalias() = wm * CM(x.begin() + b * cin * P, cin, P);
    if (bias.defined()) {
      for (std::size_t co = 0; co < cout; ++co) ym.row(co).array() += bias[co];
    }
  }
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor<T>::make_result(
      Shape{n, cout, x.dim(2), x.dim(3), x.dim(4)}, std::move(out), std::move(inputs),
      [=](Node<T>& self) {
        auto& ix = *self.inputs[0];
        auto& iw = *self.inputs[1];
        CM wd(iw.data.data(), cout, cin);
        for (std::size_t b = 0; b < n; ++b) {
          CM gy(self.grad.data() + b * cout * P, cout, P);
          if (iw.requires_grad) {
            MM(iw.grad.data(), cout, cin).noalias() += gy * CM(ix.data.data() + b * cin * P, cin, P).transpose();
          }
          if (ix.requires_grad) {
            MM(ix.grad.data() + b * cin * P, cin, P).noalias() += wd.transpose() * gy;
          }
          if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
            auto& ib = *self.inputs[2];
            for (std::size_t co = 0; co < cout; ++co) ib.grad[co] += gy.row(co).sum();
          }
        }
      },
      "pointwise");
}

// ---------------------------------------------------------------------------
// Resampling

namespace detail {

struct LinearTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

// align_corners=false source coordinates, clamped at the border.
inline LinearTaps linear_taps(std::size_t in, std::size_t out) {
  LinearTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in - 1);
    t.frac[i] = src - static_cast<double>(lo);
  }
  return t;
}

// Linear interpolation along the middle axis of [outer, n_in, inner] into
// [outer, taps.lo.size(), inner]; `out` is overwritten.
template <typename T>
void lerp_axis(const T* in, T* out, std::size_t outer, std::size_t n_in, std::size_t inner, const LinearTaps& t) {
  const std::size_t n_out = t.lo.size();
  for (std::size_t o = 0; o < outer; ++o) {
    const T* src = in + o * n_in * inner;
    for (std::size_t i = 0; i < n_out; ++i) {
      const T f = static_cast<T>(t.frac[i]), g = T{1} - f;
      const T* a = src + t.lo[i] * inner;
      const T* b = src + t.hi[i] * inner;
      T* dst = out + (o * n_out + i) * inner;
      for (std::size_t r = 0; r < inner; ++r) dst[r] = g * a[r] + f * b[r];
    }
  }
}

// Adjoint of lerp_axis: accumulates into `gin`.
template <typename T>
void lerp_axis_adjoint(const T* gout, T* gin, std::size_t outer, std::size_t n_in, std::size_t inner,
                       const LinearTaps& t) {
  const std::size_t n_out = t.lo.size();
  for (std::size_t o = 0; o < outer; ++o) {
    T* dst = gin + o * n_in * inner;
    for (std::size_t i = 0; i < n_out; ++i) {
      const T f = static_cast<T>(t.frac[i]), g = T{1} - f;
      const T* src = gout + (o * n_out + i) * inner;
      T* a = dst + t.lo[i] * inner;
      T* b = dst + t.hi[i] * inner;
      for (std::size_t r = 0; r < inner; ++r) a[r] += g * src[r];
      for (std::size_t r = 0; r < inner; ++r) b[r] += f * src[r];
    }
  }
}

}  // namespace detail

/// Trilinear resize of [N,C,H,W,D] to the given spatial extents (align_corners=false),
/// applied as three separable linear passes (H, then W, then D).
template <typename T>
Tensor<T> resize_trilinear(const Tensor<T>& x, const Triple& target) {
  detail::require_volume(x.shape(), "resize_trilinear");
  for (auto e : target) {
    if (e == 0) throw DimensionError("resize_trilinear: zero target extent");
  }
  const std::size_t nc = x.dim(0) * x.dim(1);
  const std::size_t H = x.dim(2), W = x.dim(3), D = x.dim(4);
  const auto [oh, ow, od] = target;
  auto th = std::make_shared<detail::LinearTaps>(detail::linear_taps(H, oh));
  auto tw = std::make_shared<detail::LinearTaps>(detail::linear_taps(W, ow));
  auto td = std::make_shared<detail::LinearTaps>(detail::linear_taps(D, od));

  Buffer<T> a(nc * oh * W * D), b(nc * oh * ow * D), out(nc * oh * ow * od);
  detail::lerp_axis(x.data().data(), a.data(), nc, H, W * D, *th);
  detail::lerp_axis(a.data(), b.data(), nc * oh, W, D, *tw);
  detail::lerp_axis(b.data(), out.data(), nc * oh * ow, D, 1, *td);
  return Tensor<T>::make_result(
      Shape{x.dim(0), x.dim(1), oh, ow, od}, std::move(out), {x},
      [=](Node<T>& self) {
        Buffer<T> gb(nc * oh * ow * D, T{0}), ga(nc * oh * W * D, T{0});
        detail::lerp_axis_adjoint(self.grad.data(), gb.data(), nc * oh * ow, D, 1, *td);
        detail::lerp_axis_adjoint(gb.data(), ga.data(), nc * oh, W, D, *tw);
        detail::lerp_axis_adjoint(ga.data(), self.inputs[0]->grad.data(), nc, H, W * D, *th);
      },
      "resize_trilinear");
}

/// Average pooling with window == stride == factor per axis. Extents must divide.
template <typename T>
Tensor<T> downsample_avg(const Tensor<T>& x, const Triple& factor) {
  detail::require_volume(x.shape(), "downsample_avg");
  for (int a = 0; a < 3; ++a) {
    if (factor[a] == 0) throw DimensionError("downsample_avg: zero factor");
    detail::require(x.dim(2 + a) % factor[a] == 0, "downsample_avg: extent " + std::to_string(x.dim(2 + a)) +
                                                       " not divisible by " + std::to_string(factor[a]));
  }
  const std::size_t nc = x.dim(0) * x.dim(1);
  const std::size_t H = x.dim(2), W = x.dim(3), D = x.dim(4);
  const std::size_t oh = H / factor[0], ow = W / factor[1], od = D / factor[2];
  const T inv = T{1} / static_cast<T>(factor[0] * factor[1] * factor[2]);
  auto visit = [=](auto&& fn) {
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j)
          for (std::size_t k = 0; k < od; ++k) {
            const std::size_t o = c * oh * ow * od + (i * ow + j) * od + k;
            for (std::size_t a = 0; a < factor[0]; ++a)
              for (std::size_t b = 0; b < factor[1]; ++b)
                for (std::size_t e = 0; e < factor[2]; ++e)
                  fn(o, c * H * W * D + ((i * factor[0] + a) * W + j * factor[1] + b) * D + k * factor[2] + e);
          }
  };
  Buffer<T> out(nc * oh * ow * od, T{0});
  const auto xd = x.data();
  visit([&](std::size_t o, std::size_t i) { out[o] += xd[i]; });
  for (auto& v : out) v *= inv;
  return Tensor<T>::make_result(
      Shape{x.dim(0), x.dim(1), oh, ow, od}, std::move(out), {x},
      [visit, inv](Node<T>& self) {
        auto& in = *self.inputs[0];
        visit([&](std::size_t o, std::size_t i) { in.grad[i] += self.grad[o] * inv; });
      },
      "downsample_avg");
}

// ---------------------------------------------------------------------------
// Batch normalization over every non-channel axis of [N,C,...].

enum class Mode { train, eval };

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
};

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T> running_mean, Tensor<T> running_var, Mode mode,
                     const BatchNormOptions& opt = {}) {
  detail::require(x.rank() >= 2, "batch_norm: expected [N,C,...]");
  const std::size_t N = x.dim(0), C = x.dim(1), S = detail::prod(x.shape(), 2, x.rank());
  detail::require(gamma.numel() == C && beta.numel() == C && running_mean.numel() == C &&
                      running_var.numel() == C,
                  "batch_norm: parameter channel count does not match input C=" + std::to_string(C));
  const std::size_t M = N * S;
  Buffer<T> mean_c(C), invstd(C);
  const auto xd = x.data();
  if (mode == Mode::train) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0;
      for (std::size_t b = 0; b < N; ++b)
        for (std::size_t i = 0; i < S; ++i) s += xd[(b * C + c) * S + i];
      const double mu = s / static_cast<double>(M);
      double ss = 0;
      for (std::size_t b = 0; b < N; ++b)
        for (std::size_t i = 0; i < S; ++i) {
          const double dv = xd[(b * C + c) * S + i] - mu;
          ss += dv * dv;
        }
      const double var = ss / static_cast<double>(M);
      mean_c[c] = static_cast<T>(mu);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
      const double unbiased = M > 1 ? ss / static_cast<double>(M - 1) : var;
      rm[c] = static_cast<T>((1.0 - opt.momentum) * rm[c] + opt.momentum * mu);
      rv[c] = static_cast<T>((1.0 - opt.momentum) * rv[c] + opt.momentum * unbiased);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean_c[c] = running_mean[c];
      invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + opt.eps));
    }
  }
  Buffer<T> out(x.numel());
  Buffer<T> xhat(x.numel());
  for (std::size_t b = 0; b < N; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (b * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        xhat[base + i] = (xd[base + i] - mean_c[c]) * invstd[c];
        out[base + i] = xhat[base + i] * gamma[c] + beta[c];
      }
    }
  const bool training = mode == Mode::train;
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), invstd = std::move(invstd)](Node<T>& self) {
        auto& ix = *self.inputs[0];
        auto& ig = *self.inputs[1];
        auto& ib = *self.inputs[2];
        for (std::size_t c = 0; c < C; ++c) {
          T sum_g{0}, sum_gx{0};
          for (std::size_t b = 0; b < N; ++b)
            for (std::size_t i = 0; i < S; ++i) {
              const std::size_t k = (b * C + c) * S + i;
              sum_g += self.grad[k];
              sum_gx += self.grad[k] * xhat[k];
            }
          if (ig.requires_grad) ig.grad[c] += sum_gx;
          if (ib.requires_grad) ib.grad[c] += sum_g;
          if (!ix.requires_grad) continue;
          const T gam = ig.data[c];
          const T scale_c = gam * invstd[c];
          const T inv_m = T{1} / static_cast<T>(M);
          for (std::size_t b = 0; b < N; ++b)
            for (std::size_t i = 0; i < S; ++i) {
              const std::size_t k = (b * C + c) * S + i;
              if (training) {
                ix.grad[k] += scale_c * (self.grad[k] - inv_m * sum_g - xhat[k] * inv_m * sum_gx);
              } else {
                ix.grad[k] += scale_c * self.grad[k];
              }
            }
        }
      },
      "batch_norm");
}

}  // namespace mscsa::ops
