#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mscsa/attention/mscsa.hpp"
#include "mscsa/core/rng.hpp"
#include "mscsa/data/volume.hpp"
#include "mscsa/tensor/ops.hpp"
#include "mscsa/tensor/params.hpp"
#include "mscsa/unet/config.hpp"

namespace mscsa::unet {

using attention::StageFeatureSet;
using ops::Mode;

namespace detail {

template <typename T>
void add_unit(NetworkParams<T>& p, const std::string& prefix, std::size_t j, std::size_t in_c, std::size_t out_c,
              Rng& rng) {
  const std::size_t k = ModelConfig::kKernel;
  const std::string unit = prefix + ".conv" + std::to_string(j);
  p.add_kaiming(unit + ".weight", {out_c, in_c, k, k, k}, in_c * k * k * k, rng);
  p.add_batch_norm(prefix + ".bn" + std::to_string(j), out_c);
}

/// conv 3^3 (no bias) -> batch norm -> leaky ReLU.
template <typename T>
Tensor<T> unit(const Tensor<T>& x, const NetworkParams<T>& p, const std::string& prefix, std::size_t j,
               std::size_t stride, Mode mode) {
  ops::Conv3dOptions opt;
  opt.stride = {stride, stride, stride};
  opt.padding = {1, 1, 1};
  auto y = ops::conv3d(x, p.weight(prefix + ".conv" + std::to_string(j) + ".weight"), opt);
  y = apply_batch_norm(p, prefix + ".bn" + std::to_string(j), y, mode);
  return ops::leaky_relu(y);
}

/// Two units; the residual variant adds the first unit's output to the second's.
template <typename T>
Tensor<T> block(const Tensor<T>& x, const NetworkParams<T>& p, const std::string& prefix, std::size_t stride,
                Backbone backbone, Mode mode) {
  auto y1 = unit(x, p, prefix, 0, stride, mode);
  auto y2 = unit(y1, p, prefix, 1, 1, mode);
  return backbone == Backbone::residual ? ops::add(y1, y2) : y2;
}

}  // namespace detail

inline std::string encoder_prefix(std::size_t i) { return "enc" + std::to_string(i); }
inline std::string decoder_prefix(std::size_t i) { return "dec" + std::to_string(i); }

template <typename T>
NetworkParams<T> init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  NetworkParams<T> p;
  const auto& ch = cfg.channels;
  const std::size_t S = cfg.num_stages();
  for (std::size_t i = 0; i < S; ++i) {
    const std::size_t in_c = i == 0 ? cfg.in_channels : ch[i - 1];
    detail::add_unit(p, encoder_prefix(i), 0, in_c, ch[i], rng);
    detail::add_unit(p, encoder_prefix(i), 1, ch[i], ch[i], rng);
  }
  for (std::size_t i = S - 1; i-- > 0;) {
    detail::add_unit(p, decoder_prefix(i), 0, ch[i + 1] + ch[i], ch[i], rng);
    detail::add_unit(p, decoder_prefix(i), 1, ch[i], ch[i], rng);
  }
  p.add_kaiming("head.weight", {cfg.num_classes, ch[0]}, ch[0], rng);
  p.add_constant("head.bias", {cfg.num_classes}, T{0});
  if (cfg.use_mscsa) attention::init_mscsa_params(p, ch, cfg.mscsa, rng);
  return p;
}

/// Raises ConfigError unless `p` holds exactly the tensors `cfg` needs, with matching shapes.
template <typename T>
void check_params(const NetworkParams<T>& p, const ModelConfig& cfg) {
  Rng rng(0);
  const auto ref = init_params<float>(cfg, rng);
  const auto compare = [](const auto& want, const auto& have, const char* what) {
    if (want.size() != have.size()) {
      throw ConfigError(std::string("parameters: expected ") + std::to_string(want.size()) + " " + what + ", got " +
                        std::to_string(have.size()));
    }
    for (const auto& [k, v] : want) {
      auto it = have.find(k);
      if (it == have.end()) throw ConfigError(std::string("parameters: missing ") + what + " '" + k + "'");
      if (it->second.shape() != v.shape()) {
        throw ConfigError("parameters: '" + k + "' has shape " + mscsa::to_string(it->second.shape()) + ", expected " +
                          mscsa::to_string(v.shape()));
      }
    }
  };
  compare(ref.weights(), p.weights(), "weights");
  compare(ref.buffers(), p.buffers(), "buffers");
}

template <typename T>
StageFeatureSet<T> encoder_forward(const Tensor<T>& x, const NetworkParams<T>& p, const ModelConfig& cfg,
                                   Mode mode) {
  if (x.rank() != 5) throw DimensionError("unet: expected input [N, C, H, W, D], got " + mscsa::to_string(x.shape()));
  if (x.dim(1) != cfg.in_channels) throw DimensionError("unet: input channel count mismatch");
  cfg.validate_extents({x.dim(2), x.dim(3), x.dim(4)});
  StageFeatureSet<T> fs;
  Tensor<T> h = x;
  for (std::size_t i = 0; i < cfg.num_stages(); ++i) {
    h = detail::block(h, p, encoder_prefix(i), i == 0 ? 1 : 2, cfg.backbone, mode);
    fs.stages.push_back(h);
  }
  return fs;
}

/// Decoder over (possibly fused) stage features: upsample, concat skip, two units.
template <typename T>
Tensor<T> decoder_forward(const StageFeatureSet<T>& fs, const NetworkParams<T>& p, const ModelConfig& cfg,
                          Mode mode) {
  const std::size_t S = cfg.num_stages();
  Tensor<T> h = fs.stages[S - 1];
  for (std::size_t i = S - 1; i-- > 0;) {
    const auto& skip = fs.stages[i];
    auto up = ops::resize_trilinear(h, {skip.dim(2), skip.dim(3), skip.dim(4)});
    h = detail::block(ops::concat<T>({up, skip}, 1), p, decoder_prefix(i), 1, cfg.backbone, mode);
  }
  return ops::pointwise(h, p.weight("head.weight"), p.weight("head.bias"));
}

/// Logits [N, num_classes, H, W, D]. With MSCSA on, every stage (bottleneck
/// included) passes through assemble -> block -> inject before decoding.
template <typename T>
Tensor<T> forward(const Tensor<T>& x, const NetworkParams<T>& p, const ModelConfig& cfg, Mode mode) {
  auto fs = encoder_forward(x, p, cfg, mode);
  if (cfg.use_mscsa) fs = attention::mscsa_forward(fs, p, cfg.mscsa, mode);
  return decoder_forward(fs, p, cfg, mode);
}

/// Zero mean, unit variance; a constant input maps to zeros.
inline void zscore(std::vector<float>& v) {
  if (v.empty()) return;
  double mean = 0;
  for (float x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0;
  for (float x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  const double sd = std::sqrt(var);
  const double inv = sd > 1e-8 ? 1.0 / sd : 0.0;
  for (float& x : v) x = static_cast<float>((x - mean) * inv);
}

/// Separable Gaussian importance map, sigma = extent / 8, peak 1.
inline std::vector<float> gaussian_weights(const Triple& patch) {
  std::array<std::vector<double>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    const double c = (static_cast<double>(patch[a]) - 1.0) / 2.0;
    const double sigma = std::max(static_cast<double>(patch[a]) / 8.0, 1e-3);
    axis[a].resize(patch[a]);
    for (std::size_t i = 0; i < patch[a]; ++i) {
      const double d = (static_cast<double>(i) - c) / sigma;
      axis[a][i] = std::exp(-0.5 * d * d);
    }
  }
  std::vector<float> w(data::voxel_count(patch));
  for (std::size_t i = 0; i < patch[0]; ++i)
    for (std::size_t j = 0; j < patch[1]; ++j)
      for (std::size_t k = 0; k < patch[2]; ++k) {
        // floor keeps border voxels of every window contributing
        w[data::voxel_index(patch, i, j, k)] = static_cast<float>(std::max(axis[0][i] * axis[1][j] * axis[2][k], 1e-3));
      }
  return w;
}

/// Window origins along one axis: stride round(p * (1 - overlap)), last window flush with the end.
inline std::vector<std::size_t> window_starts(std::size_t extent, std::size_t patch, double overlap) {
  if (extent <= patch) return {0};
  const auto step = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(patch * (1.0 - overlap))));
  std::vector<std::size_t> out;
  for (std::size_t s = 0; s + patch < extent; s += step) out.push_back(s);
  out.push_back(extent - patch);
  return out;
}

struct PredictOptions {
  Triple patch{32, 32, 32};
  double overlap = 0.5;
  bool normalize = true;  // per-window z-score, as in training
};

/// Sliding-window softmax probabilities [num_classes, H, W, D]. Windows run
/// in x-major order; volumes smaller than the patch are zero-padded at the
/// far end and the result cropped back.
inline Tensor<float> predict(const data::Volume& volume, const NetworkParams<float>& p, const ModelConfig& cfg,
                             const PredictOptions& opt = {}) {
  cfg.validate_extents(opt.patch);
  if (opt.overlap < 0 || opt.overlap >= 1) throw ConfigError("predict: overlap must be in [0, 1)");
  if (cfg.in_channels != 1) throw ConfigError("predict: single-channel volumes only");
  const Triple& e = volume.extents;
  const Triple& pe = opt.patch;
  const std::size_t C = cfg.num_classes, n = data::voxel_count(e), pn = data::voxel_count(pe);
  const auto weights = gaussian_weights(pe);
  std::vector<double> acc(C * n, 0.0), wsum(n, 0.0);
  const auto xs = window_starts(e[0], pe[0], opt.overlap);
  const auto ys = window_starts(e[1], pe[1], opt.overlap);
  const auto zs = window_starts(e[2], pe[2], opt.overlap);
  std::vector<float> window(pn);
  for (auto x0 : xs)
    for (auto y0 : ys)
      for (auto z0 : zs) {
        std::fill(window.begin(), window.end(), 0.0f);
        for (std::size_t i = 0; i < pe[0] && x0 + i < e[0]; ++i)
          for (std::size_t j = 0; j < pe[1] && y0 + j < e[1]; ++j)
            for (std::size_t k = 0; k < pe[2] && z0 + k < e[2]; ++k)
              window[data::voxel_index(pe, i, j, k)] = volume.voxels[data::voxel_index(e, x0 + i, y0 + j, z0 + k)];
        if (opt.normalize) zscore(window);
        Tensor<float> in({1, 1, pe[0], pe[1], pe[2]}, window);
        auto prob = ops::softmax(forward(in, p, cfg, Mode::eval), 1);
        const float* pr = prob.data().data();
        for (std::size_t i = 0; i < pe[0] && x0 + i < e[0]; ++i)
          for (std::size_t j = 0; j < pe[1] && y0 + j < e[1]; ++j)
            for (std::size_t k = 0; k < pe[2] && z0 + k < e[2]; ++k) {
              const std::size_t src = data::voxel_index(pe, i, j, k);
              const std::size_t dst = data::voxel_index(e, x0 + i, y0 + j, z0 + k);
              const double w = weights[src];
              wsum[dst] += w;
              for (std::size_t c = 0; c < C; ++c) acc[c * n + dst] += w * pr[c * pn + src];
            }
      }
  std::vector<float> out(C * n);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t v = 0; v < n; ++v) out[c * n + v] = static_cast<float>(acc[c * n + v] / wsum[v]);
  return Tensor<float>({C, e[0], e[1], e[2]}, std::move(out));
}

/// Argmax over classes; any non-background class counts as lesion.
inline data::LabelMask argmax_mask(const Tensor<float>& prob, const data::Volume& like) {
  const std::size_t C = prob.dim(0), n = prob.numel() / C;
  std::vector<std::uint8_t> m(n);
  const auto d = prob.data();
  for (std::size_t v = 0; v < n; ++v) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c) {
      if (d[c * n + v] > d[best * n + v]) best = c;
    }
    m[v] = best != 0;
  }
  data::LabelMask out(like.extents, std::move(m), like.spacing);
  out.affine = like.affine;
  return out;
}

}  // namespace mscsa::unet
