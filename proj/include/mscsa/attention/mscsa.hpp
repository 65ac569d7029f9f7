#pragma once

// Multi-stage cross-scale attention (MSCSA) as a replacement for direct U-Net
// skip connections:
//
//   encoder stages --assemble--> multi-stage map [N, sum(C_i), H, W, D]
//                  --block-----> CSA, Intra-FFN, CSA, FFN (pre-norm residual), BN
//                  --inject----> per-stage (gamma_i, beta_i), x_i * (1 + gamma_i) + beta_i
//
// CSA queries come from the assembly scale only; keys and values come from
// three scales (stride 1, 2, 3 kernel-1 projections) concatenated on the
// token axis. A depthwise-conv branch on the scale-1 values (RPE) is added
// to the attention output.

#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "mscsa/core/error.hpp"
#include "mscsa/core/rng.hpp"
#include "mscsa/tensor/ops.hpp"
#include "mscsa/tensor/params.hpp"

namespace mscsa::attention {

using ops::Triple;

inline constexpr std::array<std::size_t, 3> kMspStrides{1, 2, 3};
inline constexpr std::size_t kFfnExpansion = 3;

struct MscsaConfig {
  std::size_t target_stage = 0;
  std::size_t heads = 4;
  std::size_t c_qk = 0;  // 0: total channels rounded down to a multiple of heads
  std::size_t c_v = 0;   // same rule as c_qk
  std::size_t dwconv_kernel = 3;

  /// Stage at 1/8 of the input resolution for six stages; stage 0 for two.
  static std::size_t default_target_stage(std::size_t num_stages) {
    return num_stages >= 3 ? num_stages - 3 : 0;
  }

  std::size_t qk_dim(std::size_t c_total) const { return c_qk ? c_qk : c_total / heads * heads; }
  std::size_t v_dim(std::size_t c_total) const { return c_v ? c_v : c_total / heads * heads; }

  void validate(std::size_t num_stages, std::size_t c_total) const {
    if (heads == 0) throw ConfigError("mscsa: heads must be positive");
    if (target_stage >= num_stages) {
      throw ConfigError("mscsa: target_stage " + std::to_string(target_stage) + " >= stage count " +
                        std::to_string(num_stages));
    }
    const std::size_t ck = qk_dim(c_total), cv = v_dim(c_total);
    if (ck == 0 || cv == 0) throw ConfigError("mscsa: attention dims must be positive");
    if (ck % heads != 0 || cv % heads != 0) {
      throw ConfigError("mscsa: c_qk and c_v must be divisible by heads");
    }
    if (dwconv_kernel % 2 == 0) throw ConfigError("mscsa: dwconv_kernel must be odd");
  }
};

/// Encoder feature maps, one per resolution stage, finest first.
template <typename T>
struct StageFeatureSet {
  std::vector<Tensor<T>> stages;

  std::size_t size() const { return stages.size(); }

  std::vector<std::size_t> channels() const {
    std::vector<std::size_t> c;
    for (const auto& s : stages) c.push_back(s.dim(1));
    return c;
  }

  Triple extents(std::size_t i) const { return {stages[i].dim(2), stages[i].dim(3), stages[i].dim(4)}; }

  void validate() const {
    if (stages.empty()) throw DimensionError("stage feature set is empty");
    if (stages.size() < 2) throw ConfigError("stage feature set needs at least two stages");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (stages[i].rank() != 5) throw DimensionError("stage features must be [N,C,H,W,D]");
      if (stages[i].dim(0) != stages[0].dim(0)) throw DimensionError("stages disagree on batch size");
      if (i > 0) {
        for (std::size_t a = 2; a < 5; ++a) {
          if (stages[i].dim(a) > stages[i - 1].dim(a)) {
            throw DimensionError("stage spatial extents must be non-increasing");
          }
        }
      }
    }
  }
};

/// Branch extents of the multi-scale projection: n_s = floor((n - 1) / s) + 1.
inline std::array<Triple, 3> msp_scales(std::size_t h, std::size_t w, std::size_t d) {
  std::array<Triple, 3> out{};
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t s = kMspStrides[i];
    out[i] = {(h - 1) / s + 1, (w - 1) / s + 1, (d - 1) / s + 1};
  }
  return out;
}

inline std::size_t msp_token_count(std::size_t h, std::size_t w, std::size_t d) {
  std::size_t total = 0;
  for (const auto& e : msp_scales(h, w, d)) total += e[0] * e[1] * e[2];
  return total;
}

/// Brings a feature map to the given spatial extents: average pooling when
/// every axis shrinks by an integer factor, trilinear interpolation otherwise.
template <typename T>
Tensor<T> resample_to(const Tensor<T>& x, const Triple& target) {
  const Triple src{x.dim(2), x.dim(3), x.dim(4)};
  if (src == target) return x;
  bool pool = true;
  Triple factor{};
  for (int a = 0; a < 3; ++a) {
    pool = pool && src[a] >= target[a] && src[a] % target[a] == 0;
    factor[a] = pool ? src[a] / target[a] : 1;
  }
  if (pool) return ops::downsample_avg(x, factor);
  return ops::resize_trilinear(x, target);
}

template <typename T>
Tensor<T> assemble_multistage(const StageFeatureSet<T>& fs, std::size_t target_stage) {
  if (fs.stages.empty()) throw DimensionError("assemble_multistage: empty stage list");
  fs.validate();
  if (target_stage >= fs.size()) throw ConfigError("assemble_multistage: target_stage out of range");
  const Triple target = fs.extents(target_stage);
  std::vector<Tensor<T>> parts;
  parts.reserve(fs.size());
  for (const auto& s : fs.stages) parts.push_back(resample_to(s, target));
  return ops::concat(parts, 1);
}

// ---------------------------------------------------------------------------
// Token layout helpers: [N, heads*dh, h, w, d] <-> [N*heads, h*w*d, dh]

template <typename T>
Tensor<T> volume_to_tokens(const Tensor<T>& x, std::size_t heads) {
  const std::size_t n = x.dim(0), c = x.dim(1), l = x.dim(2) * x.dim(3) * x.dim(4);
  if (c % heads != 0) throw ConfigError("volume_to_tokens: channels not divisible by heads");
  return ops::transpose(ops::reshape(x, {n * heads, c / heads, l}));
}

template <typename T>
Tensor<T> tokens_to_volume(const Tensor<T>& t, std::size_t batch, const Triple& extents) {
  const std::size_t nh = t.dim(0), dh = t.dim(2);
  if (t.dim(1) != extents[0] * extents[1] * extents[2] || nh % batch != 0) {
    throw DimensionError("tokens_to_volume: token count does not match extents");
  }
  return ops::reshape(ops::transpose(t), {batch, nh / batch * dh, extents[0], extents[1], extents[2]});
}

template <typename T>
struct MspProjection {
  Tensor<T> q;   // [N*heads, L1, c_qk/heads]
  Tensor<T> k;   // [N*heads, L,  c_qk/heads]
  Tensor<T> v;   // [N*heads, L,  c_v/heads]
  Tensor<T> v1;  // scale-1 values in volume layout [N, c_v, H, W, D], feeds the RPE
  std::size_t tokens_q = 0;
  std::size_t tokens_kv = 0;
};

template <typename T>
MspProjection<T> msp_project(const Tensor<T>& x, const NetworkParams<T>& p, const std::string& prefix,
                             const MscsaConfig& cfg) {
  if (x.rank() != 5) throw DimensionError("msp_project: expected [N,C,H,W,D]");
  const std::size_t c_total = x.dim(1);
  const auto& wq = p.weight(prefix + ".q.weight");
  if (wq.dim(1) != c_total || wq.dim(0) != cfg.qk_dim(c_total)) {
    throw DimensionError("msp_project: query projection does not match input channels / config");
  }
  MspProjection<T> out;
  out.q = volume_to_tokens(ops::pointwise(x, wq, p.weight(prefix + ".q.bias")), cfg.heads);
  std::vector<Tensor<T>> ks, vs;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t s = kMspStrides[i];
    const std::string b = prefix + ".s" + std::to_string(s);
    const ops::Conv3dOptions opt{.stride = {s, s, s}};
    auto ki = ops::conv3d(x, p.weight(b + ".k.weight"), p.weight(b + ".k.bias"), opt);
    auto vi = ops::conv3d(x, p.weight(b + ".v.weight"), p.weight(b + ".v.bias"), opt);
    if (s == 1) out.v1 = vi;
    ks.push_back(volume_to_tokens(ki, cfg.heads));
    vs.push_back(volume_to_tokens(vi, cfg.heads));
  }
  out.k = ops::concat(ks, 1);
  out.v = ops::concat(vs, 1);
  out.tokens_q = out.q.dim(1);
  out.tokens_kv = out.k.dim(1);
  return out;
}

/// softmax(Q K^T / sqrt(d_head)) for [B, Lq, d] x [B, Lk, d].
template <typename T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k) {
  if (q.rank() != 3 || k.rank() != 3 || q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) {
    throw DimensionError("attention: Q " + to_string(q.shape()) + " and K " + to_string(k.shape()) +
                         " are incompatible");
  }
  const T scale = T{1} / std::sqrt(static_cast<T>(q.dim(2)));
  return ops::softmax(ops::scale(ops::matmul(q, ops::transpose(k)), scale), 2);
}

template <typename T>
Tensor<T> cross_scale_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  if (v.rank() != 3 || v.dim(0) != k.dim(0) || v.dim(1) != k.dim(1)) {
    throw DimensionError("attention: V " + to_string(v.shape()) + " does not match K " + to_string(k.shape()));
  }
  return ops::matmul(attention_weights(q, k), v);
}

/// attn + DWConv(act(v1)), both in volume layout [N, c_v, H, W, D].
template <typename T>
Tensor<T> rpe(const Tensor<T>& attn, const Tensor<T>& v1, const Tensor<T>& dw_weight, const Tensor<T>& dw_bias,
              ops::Activation act = ops::Activation::silu) {
  if (attn.shape() != v1.shape()) throw DimensionError("rpe: attention output and V1 shapes differ");
  const std::size_t c = v1.dim(1);
  const std::size_t pad = dw_weight.dim(2) / 2;
  auto local = ops::conv3d(ops::activate(v1, act), dw_weight, dw_bias,
                           {.stride = {1, 1, 1}, .padding = {pad, pad, pad}, .groups = c});
  return ops::add(attn, local);
}

/// One cross-scale attention sublayer, [N, C, H, W, D] -> same shape.
template <typename T>
Tensor<T> csa_layer(const Tensor<T>& x, const NetworkParams<T>& p, const std::string& prefix,
                    const MscsaConfig& cfg) {
  const auto proj = msp_project(x, p, prefix, cfg);
  const Triple ext{x.dim(2), x.dim(3), x.dim(4)};
  auto attn = tokens_to_volume(cross_scale_attention(proj.q, proj.k, proj.v), x.dim(0), ext);
  auto mixed = rpe(attn, proj.v1, p.weight(prefix + ".rpe.weight"), p.weight(prefix + ".rpe.bias"));
  return ops::pointwise(mixed, p.weight(prefix + ".proj.weight"), p.weight(prefix + ".proj.bias"));
}

/// Pointwise expand (x3) -> SiLU -> pointwise contract.
template <typename T>
Tensor<T> ffn(const Tensor<T>& x, const NetworkParams<T>& p, const std::string& prefix) {
  auto h = ops::pointwise(x, p.weight(prefix + ".fc1.weight"), p.weight(prefix + ".fc1.bias"));
  return ops::pointwise(ops::silu(h), p.weight(prefix + ".fc2.weight"), p.weight(prefix + ".fc2.bias"));
}

/// Block-diagonal FFN: each stage's channel segment gets its own FFN.
template <typename T>
Tensor<T> intra_ffn(const Tensor<T>& x, const std::vector<std::size_t>& stage_channels,
                    const NetworkParams<T>& p, const std::string& prefix) {
  const std::size_t total = std::accumulate(stage_channels.begin(), stage_channels.end(), std::size_t{0});
  if (x.rank() != 5 || total != x.dim(1)) {
    throw DimensionError("intra_ffn: stage channels sum to " + std::to_string(total) + ", input has " +
                         std::to_string(x.rank() == 5 ? x.dim(1) : 0));
  }
  auto segments = ops::split(x, stage_channels, 1);
  for (std::size_t i = 0; i < segments.size(); ++i) {
    segments[i] = ffn(segments[i], p, prefix + ".stage" + std::to_string(i));
  }
  return ops::concat(segments, 1);
}

/// x <- x + CSA(BN x); x <- x + IntraFFN(BN x); x <- x + CSA(BN x); x <- x + FFN(BN x); BN.
template <typename T>
Tensor<T> mscsa_block(const Tensor<T>& x, const std::vector<std::size_t>& stage_channels,
                      const NetworkParams<T>& p, const MscsaConfig& cfg, ops::Mode mode,
                      const std::string& prefix = "mscsa") {
  cfg.validate(stage_channels.size(), x.dim(1));
  auto norm = [&](const Tensor<T>& v, int i) {
    return apply_batch_norm(p, prefix + ".norm" + std::to_string(i), v, mode);
  };
  Tensor<T> h = x;
  h = ops::add(h, csa_layer(norm(h, 0), p, prefix + ".csa0", cfg));
  h = ops::add(h, intra_ffn(norm(h, 1), stage_channels, p, prefix + ".intra_ffn"));
  h = ops::add(h, csa_layer(norm(h, 2), p, prefix + ".csa1", cfg));
  h = ops::add(h, ffn(norm(h, 3), p, prefix + ".ffn"));
  return apply_batch_norm(p, prefix + ".out_norm", h, mode);
}

/// Splits the block output per stage, restores each stage's resolution and
/// fuses it into the encoder features as x_i * (1 + gamma_i) + beta_i.
template <typename T>
StageFeatureSet<T> inject(const StageFeatureSet<T>& fs, const Tensor<T>& block_out, const NetworkParams<T>& p,
                          const std::string& prefix = "mscsa") {
  fs.validate();
  const auto channels = fs.channels();
  auto segments = ops::split(block_out, channels, 1);
  StageFeatureSet<T> fused;
  for (std::size_t i = 0; i < fs.size(); ++i) {
    const std::string key = prefix + ".inject.stage" + std::to_string(i);
    auto seg = resample_to(segments[i], fs.extents(i));
    auto gamma = ops::pointwise(seg, p.weight(key + ".gamma.weight"), p.weight(key + ".gamma.bias"));
    auto beta = ops::pointwise(seg, p.weight(key + ".beta.weight"), p.weight(key + ".beta.bias"));
    if (gamma.shape() != fs.stages[i].shape()) throw DimensionError("inject: stage shape mismatch");
    auto modulated = ops::mul(fs.stages[i], ops::add_scalar(gamma, T{1}));
    fused.stages.push_back(ops::add(modulated, beta));
  }
  return fused;
}

/// assemble -> block -> inject.
template <typename T>
StageFeatureSet<T> mscsa_forward(const StageFeatureSet<T>& fs, const NetworkParams<T>& p, const MscsaConfig& cfg,
                                 ops::Mode mode, const std::string& prefix = "mscsa") {
  auto assembled = assemble_multistage(fs, cfg.target_stage);
  auto out = mscsa_block(assembled, fs.channels(), p, cfg, mode, prefix);
  return inject(fs, out, p, prefix);
}

template <typename T>
void init_ffn_params(NetworkParams<T>& p, const std::string& prefix, std::size_t channels, Rng& rng) {
  const std::size_t hidden = channels * kFfnExpansion;
  p.add_kaiming(prefix + ".fc1.weight", {hidden, channels}, channels, rng);
  p.add_constant(prefix + ".fc1.bias", {hidden}, T{0});
  p.add_kaiming(prefix + ".fc2.weight", {channels, hidden}, hidden, rng);
  p.add_constant(prefix + ".fc2.bias", {channels}, T{0});
}

template <typename T>
void init_csa_params(NetworkParams<T>& p, const std::string& prefix, std::size_t c_total, const MscsaConfig& cfg,
                     Rng& rng) {
  const std::size_t ck = cfg.qk_dim(c_total), cv = cfg.v_dim(c_total), kk = cfg.dwconv_kernel;
  p.add_kaiming(prefix + ".q.weight", {ck, c_total}, c_total, rng);
  p.add_constant(prefix + ".q.bias", {ck}, T{0});
  for (std::size_t s : kMspStrides) {
    const std::string b = prefix + ".s" + std::to_string(s);
    p.add_kaiming(b + ".k.weight", {ck, c_total, 1, 1, 1}, c_total, rng);
    p.add_constant(b + ".k.bias", {ck}, T{0});
    p.add_kaiming(b + ".v.weight", {cv, c_total, 1, 1, 1}, c_total, rng);
    p.add_constant(b + ".v.bias", {cv}, T{0});
  }
  p.add_kaiming(prefix + ".rpe.weight", {cv, 1, kk, kk, kk}, kk * kk * kk, rng);
  p.add_constant(prefix + ".rpe.bias", {cv}, T{0});
  p.add_kaiming(prefix + ".proj.weight", {c_total, cv}, cv, rng);
  p.add_constant(prefix + ".proj.bias", {c_total}, T{0});
}

/// Adds every MSCSA parameter. Injection projections start at zero, which
/// makes the fused skips equal the encoder features at initialization.
template <typename T>
void init_mscsa_params(NetworkParams<T>& p, const std::vector<std::size_t>& stage_channels, const MscsaConfig& cfg,
                       Rng& rng, const std::string& prefix = "mscsa") {
  const std::size_t c_total = std::accumulate(stage_channels.begin(), stage_channels.end(), std::size_t{0});
  cfg.validate(stage_channels.size(), c_total);
  for (int i = 0; i < 4; ++i) p.add_batch_norm(prefix + ".norm" + std::to_string(i), c_total);
  p.add_batch_norm(prefix + ".out_norm", c_total);
  init_csa_params(p, prefix + ".csa0", c_total, cfg, rng);
  init_csa_params(p, prefix + ".csa1", c_total, cfg, rng);
  for (std::size_t i = 0; i < stage_channels.size(); ++i) {
    init_ffn_params(p, prefix + ".intra_ffn.stage" + std::to_string(i), stage_channels[i], rng);
  }
  init_ffn_params(p, prefix + ".ffn", c_total, rng);
  for (std::size_t i = 0; i < stage_channels.size(); ++i) {
    const std::string key = prefix + ".inject.stage" + std::to_string(i);
    const std::size_t c = stage_channels[i];
    for (const char* which : {".gamma", ".beta"}) {
      p.add_constant(key + which + ".weight", {c, c}, T{0});
      p.add_constant(key + which + ".bias", {c}, T{0});
    }
  }
}

}  // namespace mscsa::attention
