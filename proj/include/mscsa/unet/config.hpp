#pragma once

#include <cstddef>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "mscsa/attention/mscsa.hpp"
#include "mscsa/core/error.hpp"
#include "mscsa/core/kv.hpp"
#include "mscsa/tensor/ops.hpp"

namespace mscsa::unet {

using ops::Triple;

enum class Backbone { plain, residual };

inline std::string to_string(Backbone b) { return b == Backbone::plain ? "plain" : "res"; }

inline Backbone parse_backbone(const std::string& s) {
  if (s == "plain") return Backbone::plain;
  if (s == "res" || s == "residual") return Backbone::residual;
  throw ConfigError("backbone must be plain or res, got '" + s + "'");
}

/// Six-stage channel schedule of the full-size 3D nnU-Net (sums to 1120).
inline std::vector<std::size_t> reference_channels() { return {32, 64, 128, 256, 320, 320}; }

/// Second-coarsest stage (the bottleneck for two stages): keeps the attention token count small.
inline std::size_t desk_target_stage(std::size_t num_stages) {
  return num_stages >= 3 ? num_stages - 2 : num_stages - 1;
}

struct ModelConfig {
  std::vector<std::size_t> channels{16, 32, 64, 128};
  Backbone backbone = Backbone::plain;
  bool use_mscsa = false;
  attention::MscsaConfig mscsa{.target_stage = 2};
  std::size_t num_classes = 2;
  std::size_t in_channels = 1;

  static constexpr std::size_t kKernel = 3;

  static ModelConfig desk() { return {}; }

  /// Two stages, small widths: fast enough for gradient checks and smoke runs.
  static ModelConfig tiny() {
    ModelConfig c;
    c.channels = {4, 8};
    c.mscsa.target_stage = desk_target_stage(2);
    return c;
  }

  std::size_t num_stages() const { return channels.size(); }
  std::size_t channel_total() const { return std::accumulate(channels.begin(), channels.end(), std::size_t{0}); }

  /// Extents must be divisible by 2^(S-1).
  std::size_t extent_multiple() const { return std::size_t{1} << (num_stages() - 1); }

  void validate() const {
    if (num_stages() < 2) throw ConfigError("model: at least two stages required");
    for (auto c : channels) {
      if (c == 0) throw ConfigError("model: channels must be positive");
    }
    if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
    if (in_channels == 0) throw ConfigError("model: in_channels must be positive");
    if (use_mscsa) mscsa.validate(num_stages(), channel_total());
  }

  void validate_extents(const Triple& e) const {
    const std::size_t m = extent_multiple();
    for (auto x : e) {
      if (x == 0 || x % m != 0) {
        throw ConfigError("model: extent " + std::to_string(x) + " not divisible by " + std::to_string(m) +
                          " (2^(stages-1))");
      }
    }
  }

  static const std::set<std::string>& keys() {
    static const std::set<std::string> k{"channels",        "backbone",       "mscsa",
                                         "mscsa.target_stage", "mscsa.heads", "mscsa.c_qk",
                                         "mscsa.c_v",       "mscsa.dwconv_kernel", "num_classes",
                                         "in_channels"};
    return k;
  }

  /// Reads the model keys; missing keys keep the desk defaults.
  static ModelConfig from_kv(const KeyValues& kv) {
    ModelConfig c;
    c.channels = kv.get_sizes("channels", c.channels);
    c.backbone = parse_backbone(kv.get_string("backbone", to_string(c.backbone)));
    c.use_mscsa = kv.get_bool("mscsa", c.use_mscsa);
    c.mscsa.target_stage = kv.get_size("mscsa.target_stage", desk_target_stage(c.channels.size()));
    c.mscsa.heads = kv.get_size("mscsa.heads", c.mscsa.heads);
    c.mscsa.c_qk = kv.get_size("mscsa.c_qk", c.mscsa.c_qk);
    c.mscsa.c_v = kv.get_size("mscsa.c_v", c.mscsa.c_v);
    c.mscsa.dwconv_kernel = kv.get_size("mscsa.dwconv_kernel", c.mscsa.dwconv_kernel);
    c.num_classes = kv.get_size("num_classes", c.num_classes);
    c.in_channels = kv.get_size("in_channels", c.in_channels);
    c.validate();
    return c;
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("channels", join(channels));
    kv.set("backbone", to_string(backbone));
    kv.set("mscsa", use_mscsa ? "on" : "off");
    kv.set("mscsa.target_stage", std::to_string(mscsa.target_stage));
    kv.set("mscsa.heads", std::to_string(mscsa.heads));
    kv.set("mscsa.c_qk", std::to_string(mscsa.c_qk));
    kv.set("mscsa.c_v", std::to_string(mscsa.c_v));
    kv.set("mscsa.dwconv_kernel", std::to_string(mscsa.dwconv_kernel));
    kv.set("num_classes", std::to_string(num_classes));
    kv.set("in_channels", std::to_string(in_channels));
    return kv;
  }
};

}  // namespace mscsa::unet
