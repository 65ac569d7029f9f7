#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "mscsa/core/error.hpp"
#include "mscsa/core/rng.hpp"
#include "mscsa/tensor/ops.hpp"
#include "mscsa/tensor/tensor.hpp"

namespace mscsa {

/// Learnable tensors and non-learnable buffers (batch-norm running stats),
/// keyed by dotted layer path, e.g. "enc1.conv0.weight".
template <typename T>
class NetworkParams {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  Tensor<T>& add_weight(const std::string& key, Tensor<T> value) {
    value.set_requires_grad(true);
    return weights_[key] = std::move(value);
  }
  Tensor<T>& add_buffer(const std::string& key, Tensor<T> value) {
    value.set_requires_grad(false);
    return buffers_[key] = std::move(value);
  }

  /// Uniform(-b, b) with b = sqrt(6 / fan_in): Kaiming init for ReLU-family nets.
  Tensor<T>& add_kaiming(const std::string& key, Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return add_weight(key, Tensor<T>(std::move(shape), std::move(v)));
  }
  Tensor<T>& add_constant(const std::string& key, Shape shape, T value) {
    return add_weight(key, Tensor<T>(std::move(shape), value));
  }

  void add_batch_norm(const std::string& prefix, std::size_t channels) {
    add_constant(prefix + ".gamma", {channels}, T{1});
    add_constant(prefix + ".beta", {channels}, T{0});
    add_buffer(prefix + ".running_mean", Tensor<T>({channels}, T{0}));
    add_buffer(prefix + ".running_var", Tensor<T>({channels}, T{1}));
  }

  const Tensor<T>& weight(const std::string& key) const { return lookup(weights_, key); }
  const Tensor<T>& buffer(const std::string& key) const { return lookup(buffers_, key); }
  bool has_weight(const std::string& key) const { return weights_.count(key) != 0; }

  Map& weights() { return weights_; }
  const Map& weights() const { return weights_; }
  Map& buffers() { return buffers_; }
  const Map& buffers() const { return buffers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : weights_) n += v.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [k, v] : weights_) v.zero_grad();
  }

  /// Deep copy, optionally in another precision.
  template <typename U = T>
  NetworkParams<U> clone() const {
    NetworkParams<U> out;
    for (const auto& [k, v] : weights_) out.add_weight(k, v.template cast<U>());
    for (const auto& [k, v] : buffers_) out.add_buffer(k, v.template cast<U>());
    return out;
  }

 private:
  static const Tensor<T>& lookup(const Map& m, const std::string& key) {
    auto it = m.find(key);
    if (it == m.end()) throw ConfigError("missing parameter '" + key + "'");
    return it->second;
  }

  Map weights_;
  Map buffers_;
};

template <typename T>
Tensor<T> apply_batch_norm(const NetworkParams<T>& p, const std::string& prefix, const Tensor<T>& x,
                           ops::Mode mode) {
  return ops::batch_norm(x, p.weight(prefix + ".gamma"), p.weight(prefix + ".beta"),
                         p.buffer(prefix + ".running_mean"), p.buffer(prefix + ".running_var"), mode);
}

}  // namespace mscsa
