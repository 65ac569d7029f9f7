#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "mscsa/core/error.hpp"
#include "mscsa/tensor/params.hpp"

namespace mscsa::training {

/// Per-parameter momentum buffers, created lazily on the first step.
template <typename T>
struct SgdState {
  std::map<std::string, std::vector<T>> velocity;
};

/// Nesterov SGD in the form used by PyTorch:
///   v <- mu * v + g;   p <- p - lr * (g + mu * v)
/// `grads` must hold exactly the keys of `params`.
template <typename T>
void sgd_step(std::map<std::string, Tensor<T>>& params, const std::map<std::string, std::vector<T>>& grads,
              SgdState<T>& state, double lr, double momentum) {
  if (grads.size() != params.size()) throw ConfigError("sgd_step: gradient and parameter key sets differ");
  if (!state.velocity.empty() && state.velocity.size() != params.size()) {
    throw ConfigError("sgd_step: optimizer state does not match parameters");
  }
  const T mu = static_cast<T>(momentum), step = static_cast<T>(lr);
  for (auto& [key, param] : params) {
    auto g = grads.find(key);
    if (g == grads.end()) throw ConfigError("sgd_step: no gradient for '" + key + "'");
    auto data = param.mutable_data();
    if (g->second.size() != data.size()) throw DimensionError("sgd_step: gradient size mismatch for '" + key + "'");
    auto [it, fresh] = state.velocity.try_emplace(key, data.size(), T{0});
    if (!fresh && it->second.size() != data.size()) throw ConfigError("sgd_step: stale state for '" + key + "'");
    auto& v = it->second;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const T gi = g->second[i];
      v[i] = mu * v[i] + gi;
      data[i] -= step * (gi + mu * v[i]);
    }
  }
}

/// Steps every weight of `p` using its accumulated .grad (zero if none).
template <typename T>
void sgd_step(NetworkParams<T>& p, SgdState<T>& state, double lr, double momentum) {
  std::map<std::string, std::vector<T>> grads;
  for (const auto& [k, w] : p.weights()) {
    grads[k] = w.has_grad() ? std::vector<T>(w.grad().begin(), w.grad().end()) : std::vector<T>(w.numel(), T{0});
  }
  sgd_step(p.weights(), grads, state, lr, momentum);
}

/// lr0 * (1 - epoch / epochs)^exponent, epoch counted from zero.
inline double poly_lr(double lr0, std::size_t epoch, std::size_t epochs, double exponent = 0.9) {
  if (epochs == 0) throw ConfigError("poly_lr: epochs must be positive");
  const double frac = 1.0 - static_cast<double>(epoch) / static_cast<double>(epochs);
  return lr0 * std::pow(std::max(frac, 0.0), exponent);
}

}  // namespace mscsa::training
