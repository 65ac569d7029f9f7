#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "mscsa/core/rng.hpp"
#include "mscsa/tensor/ops.hpp"
#include "mscsa/tensor/tensor.hpp"

namespace mscsa {

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "input#index" of the worst element

  bool passed(double tol = 1e-4) const { return max_rel_error <= tol; }
};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, element by element:
///
///   rel = |analytic - fd| / max(1, |fd|),  fd = (f(x+h) - f(x-h)) / 2h.
///
/// `fn` must rebuild its graph from the given inputs on every call.
/// `max_per_input` caps how many elements of each input are probed (a
/// deterministic stride through the tensor); 0 probes all of them.
inline GradcheckResult gradcheck(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
                                 std::vector<Tensor<double>> inputs, double h = 1e-5,
                                 std::size_t max_per_input = 0) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  const Tensor<double> loss = fn(inputs);
  backward(loss);

  GradcheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& t = inputs[k];
    const std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                      : std::vector<double>(t.numel(), 0.0);
    const std::size_t n = t.numel();
    const std::size_t stride = (max_per_input == 0 || n <= max_per_input) ? 1 : n / max_per_input;
    auto values = t.mutable_data();
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = values[i];
      values[i] = orig + h;
      const double fp = fn(inputs).item();
      values[i] = orig - h;
      const double fm = fn(inputs).item();
      values[i] = orig;
      const double fd = (fp - fm) / (2 * h);
      const double rel = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
      ++result.checked;
      if (rel >= result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst = std::to_string(k) + "#" + std::to_string(i);
      }
    }
  }
  return result;
}

/// Reduces a non-scalar tensor to a scalar with fixed random weights, so
/// every output element contributes a distinct coefficient to the check.
inline Tensor<double> random_projection(const Tensor<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(y.numel());
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  return ops::sum(ops::mul(y, Tensor<double>(y.shape(), std::move(w))));
}

inline Tensor<double> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(shape, std::move(v));
}

}  // namespace mscsa
