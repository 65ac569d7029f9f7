#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mscsa/attention/mscsa.hpp"
#include "mscsa/tensor/gradcheck.hpp"
#include "mscsa/training/losses.hpp"
#include "mscsa/unet/model.hpp"

namespace mscsa {

/// One finite-difference check: a scalar function of `inputs`.
struct GradcheckCase {
  std::string name;
  std::function<Tensor<double>(const std::vector<Tensor<double>>&)> fn;
  std::vector<Tensor<double>> inputs;
  double h = 1e-5;
  std::size_t max_per_input = 0;
};

struct GradcheckOutcome {
  std::string name;
  GradcheckResult result;
};

namespace detail {

using T64 = Tensor<double>;
using Fn = std::function<T64(const std::vector<T64>&)>;

/// Parameters become extra inputs so their gradients are checked too.
inline GradcheckCase with_params(std::string name, const NetworkParams<double>& p, std::vector<T64> leading,
                                 std::function<T64(const std::vector<T64>&, const NetworkParams<double>&)> body,
                                 double h = 1e-5, std::size_t max_per_input = 0) {
  std::vector<std::string> keys;
  for (const auto& [k, t] : p.weights()) {
    keys.push_back(k);
    leading.push_back(t.detach());
  }
  const std::size_t offset = leading.size() - keys.size();
  NetworkParams<double> buffers;
  for (const auto& [k, b] : p.buffers()) buffers.add_buffer(k, b.detach());
  Fn fn = [keys, offset, buffers, body](const std::vector<T64>& in) {
    NetworkParams<double> q;
    for (std::size_t i = 0; i < keys.size(); ++i) q.add_weight(keys[i], in[offset + i]);
    for (const auto& [k, b] : buffers.buffers()) q.add_buffer(k, b);
    return body(in, q);
  };
  return {std::move(name), std::move(fn), std::move(leading), h, max_per_input};
}

}  // namespace detail

/// Every differentiable op, the attention components, the full MSCSA block
/// (two stages, 8 channels, 4^3), both segmentation losses and the tiny
/// U-Net. All in 64-bit.
inline std::vector<GradcheckCase> gradcheck_suite() {
  using detail::T64;
  using P = const std::vector<T64>&;
  std::vector<GradcheckCase> cases;
  Rng rng(2024);
  auto proj = [](const T64& y, std::uint64_t seed) { return random_projection(y, seed); };

  const auto a = random_tensor({2, 3, 4}, rng);
  const auto pos = random_tensor({2, 3, 4}, rng, 0.5, 2.0);
  cases.push_back({"add", [=](P in) { return proj(ops::add(in[0], in[1]), 1); }, {a, pos}});
  cases.push_back({"sub", [=](P in) { return proj(ops::sub(in[0], in[1]), 2); }, {a, pos}});
  cases.push_back({"mul", [=](P in) { return proj(ops::mul(in[0], in[1]), 3); }, {a, pos}});
  cases.push_back({"div", [=](P in) { return proj(ops::div(in[0], in[1]), 4); }, {a, pos}});
  cases.push_back({"scale", [=](P in) { return proj(ops::scale(in[0], 1.7), 5); }, {a}});
  cases.push_back({"add_scalar", [=](P in) { return proj(ops::add_scalar(in[0], 0.3), 6); }, {a}});
  cases.push_back({"leaky_relu", [=](P in) { return proj(ops::leaky_relu(in[0], 0.01), 7); }, {a}});
  cases.push_back({"silu", [=](P in) { return proj(ops::silu(in[0]), 8); }, {a}});
  cases.push_back({"sum", [](P in) { return ops::sum(in[0]); }, {a}});
  cases.push_back({"mean", [](P in) { return ops::mean(in[0]); }, {a}});
  cases.push_back({"topk_mean", [](P in) { return ops::topk_mean(in[0], 7); }, {a}});
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const auto ax = std::to_string(axis);
    cases.push_back({"sum_axis" + ax, [=](P in) { return proj(ops::sum_axis(in[0], axis), 9); }, {a}});
    cases.push_back({"softmax" + ax, [=](P in) { return proj(ops::softmax(in[0], axis), 10); }, {a}});
    cases.push_back({"log_softmax" + ax, [=](P in) { return proj(ops::log_softmax(in[0], axis), 11); }, {a}});
  }
  const T64 labels({2, 4}, std::vector<double>{0, 1, 2, 1, 2, 2, 0, 0});
  cases.push_back({"select_class", [=](P in) { return proj(ops::select_class(in[0], labels), 12); }, {a}});
  cases.push_back({"reshape", [=](P in) { return proj(ops::reshape(in[0], {6, 4}), 13); }, {a}});
  cases.push_back({"permute", [=](P in) { return proj(ops::permute(in[0], {2, 0, 1}), 14); }, {a}});
  cases.push_back({"transpose", [=](P in) { return proj(ops::transpose(in[0]), 15); }, {a}});
  const auto b = random_tensor({2, 5, 4}, rng);
  cases.push_back({"concat", [=](P in) { return proj(ops::concat<double>({in[0], in[1]}, 1), 16); }, {a, b}});
  cases.push_back({"split",
                   [=](P in) {
                     auto parts = ops::split(in[0], {2, 3}, 1);
                     return ops::add(proj(parts[0], 17), proj(parts[1], 18));
                   },
                   {b}});
  cases.push_back({"slice", [=](P in) { return proj(ops::slice(in[0], 1, 1, 3), 19); }, {b}});
  cases.push_back({"matmul", [=](P in) { return proj(ops::matmul(in[0], in[1]), 20); },
                   {random_tensor({3, 4, 5}, rng), random_tensor({3, 5, 2}, rng)}});

  const auto x = random_tensor({2, 4, 5, 4, 6}, rng);
  cases.push_back({"conv3d_grouped_strided",
                   [=](P in) {
                     return proj(ops::conv3d(in[0], in[1], in[2], {.stride = {2, 1, 2}, .padding = {1, 1, 1}, .groups = 2}),
                                 21);
                   },
                   {x, random_tensor({6, 2, 3, 3, 3}, rng), random_tensor({6}, rng)}});
  cases.push_back({"conv3d_depthwise",
                   [=](P in) { return proj(ops::conv3d(in[0], in[1], {.padding = {1, 1, 1}, .groups = 4}), 22); },
                   {x, random_tensor({4, 1, 3, 3, 3}, rng)}});
  cases.push_back({"conv3d_pointwise_stride3",
                   [=](P in) { return proj(ops::conv3d(in[0], in[1], {.stride = {3, 3, 3}}), 23); },
                   {x, random_tensor({3, 4, 1, 1, 1}, rng)}});
  cases.push_back({"pointwise", [=](P in) { return proj(ops::pointwise(in[0], in[1], in[2]), 24); },
                   {x, random_tensor({3, 4}, rng), random_tensor({3}, rng)}});
  const auto small = random_tensor({1, 2, 4, 3, 6}, rng);
  cases.push_back({"resize_trilinear", [=](P in) { return proj(ops::resize_trilinear(in[0], {6, 5, 2}), 25); },
                   {small}});
  cases.push_back({"downsample_avg", [=](P in) { return proj(ops::downsample_avg(in[0], {2, 3, 2}), 26); },
                   {small}});
  const auto bx = random_tensor({2, 3, 2, 3, 2}, rng, -2, 3);
  for (auto mode : {ops::Mode::train, ops::Mode::eval}) {
    cases.push_back({mode == ops::Mode::train ? "batch_norm_train" : "batch_norm_eval",
                     [=](P in) {
                       T64 rm({3}, 0.1), rv({3}, 1.3);
                       return proj(ops::batch_norm(in[0], in[1], in[2], rm, rv, mode), 27);
                     },
                     {bx, random_tensor({3}, rng, 0.5, 1.5), random_tensor({3}, rng)}});
  }

  // attention
  attention::MscsaConfig acfg;
  acfg.target_stage = 0;
  acfg.heads = 4;
  const auto q = random_tensor({4, 6, 2}, rng), k = random_tensor({4, 9, 2}, rng), v = random_tensor({4, 9, 3}, rng);
  cases.push_back({"cross_scale_attention",
                   [=](P in) { return proj(attention::cross_scale_attention(in[0], in[1], in[2]), 28); }, {q, k, v}});
  cases.push_back({"rpe",
                   [=](P in) { return proj(attention::rpe(in[0], in[1], in[2], in[3]), 29); },
                   {random_tensor({1, 3, 4, 4, 4}, rng), random_tensor({1, 3, 4, 4, 4}, rng),
                    random_tensor({3, 1, 3, 3, 3}, rng), random_tensor({3}, rng)}});
  {
    Rng prng(31);
    NetworkParams<double> p;
    attention::init_mscsa_params(p, {4, 4}, acfg, prng);
    for (auto& [key, t] : p.weights()) {
      if (key.find(".inject.") != std::string::npos) {
        for (auto& w : t.mutable_data()) w = prng.uniform(-0.5, 0.5);
      }
    }
    const std::vector<std::size_t> ch{4, 4};
    cases.push_back(detail::with_params("csa_layer", p, {random_tensor({1, 8, 4, 4, 4}, rng)},
                                        [=](P in, const NetworkParams<double>& w) {
                                          return proj(attention::csa_layer(in[0], w, "mscsa.csa0", acfg), 32);
                                        }));
    cases.push_back(detail::with_params("intra_ffn", p, {random_tensor({1, 8, 4, 4, 4}, rng)},
                                        [=](P in, const NetworkParams<double>& w) {
                                          return proj(attention::intra_ffn(in[0], ch, w, "mscsa.intra_ffn"), 33);
                                        }));
    cases.push_back(detail::with_params("mscsa_block", p, {random_tensor({1, 8, 4, 4, 4}, rng)},
                                        [=](P in, const NetworkParams<double>& w) {
                                          return proj(attention::mscsa_block(in[0], ch, w, acfg, ops::Mode::train), 34);
                                        }));
    cases.push_back(detail::with_params(
        "inject", p, {random_tensor({1, 4, 4, 4, 4}, rng), random_tensor({1, 4, 2, 2, 2}, rng),
                      random_tensor({1, 8, 4, 4, 4}, rng)},
        [=](P in, const NetworkParams<double>& w) {
          attention::StageFeatureSet<double> fs{{in[0], in[1]}};
          auto fused = attention::inject(fs, in[2], w);
          return ops::add(proj(fused.stages[0], 35), proj(fused.stages[1], 36));
        }));
    cases.push_back({"assemble_multistage",
                     [=](P in) {
                       attention::StageFeatureSet<double> fs{{in[0], in[1]}};
                       return proj(attention::assemble_multistage(fs, 0), 37);
                     },
                     {random_tensor({1, 4, 4, 4, 4}, rng), random_tensor({1, 4, 2, 2, 2}, rng)}});
  }

  // losses
  const T64 loss_labels({2, 4, 4, 4}, [&] {
    std::vector<double> l(128);
    for (auto& e : l) e = rng.bernoulli(0.3) ? 1.0 : 0.0;
    return l;
  }());
  const auto logits = random_tensor({2, 2, 4, 4, 4}, rng, -2, 2);
  for (auto kind : {training::LossKind::dice_ce, training::LossKind::dice_topk}) {
    training::LossConfig lc;
    lc.kind = kind;
    cases.push_back({"loss_" + training::to_string(kind),
                     [=](P in) { return training::segmentation_loss(in[0], loss_labels, lc); }, {logits}});
  }

  // whole network; a small step keeps the probes off the leaky-ReLU kinks
  {
    auto cfg = unet::ModelConfig::tiny();
    cfg.use_mscsa = true;
    Rng prng(41);
    auto p = unet::init_params<double>(cfg, prng);
    for (auto& [key, t] : p.weights()) {
      if (key.find(".inject.") != std::string::npos) {
        for (auto& w : t.mutable_data()) w = prng.uniform(-0.3, 0.3);
      }
    }
    cases.push_back(detail::with_params(
        "unet_tiny_mscsa", p, {random_tensor({1, 1, 4, 4, 4}, rng)},
        [=](P in, const NetworkParams<double>& w) {
          return proj(unet::forward(in[0], w, cfg, ops::Mode::train), 42);
        },
        1e-7, 6));
  }
  return cases;
}

inline std::vector<GradcheckOutcome> run_gradcheck_suite(
    const std::function<void(const GradcheckOutcome&)>& on_result = {}) {
  std::vector<GradcheckOutcome> out;
  for (auto& c : gradcheck_suite()) {
    out.push_back({c.name, gradcheck(c.fn, c.inputs, c.h, c.max_per_input)});
    if (on_result) on_result(out.back());
  }
  return out;
}

}  // namespace mscsa
