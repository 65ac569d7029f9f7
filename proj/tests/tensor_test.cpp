#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "mscsa/tensor/gradcheck.hpp"
#include "mscsa/tensor/ops.hpp"

namespace mscsa {
namespace {

using ops::Triple;
using T64 = Tensor<double>;

T64 iota_tensor(Shape shape, double start = 0.0) {
  std::vector<double> v(numel(shape));
  std::iota(v.begin(), v.end(), start);
  return T64(std::move(shape), std::move(v));
}

TEST(Tensor, RejectsMismatchedValueCount) {
  EXPECT_THROW(T64(Shape{2, 3}, std::vector<double>(5)), DimensionError);
  EXPECT_THROW(T64(Shape{2, 0}), DimensionError);
}

TEST(Conv3d, SamePaddingKeepsExtents) {
  Rng rng(1);
  auto x = random_tensor({1, 1, 5, 5, 5}, rng);
  auto w = random_tensor({3, 1, 3, 3, 3}, rng);
  auto y = ops::conv3d(x, w, {.stride = {1, 1, 1}, .padding = {1, 1, 1}});
  EXPECT_EQ(y.shape(), (Shape{1, 3, 5, 5, 5}));
}

TEST(Conv3d, KernelOneStrideTwoMatchesSubsampleFormula) {
  Rng rng(2);
  auto x = random_tensor({1, 4, 8, 8, 8}, rng);
  auto w = random_tensor({6, 4, 1, 1, 1}, rng);
  auto y = ops::conv3d(x, w, {.stride = {2, 2, 2}});
  const std::size_t expected = (8 - 1) / 2 + 1;
  EXPECT_EQ(y.shape(), (Shape{1, 6, expected, expected, expected}));
  EXPECT_EQ(expected, 4u);
}

TEST(Conv3d, AllOnesKernelSumsTwentySeven) {
  auto x = T64({1, 1, 3, 3, 3}, 1.0);
  auto w = T64({1, 1, 3, 3, 3}, 1.0);
  auto y = ops::conv3d(x, w);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.item(), 27.0);
}

TEST(Conv3d, GroupsMustDivideChannels) {
  auto x = T64({1, 3, 4, 4, 4}, 1.0);
  auto w = T64({4, 1, 1, 1, 1}, 1.0);
  EXPECT_THROW(ops::conv3d(x, w, {.groups = 2}), ConfigError);
  EXPECT_THROW(ops::conv3d(x, T64({2, 2, 1, 1, 1}, 1.0)), DimensionError);
  EXPECT_THROW(ops::conv3d(x, T64({1, 3, 7, 1, 1}, 1.0)), DimensionError);
}

TEST(Conv3d, DepthwiseEqualsPerChannelConvolution) {
  Rng rng(3);
  auto x = random_tensor({2, 3, 5, 4, 6}, rng);
  auto w = random_tensor({3, 1, 3, 3, 3}, rng);
  auto b = random_tensor({3}, rng);
  const ops::Conv3dOptions opt{.stride = {1, 2, 1}, .padding = {1, 1, 1}, .groups = 3};
  auto y = ops::conv3d(x, w, b, opt);
  for (std::size_t c = 0; c < 3; ++c) {
    auto xc = ops::slice(x, 1, c, 1);
    auto wc = ops::slice(w, 0, c, 1);
    auto bc = ops::slice(b, 0, c, 1);
    auto yc = ops::conv3d(xc, wc, bc, {.stride = opt.stride, .padding = opt.padding});
    auto ref = ops::slice(y, 1, c, 1);
    ASSERT_EQ(yc.shape(), ref.shape());
    for (std::size_t i = 0; i < yc.numel(); ++i) EXPECT_NEAR(yc[i], ref[i], 1e-12);
  }
}

TEST(Pointwise, IdentityWeightIsIdentity) {
  Rng rng(4);
  auto x = random_tensor({1, 3, 2, 3, 4}, rng);
  T64 eye({3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto y = ops::pointwise(x, eye, T64({3}, 0.0));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Pointwise, HandArithmetic) {
  T64 x({1, 2, 1, 1, 1}, std::vector<double>{3, 4});
  T64 w({1, 2}, std::vector<double>{1, 1});
  EXPECT_DOUBLE_EQ(ops::pointwise(x, w).item(), 7.0);
  EXPECT_THROW(ops::pointwise(x, T64({1, 3}, 1.0)), DimensionError);
}

TEST(Pointwise, EqualsKernelOneConvolution) {
  Rng rng(5);
  auto x = random_tensor({2, 4, 3, 2, 5}, rng);
  auto w = random_tensor({3, 4}, rng);
  auto b = random_tensor({3}, rng);
  auto y1 = ops::pointwise(x, w, b);
  auto y2 = ops::conv3d(x, ops::reshape(w, {3, 4, 1, 1, 1}), b);
  ASSERT_EQ(y1.shape(), y2.shape());
  for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_NEAR(y1[i], y2[i], 1e-12);
}

TEST(Resize, IdentityAndConstants) {
  Rng rng(6);
  auto x = random_tensor({1, 2, 3, 4, 5}, rng);
  auto same = ops::resize_trilinear(x, {3, 4, 5});
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(same[i], x[i]);

  auto c = T64({1, 1, 3, 3, 3}, 2.5);
  for (Triple target : {Triple{7, 5, 2}, Triple{1, 1, 1}, Triple{6, 6, 6}}) {
    auto r = ops::resize_trilinear(c, target);
    for (double v : r.data()) EXPECT_NEAR(v, 2.5, 1e-12);
  }
  EXPECT_THROW(ops::resize_trilinear(c, {0, 1, 1}), DimensionError);
}

TEST(Resize, UpsamplingMatchesHalfPixelCoordinates) {
  // 1D along D: [0, 1] -> 4 samples at source coords -0.25, 0.25, 0.75, 1.25 (clamped)
  T64 x({1, 1, 1, 1, 2}, std::vector<double>{0.0, 1.0});
  auto y = ops::resize_trilinear(x, {1, 1, 4});
  EXPECT_NEAR(y[0], 0.0, 1e-12);
  EXPECT_NEAR(y[1], 0.25, 1e-12);
  EXPECT_NEAR(y[2], 0.75, 1e-12);
  EXPECT_NEAR(y[3], 1.0, 1e-12);
}

TEST(Downsample, MeanOfEightValues) {
  auto x = iota_tensor({1, 1, 2, 2, 2});
  auto y = ops::downsample_avg(x, {2, 2, 2});
  EXPECT_DOUBLE_EQ(y.item(), 3.5);
  EXPECT_THROW(ops::downsample_avg(iota_tensor({1, 1, 3, 2, 2}), {2, 2, 2}), DimensionError);
}

TEST(Softmax, ClosedFormValues) {
  auto u = ops::softmax(T64({1, 4}, 0.3), 1);
  for (double v : u.data()) EXPECT_DOUBLE_EQ(v, 0.25);
  auto s = ops::softmax(T64({2}, std::vector<double>{0.0, std::log(3.0)}), 0);
  EXPECT_NEAR(s[0], 0.25, 1e-15);
  EXPECT_NEAR(s[1], 0.75, 1e-15);
}

TEST(Softmax, SlicesSumToOne) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({3, 5, 4}, rng, -30, 30);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      auto y = ops::softmax(x, axis);
      const auto sp = ops::detail::split_axis(x.shape(), axis);
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          double s = 0;
          for (std::size_t e = 0; e < sp.extent; ++e) s += y[(o * sp.extent + e) * sp.inner + i];
          EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
    auto yf = ops::softmax(x.cast<float>(), 2);
    for (std::size_t r = 0; r < 15; ++r) {
      float s = 0;
      for (std::size_t e = 0; e < 4; ++e) s += yf[r * 4 + e];
      EXPECT_NEAR(s, 1.0f, 1e-5f);
    }
  }
}

TEST(Matmul, HandArithmeticAndIdentity) {
  T64 a({2, 2}, std::vector<double>{1, 2, 3, 4});
  T64 b({2, 1}, std::vector<double>{5, 6});
  auto c = ops::matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_DOUBLE_EQ(c[0], 17);
  EXPECT_DOUBLE_EQ(c[1], 39);

  Rng rng(8);
  auto m = random_tensor({3, 4, 5}, rng);
  T64 eye({4, 4}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) eye.mutable_data()[i * 5] = 1.0;
  auto same = ops::matmul(eye, m);
  for (std::size_t i = 0; i < m.numel(); ++i) EXPECT_DOUBLE_EQ(same[i], m[i]);
  EXPECT_THROW(ops::matmul(a, T64({3, 1}, 1.0)), DimensionError);
}

TEST(Matmul, TransposeIdentity) {
  Rng rng(9);
  auto a = random_tensor({2, 3, 4}, rng);
  auto b = random_tensor({2, 4, 5}, rng);
  auto lhs = ops::transpose(ops::matmul(a, b));
  auto rhs = ops::matmul(ops::transpose(b), ops::transpose(a));
  ASSERT_EQ(lhs.shape(), rhs.shape());
  for (std::size_t i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs[i], rhs[i], 1e-12);
}

TEST(BatchNorm, TrainModeNormalizes) {
  Rng rng(10);
  auto x = random_tensor({2, 3, 3, 3, 3}, rng, -4, 9);
  T64 gamma({3}, 1.0), beta({3}, 0.0), rm({3}, 0.0), rv({3}, 1.0);
  auto y = ops::batch_norm(x, gamma, beta, rm, rv, ops::Mode::train);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, ss = 0;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 27; ++i) s += y[(b * 3 + c) * 27 + i];
    const double mu = s / 54;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 27; ++i) ss += std::pow(y[(b * 3 + c) * 27 + i] - mu, 2);
    EXPECT_NEAR(mu, 0.0, 1e-12);
    EXPECT_NEAR(ss / 54, 1.0, 1e-4);  // eps shrinks the variance slightly
    // running stats moved 10% of the way towards the batch statistics
    EXPECT_NE(rm[c], 0.0);
  }
}

TEST(BatchNorm, ConstantChannelGivesBeta) {
  T64 x({2, 1, 2, 2, 2}, 5.0);
  T64 gamma({1}, 3.0), beta({1}, -0.5), rm({1}, 0.0), rv({1}, 1.0);
  auto y = ops::batch_norm(x, gamma, beta, rm, rv, ops::Mode::train);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, -0.5);
  EXPECT_DOUBLE_EQ(rm[0], 0.5);
  EXPECT_DOUBLE_EQ(rv[0], 0.9);
}

TEST(BatchNorm, StandardizedInputIsFixedPoint) {
  // +-1 pattern has zero mean and unit biased variance
  std::vector<double> v(16);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (i % 2) ? 1.0 : -1.0;
  T64 x({2, 1, 2, 2, 2}, v);
  T64 gamma({1}, 1.0), beta({1}, 0.0), rm({1}, 0.0), rv({1}, 1.0);
  auto y = ops::batch_norm(x, gamma, beta, rm, rv, ops::Mode::train);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(y[i], v[i], 1e-5);
  EXPECT_THROW(ops::batch_norm(x, T64({2}, 1.0), beta, rm, rv, ops::Mode::train), DimensionError);
}

TEST(BatchNorm, EvalModeUsesRunningStats) {
  T64 x({1, 1, 1, 1, 2}, std::vector<double>{1.0, 3.0});
  T64 gamma({1}, 2.0), beta({1}, 1.0), rm({1}, 1.0), rv({1}, 4.0 - 1e-5);
  auto y = ops::batch_norm(x, gamma, beta, rm, rv, ops::Mode::eval);
  EXPECT_NEAR(y[0], 1.0, 1e-12);
  EXPECT_NEAR(y[1], 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(rm[0], 1.0);
}

TEST(ConcatSplit, RoundTripsAndExtents) {
  Rng rng(11);
  auto a = random_tensor({1, 32, 4, 4, 4}, rng);
  auto b = random_tensor({1, 64, 4, 4, 4}, rng);
  auto c = ops::concat<double>({a, b}, 1);
  EXPECT_EQ(c.shape(), (Shape{1, 96, 4, 4, 4}));
  auto parts = ops::split(c, {32, 64}, 1);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(parts[0][i], a[i]);
  for (std::size_t i = 0; i < b.numel(); ++i) EXPECT_EQ(parts[1][i], b[i]);
  auto again = ops::concat(parts, 1);
  for (std::size_t i = 0; i < c.numel(); ++i) EXPECT_EQ(again[i], c[i]);
  EXPECT_THROW(ops::concat<double>({a, random_tensor({1, 3, 4, 4, 2}, rng)}, 1), DimensionError);
  EXPECT_THROW(ops::split(c, {32, 32}, 1), DimensionError);
}

TEST(ConcatSplit, GradientOfSumIsOnes) {
  Rng rng(12);
  auto a = random_tensor({2, 3, 2}, rng);
  auto b = random_tensor({2, 1, 2}, rng);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  backward(ops::sum(ops::concat<double>({a, b}, 1)));
  for (double g : a.grad()) EXPECT_EQ(g, 1.0);
  for (double g : b.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Activation, Definitions) {
  T64 x({3}, std::vector<double>{-1.0, 0.0, 2.0});
  auto l = ops::leaky_relu(x, 0.01);
  EXPECT_DOUBLE_EQ(l[0], -0.01);
  EXPECT_DOUBLE_EQ(l[2], 2.0);
  auto s = ops::silu(x);
  EXPECT_DOUBLE_EQ(s[1], 0.0);
  EXPECT_EQ(s.shape(), x.shape());
}

TEST(Backward, SumAndSquare) {
  T64 x({4}, 3.0, true);
  backward(ops::sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  x.zero_grad();
  backward(ops::sum(ops::mul(x, x)));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 6.0);
}

TEST(Backward, RejectsNonScalarOrUntrackedLoss) {
  T64 x({4}, 1.0, true);
  EXPECT_THROW(backward(ops::scale(x, 2.0)), DimensionError);
  EXPECT_THROW(backward(ops::sum(T64({2}, 1.0))), std::logic_error);
  T64 other({1}, 1.0, true);
  const std::vector<T64> wrt{other};
  EXPECT_THROW(backward(ops::sum(x), std::span<const T64>(wrt)), std::logic_error);
}

TEST(Tape, TopologicalOrder) {
  T64 a({2}, 1.0, true), b({2}, 2.0, true);
  auto c = ops::mul(a, b);
  auto d = ops::add(c, a);
  auto loss = ops::sum(d);
  const auto tape = Tape<double>::record(loss);
  std::vector<const Node<double>*> order(tape.entries().begin(), tape.entries().end());
  auto pos = [&](const T64& t) {
    return std::find(order.begin(), order.end(), t.node().get()) - order.begin();
  };
  EXPECT_LT(pos(a), pos(c));
  EXPECT_LT(pos(b), pos(c));
  EXPECT_LT(pos(c), pos(d));
  EXPECT_LT(pos(d), pos(loss));
  EXPECT_EQ(order.back(), loss.node().get());
}

TEST(TopkMean, FullFractionEqualsMeanBitwise) {
  Rng rng(13);
  auto x = random_tensor({97}, rng);
  EXPECT_EQ(ops::topk_mean(x, 97).item(), ops::mean(x).item());
  T64 two({2}, std::vector<double>{0.0, 2.0});
  EXPECT_EQ(ops::topk_mean(two, 1).item(), 2.0);
}

TEST(Finite, DetectsNaNWhenEnabled) {
  const bool prev = finite_checks_enabled();
  set_finite_checks(true);
  T64 x({1}, std::vector<double>{-1.0});
  T64 zero({1}, 0.0);
  EXPECT_THROW(ops::div(x, zero), NumericError);
  set_finite_checks(prev);
}

// ---------------------------------------------------------------------------
// Finite-difference checks, 64-bit, extents <= 6.

constexpr double kTol = 1e-4;

void expect_gradcheck(const std::function<T64(const std::vector<T64>&)>& fn, std::vector<T64> inputs) {
  const auto r = gradcheck(fn, std::move(inputs));
  EXPECT_LE(r.max_rel_error, kTol) << "worst element " << r.worst;
  EXPECT_GT(r.checked, 0u);
}

TEST(Gradcheck, Elementwise) {
  Rng rng(20);
  auto a = random_tensor({2, 3, 4}, rng);
  auto b = random_tensor({2, 3, 4}, rng, 0.5, 2.0);
  expect_gradcheck([](auto& in) { return random_projection(ops::add(in[0], in[1]), 1); }, {a, b});
  expect_gradcheck([](auto& in) { return random_projection(ops::sub(in[0], in[1]), 2); }, {a, b});
  expect_gradcheck([](auto& in) { return random_projection(ops::mul(in[0], in[1]), 3); }, {a, b});
  expect_gradcheck([](auto& in) { return random_projection(ops::div(in[0], in[1]), 4); }, {a, b});
  expect_gradcheck([](auto& in) { return random_projection(ops::scale(in[0], 1.7), 5); }, {a});
  expect_gradcheck([](auto& in) { return random_projection(ops::add_scalar(in[0], 0.3), 6); }, {a});
  expect_gradcheck([](auto& in) { return random_projection(ops::leaky_relu(in[0], 0.01), 7); }, {a});
  expect_gradcheck([](auto& in) { return random_projection(ops::silu(in[0]), 8); }, {a});
}

TEST(Gradcheck, Reductions) {
  Rng rng(21);
  auto a = random_tensor({3, 4, 5}, rng);
  expect_gradcheck([](auto& in) { return ops::sum(in[0]); }, {a});
  expect_gradcheck([](auto& in) { return ops::mean(in[0]); }, {a});
  expect_gradcheck([](auto& in) { return ops::topk_mean(in[0], 7); }, {a});
  for (std::size_t axis = 0; axis < 3; ++axis) {
    expect_gradcheck([axis](auto& in) { return random_projection(ops::sum_axis(in[0], axis), 9); }, {a});
  }
}

TEST(Gradcheck, Layout) {
  Rng rng(22);
  auto a = random_tensor({2, 3, 4}, rng);
  auto b = random_tensor({2, 5, 4}, rng);
  expect_gradcheck([](auto& in) { return random_projection(ops::reshape(in[0], {6, 4}), 10); }, {a});
  expect_gradcheck([](auto& in) { return random_projection(ops::permute(in[0], {2, 0, 1}), 11); }, {a});
  expect_gradcheck([](auto& in) { return random_projection(ops::transpose(in[0]), 12); }, {a});
  expect_gradcheck([](auto& in) { return random_projection(ops::concat<double>({in[0], in[1]}, 1), 13); },
                   {a, b});
  expect_gradcheck(
      [](auto& in) {
        auto parts = ops::split(in[0], {2, 3}, 1);
        return ops::add(random_projection(parts[0], 14), random_projection(parts[1], 15));
      },
      {b});
}

TEST(Gradcheck, SoftmaxFamily) {
  Rng rng(23);
  auto a = random_tensor({2, 3, 4}, rng, -2, 2);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    expect_gradcheck([axis](auto& in) { return random_projection(ops::softmax(in[0], axis), 16); }, {a});
    expect_gradcheck([axis](auto& in) { return random_projection(ops::log_softmax(in[0], axis), 17); }, {a});
  }
  T64 labels({2, 4}, std::vector<double>{0, 1, 2, 1, 2, 2, 0, 0});
  expect_gradcheck([labels](auto& in) { return random_projection(ops::select_class(in[0], labels), 18); }, {a});
}

TEST(Gradcheck, Matmul) {
  Rng rng(24);
  expect_gradcheck([](auto& in) { return random_projection(ops::matmul(in[0], in[1]), 19); },
                   {random_tensor({3, 4, 5}, rng), random_tensor({3, 5, 2}, rng)});
  expect_gradcheck([](auto& in) { return random_projection(ops::matmul(in[0], in[1]), 20); },
                   {random_tensor({4, 5}, rng), random_tensor({3, 5, 2}, rng)});
}

TEST(Gradcheck, Conv3d) {
  Rng rng(25);
  auto x = random_tensor({2, 4, 5, 4, 6}, rng);
  auto w = random_tensor({6, 2, 3, 3, 3}, rng);
  auto b = random_tensor({6}, rng);
  expect_gradcheck(
      [](auto& in) {
        return random_projection(
            ops::conv3d(in[0], in[1], in[2], {.stride = {2, 1, 2}, .padding = {1, 1, 1}, .groups = 2}), 21);
      },
      {x, w, b});
  auto wd = random_tensor({4, 1, 3, 3, 3}, rng);
  expect_gradcheck(
      [](auto& in) { return random_projection(ops::conv3d(in[0], in[1], {.padding = {1, 1, 1}, .groups = 4}), 22); },
      {x, wd});
  auto w1 = random_tensor({3, 4, 1, 1, 1}, rng);
  expect_gradcheck([](auto& in) { return random_projection(ops::conv3d(in[0], in[1], {.stride = {3, 3, 3}}), 23); },
                   {x, w1});
  expect_gradcheck([](auto& in) { return random_projection(ops::pointwise(in[0], in[1], in[2]), 24); },
                   {x, random_tensor({3, 4}, rng), random_tensor({3}, rng)});
}

TEST(Gradcheck, Resampling) {
  Rng rng(26);
  auto x = random_tensor({1, 2, 4, 3, 6}, rng);
  expect_gradcheck([](auto& in) { return random_projection(ops::resize_trilinear(in[0], {6, 5, 2}), 25); }, {x});
  expect_gradcheck([](auto& in) { return random_projection(ops::downsample_avg(in[0], {2, 3, 2}), 26); }, {x});
}

TEST(Gradcheck, BatchNorm) {
  Rng rng(27);
  auto x = random_tensor({2, 3, 2, 3, 2}, rng, -2, 3);
  auto g = random_tensor({3}, rng, 0.5, 1.5);
  auto b = random_tensor({3}, rng);
  for (auto mode : {ops::Mode::train, ops::Mode::eval}) {
    expect_gradcheck(
        [mode](auto& in) {
          T64 rm({3}, 0.1), rv({3}, 1.3);
          return random_projection(ops::batch_norm(in[0], in[1], in[2], rm, rv, mode), 27);
        },
        {x, g, b});
  }
}

TEST(Determinism, ForwardIsBitReproducible) {
  auto run = [] {
    Rng rng(99);
    auto x = random_tensor({1, 2, 6, 6, 6}, rng).cast<float>();
    auto w = random_tensor({4, 2, 3, 3, 3}, rng).cast<float>();
    return ops::softmax(ops::conv3d(x, w, {.padding = {1, 1, 1}}), 1).to_vector();
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace mscsa
