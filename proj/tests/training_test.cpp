#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "mscsa/data/phantom.hpp"
#include "mscsa/tensor/gradcheck.hpp"
#include "mscsa/training/train.hpp"

using namespace mscsa;
using namespace mscsa::training;
namespace fs = std::filesystem;
using T64 = Tensor<double>;

namespace {

// Logits [N, 2, spatial] whose class-1 softmax equals p everywhere.
T64 logits_for_probability(const Shape& labels_shape, double p) {
  Shape s{labels_shape[0], 2};
  s.insert(s.end(), labels_shape.begin() + 1, labels_shape.end());
  T64 out(s, 0.0);
  const std::size_t n = numel(labels_shape) / labels_shape[0];
  auto d = out.mutable_data();
  for (std::size_t b = 0; b < labels_shape[0]; ++b)
    for (std::size_t i = 0; i < n; ++i) d[(b * 2 + 1) * n + i] = std::log(p / (1.0 - p));
  return out;
}

T64 random_labels(const Shape& s, Rng& rng) {
  std::vector<double> v(numel(s));
  for (auto& x : v) x = rng.bernoulli(0.3) ? 1.0 : 0.0;
  return T64(s, std::move(v));
}

std::vector<double> per_voxel_ce(const T64& logits, const T64& labels) {
  const std::size_t N = logits.dim(0), C = logits.dim(1), n = logits.numel() / (N * C);
  std::vector<double> out;
  for (std::size_t b = 0; b < N; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -1e300;
      for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, logits[(b * C + c) * n + i]);
      double z = 0;
      for (std::size_t c = 0; c < C; ++c) z += std::exp(logits[(b * C + c) * n + i] - mx);
      const auto t = static_cast<std::size_t>(labels[b * n + i]);
      out.push_back(-(logits[(b * C + t) * n + i] - mx - std::log(z)));
    }
  return out;
}

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("mscsa_training_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::vector<data::ManifestEntry> write_phantoms(const fs::path& dir, std::size_t count, std::uint64_t seed0,
                                                bool labeled = true) {
  std::vector<data::ManifestEntry> out;
  for (std::size_t i = 0; i < count; ++i) {
    data::PhantomSpec spec;
    spec.extents = {16, 16, 16};
    spec.max_radius = 4;
    spec.seed = seed0 + i;
    const auto ph = data::generate_phantom(spec);
    const std::string id = "case" + std::to_string(seed0 + i);
    data::ManifestEntry e{id, dir / (id + ".nii"), {}, 0};
    data::nifti_write(ph.volume, e.volume_path);
    if (labeled) {
      e.mask_path = dir / (id + "_mask.nii");
      e.lesion_volume = ph.mask.lesion_volume();
      data::nifti_write(ph.mask, e.mask_path);
    }
    out.push_back(e);
  }
  return out;
}

TrainConfig tiny_run(std::size_t epochs) {
  TrainConfig run;
  run.epochs = epochs;
  run.seed = 3;
  run.patch = {16, 16, 16};
  run.folds = 2;
  return run;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void expect_same_log(const std::vector<EpochLog>& a, const std::vector<EpochLog>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].lr, b[i].lr);
    EXPECT_EQ(a[i].train_loss, b[i].train_loss) << "epoch " << i;
    EXPECT_EQ(a[i].val_dice, b[i].val_dice) << "epoch " << i;
  }
}

}  // namespace

// --- losses ---------------------------------------------------------------

TEST(DiceLoss, UniformHalfAgainstAllForeground) {
  const Shape ls{2, 3, 3, 3};
  const T64 target(ls, 1.0);
  const double n = static_cast<double>(numel(ls)), eps = 1e-5;
  const double expected = 1.0 - (2.0 * 0.5 * n + eps) / (0.5 * n + n + eps);
  EXPECT_NEAR(dice_loss(logits_for_probability(ls, 0.5), target, eps)[0], expected, 1e-12);
  EXPECT_NEAR(expected, 1.0 / 3.0, 1e-6);
}

TEST(DiceLoss, PerfectMatchIsZero) {
  const Shape ls{1, 4, 4, 4};
  const double loss = dice_loss(logits_for_probability(ls, 1.0 - 1e-15), T64(ls, 1.0))[0];
  EXPECT_NEAR(loss, 0.0, 1e-9);
}

TEST(DiceLoss, EmptyTargetNeverNaN) {
  const Shape ls{1, 4, 4, 4};
  for (double p : {1e-300, 1e-15, 0.0}) {
    T64 logits = p > 0 ? logits_for_probability(ls, p) : T64({1, 2, 4, 4, 4}, 0.0);
    if (p == 0.0) {
      auto d = logits.mutable_data();
      for (std::size_t i = 0; i < 64; ++i) d[i] = 800.0;  // background dominates beyond exp range
    }
    const double loss = dice_loss(logits, T64(ls, 0.0))[0];
    EXPECT_FALSE(std::isnan(loss));
    EXPECT_NEAR(loss, 0.0, 1e-6);
  }
}

TEST(DiceLoss, RangeOverRandomInputs) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Shape ls{1 + rng.index(2), 1 + rng.index(4), 1 + rng.index(4), 1 + rng.index(4)};
    Shape s{ls[0], 2, ls[1], ls[2], ls[3]};
    const double loss = dice_loss(random_tensor(s, rng, -6, 6), random_labels(ls, rng))[0];
    EXPECT_GE(loss, 0.0);
    EXPECT_LE(loss, 1.0 + 1e-9);
  }
}

TEST(DiceLoss, ShapeMismatchThrows) {
  EXPECT_THROW(dice_loss(T64({1, 2, 4, 4, 4}), T64({1, 4, 4, 3})), DimensionError);
  EXPECT_THROW(voxel_ce(T64({1, 2, 4, 4, 4}), T64({2, 4, 4, 4})), DimensionError);
}

TEST(TopkCe, KeepsLargestOfTwo) {
  EXPECT_EQ(topk_count(2, 0.5), 1u);
  EXPECT_EQ(ops::topk_mean(T64({2}, std::vector<double>{2.0, 0.0}), topk_count(2, 0.5))[0], 2.0);
  // two voxels through the full loss: the top half is the larger CE
  const T64 logits({1, 2, 2, 1, 1}, std::vector<double>{3.0, -1.0, 0.0, 0.5});
  const T64 labels({1, 2, 1, 1}, std::vector<double>{0.0, 0.0});
  const auto ce = per_voxel_ce(logits, labels);
  EXPECT_DOUBLE_EQ(topk_ce_loss(logits, labels, 0.5)[0], std::max(ce[0], ce[1]));
}

TEST(TopkCe, CountRounding) {
  EXPECT_EQ(topk_count(64, 0.10), 7u);
  EXPECT_EQ(topk_count(10, 0.10), 1u);
  EXPECT_EQ(topk_count(3, 0.01), 1u);
  EXPECT_EQ(topk_count(100, 1.0), 100u);
  EXPECT_THROW(topk_ce_loss(T64({1, 2, 1, 1, 1}), T64({1, 1, 1, 1}), 0.0), ConfigError);
  EXPECT_THROW(topk_ce_loss(T64({1, 2, 1, 1, 1}), T64({1, 1, 1, 1}), 1.5), ConfigError);
}

TEST(TopkCe, FullFractionEqualsMeanExactly) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Shape ls{2, 3, 4, 5};
    const auto labels = random_labels(ls, rng);
    auto a = random_tensor({2, 2, 3, 4, 5}, rng, -4, 4);
    a.set_requires_grad(true);
    auto b = T64(a.shape(), std::vector<double>(a.data().begin(), a.data().end()), true);
    const auto top = topk_ce_loss(a, labels, 1.0);
    const auto mean = ce_loss(b, labels);
    EXPECT_EQ(top[0], mean[0]);
    backward(top);
    backward(mean);
    EXPECT_TRUE(std::equal(a.grad().begin(), a.grad().end(), b.grad().begin()));
  }
}

TEST(TopkCe, MatchesSortedPrefixOracleAndIsMonotone) {
  Rng rng(17);
  for (int trial = 0; trial < 30; ++trial) {
    const Shape ls{1, 2 + rng.index(4), 2 + rng.index(4), 2};
    const auto labels = random_labels(ls, rng);
    const auto logits = random_tensor({ls[0], 2, ls[1], ls[2], ls[3]}, rng, -5, 5);
    auto ce = per_voxel_ce(logits, labels);
    std::sort(ce.rbegin(), ce.rend());
    double prev = std::numeric_limits<double>::infinity();
    for (int step = 1; step <= 20; ++step) {
      const double f = step / 20.0;
      const std::size_t k = topk_count(ce.size(), f);
      const double oracle = std::accumulate(ce.begin(), ce.begin() + static_cast<std::ptrdiff_t>(k), 0.0) / k;
      const double got = topk_ce_loss(logits, labels, f)[0];
      EXPECT_NEAR(got, oracle, 1e-12);
      EXPECT_LE(got, prev + 1e-12);
      prev = got;
    }
  }
}

TEST(LossGradients, DiceCeAndDiceTopkOnFourCubed) {
  Rng rng(23);
  const Shape ls{2, 4, 4, 4};
  const auto labels = random_labels(ls, rng);
  for (auto kind : {LossKind::dice_ce, LossKind::dice_topk}) {
    LossConfig cfg;
    cfg.kind = kind;
    const auto r = gradcheck([&](const std::vector<T64>& in) { return segmentation_loss(in[0], labels, cfg); },
                             {random_tensor({2, 2, 4, 4, 4}, rng, -2, 2)});
    EXPECT_LE(r.max_rel_error, 1e-4) << to_string(kind);
    EXPECT_EQ(r.checked, 256u);
  }
}

TEST(LossConfig, Validation) {
  LossConfig c;
  c.topk_fraction = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.topk_fraction = 1.0;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(parse_loss("dtk10"), LossKind::dice_topk);
  EXPECT_EQ(parse_loss("dice_ce"), LossKind::dice_ce);
  EXPECT_THROW(parse_loss("focal"), ConfigError);
}

// --- optimizer ------------------------------------------------------------

TEST(Sgd, VanillaStep) {
  std::map<std::string, Tensor<float>> p{{"w", Tensor<float>({1}, 0.0f)}};
  SgdState<float> st;
  sgd_step(p, {{"w", {1.0f}}}, st, 0.1, 0.0);
  EXPECT_FLOAT_EQ(p.at("w")[0], -0.1f);
}

TEST(Sgd, ZeroGradients) {
  std::map<std::string, Tensor<double>> p{{"w", Tensor<double>({3}, std::vector<double>{1, 2, 3})}};
  SgdState<double> st;
  sgd_step(p, {{"w", {0, 0, 0}}}, st, 0.1, 0.9);
  EXPECT_EQ(std::vector<double>(p.at("w").data().begin(), p.at("w").data().end()), (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(st.velocity.at("w"), (std::vector<double>{0, 0, 0}));
  st.velocity.at("w") = {1.0, -2.0, 0.5};
  sgd_step(p, {{"w", {0, 0, 0}}}, st, 0.1, 0.9);
  EXPECT_EQ(st.velocity.at("w"), (std::vector<double>{0.9 * 1.0, 0.9 * -2.0, 0.9 * 0.5}));
}

TEST(Sgd, KeyMismatchThrows) {
  std::map<std::string, Tensor<double>> p{{"w", Tensor<double>({1}, 0.0)}};
  SgdState<double> st;
  EXPECT_THROW(sgd_step(p, {{"v", {1.0}}}, st, 0.1, 0.9), ConfigError);
  EXPECT_THROW(sgd_step(p, {{"w", {1.0}}, {"v", {1.0}}}, st, 0.1, 0.9), ConfigError);
  EXPECT_THROW(sgd_step(p, {{"w", {1.0, 2.0}}}, st, 0.1, 0.9), DimensionError);
}

TEST(Sgd, QuadraticBowlMatchesScalarSimulation) {
  std::map<std::string, Tensor<double>> p{{"x", Tensor<double>({1}, 1.0)}};
  SgdState<double> st;
  double x = 1.0, v = 0.0;
  std::size_t first_below = 0;
  for (std::size_t step = 1; step <= 200; ++step) {
    const double g = 2.0 * p.at("x")[0];
    sgd_step(p, {{"x", {g}}}, st, 0.1, 0.9);
    const double gs = 2.0 * x;  // independent Nesterov recurrence
    v = 0.9 * v + gs;
    x -= 0.1 * (gs + 0.9 * v);
    EXPECT_NEAR(p.at("x")[0], x, 1e-12 * std::max(1.0, std::abs(x)) + 1e-15);
    if (!first_below && std::abs(x) < 1e-6) first_below = step;
  }
  EXPECT_GT(first_below, 0u);
  EXPECT_LT(std::abs(p.at("x")[0]), 1e-6);
}

TEST(Sgd, NetworkParamsUsesAccumulatedGradients) {
  NetworkParams<double> p;
  p.add_constant("a", {2}, 1.0);
  p.add_constant("b", {1}, 5.0);
  auto loss = ops::sum(ops::mul(p.weights().at("a"), p.weights().at("a")));
  backward(loss);
  SgdState<double> st;
  sgd_step(p, st, 0.25, 0.0);
  EXPECT_DOUBLE_EQ(p.weight("a")[0], 0.5);
  EXPECT_DOUBLE_EQ(p.weight("b")[0], 5.0);
}

TEST(PolyLr, Schedule) {
  EXPECT_DOUBLE_EQ(poly_lr(0.01, 0, 100), 0.01);
  EXPECT_DOUBLE_EQ(poly_lr(0.01, 50, 100), 0.01 * std::pow(0.5, 0.9));
  EXPECT_DOUBLE_EQ(poly_lr(0.01, 99, 100), 0.01 * std::pow(0.01, 0.9));
  EXPECT_THROW(poly_lr(0.01, 0, 0), ConfigError);
  double prev = 1.0;
  for (std::size_t e = 0; e < 100; ++e) {
    const double lr = poly_lr(0.01, e, 100);
    EXPECT_LT(lr, prev);
    EXPECT_GT(lr, 0.0);
    prev = lr;
  }
}

// --- configuration --------------------------------------------------------

TEST(TrainConfig, DefaultsAndRoundTrip) {
  const TrainConfig d;
  EXPECT_EQ(d.batch_size, 2u);
  EXPECT_DOUBLE_EQ(d.lr, 0.01);
  EXPECT_DOUBLE_EQ(d.momentum, 0.99);
  EXPECT_DOUBLE_EQ(d.poly_exponent, 0.9);
  EXPECT_DOUBLE_EQ(d.loss.topk_fraction, 0.10);

  TrainConfig c = tiny_run(7);
  c.loss.kind = LossKind::dice_topk;
  c.loss.topk_fraction = 0.25;
  c.augment = false;
  const auto back = TrainConfig::from_kv(KeyValues::parse(c.to_kv().str()));
  EXPECT_EQ(back.to_kv().str(), c.to_kv().str());
  EXPECT_EQ(back.loss.kind, LossKind::dice_topk);
  EXPECT_EQ(back.patch, c.patch);
}

TEST(TrainConfig, SchemesSetDefaults) {
  auto r = RunConfig::from_kv(KeyValues::parse("scheme = dtk10\npatch = 16\nchannels = 4,8\n"));
  EXPECT_EQ(r.train.loss.kind, LossKind::dice_topk);
  EXPECT_EQ(r.model.backbone, unet::Backbone::plain);
  r = RunConfig::from_kv(KeyValues::parse("scheme = resunet\n"));
  EXPECT_EQ(r.model.backbone, unet::Backbone::residual);
  EXPECT_EQ(r.train.loss.kind, LossKind::dice_ce);
  r = RunConfig::from_kv(KeyValues::parse("scheme = dtk10\nloss = dice_ce\n"));
  EXPECT_EQ(r.train.loss.kind, LossKind::dice_ce);
}

TEST(TrainConfig, RejectsBadValues) {
  EXPECT_THROW(RunConfig::from_kv(KeyValues::parse("epochs = 0\n")), ConfigError);
  EXPECT_THROW(RunConfig::from_kv(KeyValues::parse("lr = 0\n")), ConfigError);
  EXPECT_THROW(RunConfig::from_kv(KeyValues::parse("scheme = fancy\n")), ConfigError);
  EXPECT_THROW(RunConfig::from_kv(KeyValues::parse("bogus = 1\n")), ConfigError);
  EXPECT_THROW(RunConfig::from_kv(KeyValues::parse("patch = 20\n")), ConfigError);
}

TEST(Split, FoldsAndErrors) {
  const std::vector<std::size_t> fold_of{0, 1, 0, 1, kTrainOnly};
  auto s = make_split(fold_of, 2, 1);
  EXPECT_EQ(s.train, (std::vector<std::size_t>{0, 2, 4}));
  EXPECT_EQ(s.val, (std::vector<std::size_t>{1, 3}));
  s = make_split(fold_of, 2, std::nullopt);
  EXPECT_EQ(s.train.size(), 5u);
  EXPECT_EQ(s.val, s.train);
  EXPECT_THROW(make_split(fold_of, 2, 2), ConfigError);
  EXPECT_THROW(make_split({0, 0}, 1, 0), ConfigError);
}

// --- training runs ---------------------------------------------------------

TEST(Train, SmokeOneEpochWritesLog) {
  const auto dir = fresh_dir("smoke");
  const auto cases = write_phantoms(dir / "data", 2, 40);
  const auto r = train(tiny_run(1), unet::ModelConfig::tiny(), cases, std::nullopt, dir / "run");
  ASSERT_EQ(r.log.size(), 1u);
  std::ifstream log(dir / "run" / "train_log.csv");
  std::string header, row, extra;
  ASSERT_TRUE(std::getline(log, header));
  EXPECT_EQ(header, kLogHeader);
  ASSERT_TRUE(std::getline(log, row));
  EXPECT_FALSE(std::getline(log, extra));
  const auto cells = data::split_csv_line(row);
  ASSERT_EQ(cells.size(), 4u);
  EXPECT_EQ(cells[0], "0");
  EXPECT_DOUBLE_EQ(std::stod(cells[1]), 0.01);
  EXPECT_TRUE(std::isfinite(std::stod(cells[2])));
  const double dice = std::stod(cells[3]);
  EXPECT_GE(dice, 0.0);
  EXPECT_LE(dice, 1.0);
  for (auto f : {"best.ckpt", "final.ckpt", "model.cfg", "train.cfg"}) EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
  const auto m = load_model(dir / "run" / "final.ckpt");
  EXPECT_EQ(m.cfg.channels, unet::ModelConfig::tiny().channels);
}

TEST(Train, EmptyTrainingFoldThrows) {
  EXPECT_THROW(train(tiny_run(1), unet::ModelConfig::tiny(), {}, std::nullopt), ConfigError);
  const auto dir = fresh_dir("onefold");
  const auto cases = write_phantoms(dir, 2, 50);
  auto run = tiny_run(1);
  run.folds = 1;
  EXPECT_THROW(train(run, unet::ModelConfig::tiny(), cases, 0), ConfigError);
  run.folds = 2;
  EXPECT_THROW(train(run, unet::ModelConfig::tiny(), cases, 2), ConfigError);
}

TEST(Train, FixedSeedIsBitIdentical) {
  const auto dir = fresh_dir("determinism");
  const auto cases = write_phantoms(dir / "data", 3, 60);
  auto model = unet::ModelConfig::tiny();
  model.use_mscsa = true;
  const auto a = train(tiny_run(3), model, cases, 0, dir / "a");
  const auto b = train(tiny_run(3), model, cases, 0, dir / "b");
  expect_same_log(a.log, b.log);
  EXPECT_EQ(slurp(dir / "a" / "final.ckpt"), slurp(dir / "b" / "final.ckpt"));
  EXPECT_EQ(slurp(dir / "a" / "best.ckpt"), slurp(dir / "b" / "best.ckpt"));
  EXPECT_EQ(slurp(dir / "a" / "train_log.csv"), slurp(dir / "b" / "train_log.csv"));
  auto other = tiny_run(3);
  other.seed = 4;
  const auto c = train(other, model, cases, 0);
  EXPECT_NE(c.log.back().train_loss, a.log.back().train_loss);
}

TEST(Train, Dtk10WithFullFractionReproducesDefault) {
  const auto dir = fresh_dir("dtk");
  const auto cases = write_phantoms(dir, 2, 70);
  auto base = tiny_run(3);
  auto dtk = base;
  dtk.scheme = Scheme::dtk10;
  dtk.loss.kind = LossKind::dice_topk;
  dtk.loss.topk_fraction = 1.0;
  const auto a = train(base, unet::ModelConfig::tiny(), cases, std::nullopt);
  const auto b = train(dtk, unet::ModelConfig::tiny(), cases, std::nullopt);
  expect_same_log(a.log, b.log);
  dtk.loss.topk_fraction = 0.1;
  const auto c = train(dtk, unet::ModelConfig::tiny(), cases, std::nullopt);
  EXPECT_NE(c.log.front().train_loss, a.log.front().train_loss);
}

// --- ensemble and self-training ---------------------------------------------

namespace {

// A tiny model whose softmax is the constant (1 - p, p): zero head weights, biased head.
Model constant_model(double p, std::size_t classes = 2) {
  auto cfg = unet::ModelConfig::tiny();
  cfg.num_classes = classes;
  Rng rng(1);
  Model m{cfg, unet::init_params<float>(cfg, rng)};
  for (auto& x : m.params.weights().at("head.weight").mutable_data()) x = 0.0f;
  auto bias = m.params.weights().at("head.bias").mutable_data();
  std::fill(bias.begin(), bias.end(), 0.0f);
  bias[1] = static_cast<float>(std::log(p / (1.0 - p)));
  return m;
}

data::Volume noise_volume(const data::Triple& e, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(data::voxel_count(e));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return data::Volume(e, std::move(v), {1, 1, 1});
}

}  // namespace

TEST(Ensemble, DuplicatedCheckpointsEqualSingleModel) {
  auto cfg = unet::ModelConfig::tiny();
  cfg.use_mscsa = true;
  Rng rng(9);
  Model m{cfg, unet::init_params<float>(cfg, rng)};
  const auto vol = noise_volume({12, 16, 16}, 2);
  const unet::PredictOptions opt{{8, 8, 8}, 0.5, true};
  const auto single = unet::predict(vol, m.params, cfg, opt);
  for (std::size_t n : {1u, 2u, 3u, 5u}) {
    const auto ens = ensemble_predict(std::vector<Model>(n, m), vol, opt);
    ASSERT_EQ(ens.shape(), single.shape());
    double worst = 0;
    for (std::size_t i = 0; i < ens.numel(); ++i) worst = std::max(worst, std::abs(double(ens[i]) - single[i]));
    EXPECT_LE(worst, 1e-7) << n << " copies";
  }
}

TEST(Ensemble, AveragesProbabilities) {
  const auto vol = noise_volume({8, 8, 8}, 3);
  const auto ens = ensemble_predict({constant_model(0.2), constant_model(0.8)}, vol, {{8, 8, 8}, 0.5, true});
  const std::size_t n = 512;
  for (std::size_t v = 0; v < n; ++v) {
    EXPECT_NEAR(ens[n + v], 0.5, 1e-6);
    EXPECT_NEAR(ens[v] + ens[n + v], 1.0, 1e-5);
  }
}

TEST(Ensemble, OutputIsDistribution) {
  Rng rng(4);
  std::vector<Model> models;
  for (int i = 0; i < 3; ++i) {
    auto cfg = unet::ModelConfig::tiny();
    models.push_back({cfg, unet::init_params<float>(cfg, rng)});
  }
  const auto ens = ensemble_predict(models, noise_volume({10, 8, 9}, 5), {{8, 8, 8}, 0.5, true});
  const std::size_t n = 10 * 8 * 9;
  for (std::size_t v = 0; v < n; ++v) EXPECT_NEAR(ens[v] + ens[n + v], 1.0, 1e-5);
}

TEST(Ensemble, Errors) {
  const auto vol = noise_volume({8, 8, 8}, 6);
  EXPECT_THROW(ensemble_predict({}, vol), ConfigError);
  EXPECT_THROW(ensemble_predict({constant_model(0.3), constant_model(0.3, 3)}, vol, {{8, 8, 8}, 0.5, true}),
               ConfigError);
}

TEST(ThresholdMask, HalfIsForeground) {
  const data::Volume like({1, 1, 3}, {0, 0, 0}, {1, 1, 1});
  const Tensor<float> prob({2, 1, 1, 3}, std::vector<float>{0.6f, 0.5f, 0.2f, 0.4f, 0.5f, 0.8f});
  const auto m = threshold_mask(prob, like);
  EXPECT_EQ(m[0], 0);
  EXPECT_EQ(m[1], 1);
  EXPECT_EQ(m[2], 1);
}

TEST(SelfTrain, EmptyUnlabeledSetReproducesPlainTraining) {
  const auto dir = fresh_dir("selftrain_empty");
  const auto cases = write_phantoms(dir / "data", 2, 80);
  const auto base = train(tiny_run(1), unet::ModelConfig::tiny(), cases, std::nullopt, dir / "base");
  const auto plain = train(tiny_run(2), unet::ModelConfig::tiny(), cases, std::nullopt, dir / "plain");
  const auto st = self_train({dir / "base" / "best.ckpt"}, cases, {}, tiny_run(2), unet::ModelConfig::tiny(),
                             std::nullopt, dir / "st");
  expect_same_log(plain.log, st.training.log);
  EXPECT_EQ(slurp(dir / "plain" / "train_log.csv"), slurp(dir / "st" / "train_log.csv"));
  EXPECT_EQ(st.merged.size(), cases.size());
  EXPECT_THROW(self_train({}, cases, {}, tiny_run(1), unet::ModelConfig::tiny(), std::nullopt, dir / "x"),
               ConfigError);
}

TEST(SelfTrain, PseudoMasksAreBinaryAndCounted) {
  const auto dir = fresh_dir("selftrain");
  const auto labeled = write_phantoms(dir / "data", 3, 90);
  const auto unlabeled = write_phantoms(dir / "unlabeled", 2, 190, false);
  train(tiny_run(2), unet::ModelConfig::tiny(), labeled, std::nullopt, dir / "base");
  const auto st = self_train({dir / "base" / "best.ckpt", dir / "base" / "final.ckpt"}, labeled, unlabeled,
                             tiny_run(1), unet::ModelConfig::tiny(), 0, dir / "st");
  ASSERT_EQ(st.merged.size(), labeled.size() + unlabeled.size());
  const auto manifest = data::read_manifest(dir / "st" / "merged_manifest.csv");
  ASSERT_EQ(manifest.size(), labeled.size() + unlabeled.size());
  for (std::size_t i = labeled.size(); i < manifest.size(); ++i) {
    const auto& e = manifest[i];
    ASSERT_FALSE(e.mask_path.empty());
    const auto raw = data::read_nifti_image(e.mask_path);
    std::size_t ones = 0;
    for (double v : raw.values) {
      EXPECT_TRUE(v == 0.0 || v == 1.0);
      ones += v == 1.0;
    }
    EXPECT_EQ(e.lesion_volume, ones);
  }
  EXPECT_EQ(st.training.log.size(), 1u);
}
