#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mscsa/core/error.hpp"
#include "mscsa/core/kv.hpp"
#include "mscsa/core/rng.hpp"
#include "mscsa/data/folds.hpp"
#include "mscsa/data/manifest.hpp"
#include "mscsa/data/nifti.hpp"
#include "mscsa/data/sampling.hpp"
#include "mscsa/eval/metrics.hpp"
#include "mscsa/training/losses.hpp"
#include "mscsa/training/optim.hpp"
#include "mscsa/unet/checkpoint.hpp"
#include "mscsa/unet/config.hpp"
#include "mscsa/unet/model.hpp"

namespace mscsa::training {

namespace fs = std::filesystem;
using unet::ModelConfig;
using unet::Triple;

enum class Scheme { standard, dtk10, resunet, selftrain, ensemble };

inline std::string to_string(Scheme s) {
  switch (s) {
    case Scheme::standard: return "default";
    case Scheme::dtk10: return "dtk10";
    case Scheme::resunet: return "resunet";
    case Scheme::selftrain: return "selftrain";
    case Scheme::ensemble: return "ensemble";
  }
  return "default";
}

inline Scheme parse_scheme(const std::string& s) {
  for (auto v : {Scheme::standard, Scheme::dtk10, Scheme::resunet, Scheme::selftrain, Scheme::ensemble}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("scheme must be default, dtk10, resunet, selftrain or ensemble, got '" + s + "'");
}

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 2;
  double lr = 0.01;
  double momentum = 0.99;
  double poly_exponent = 0.9;
  std::uint64_t seed = 0;
  Triple patch{32, 32, 32};
  Scheme scheme = Scheme::standard;
  LossConfig loss;
  double foreground_bias = data::kDefaultForegroundBias;
  bool augment = true;
  std::size_t iterations_per_epoch = 0;  // 0: one pass over the training cases
  std::size_t folds = 5;
  double overlap = 0.5;                  // sliding-window overlap for validation

  void validate() const {
    if (epochs == 0) throw ConfigError("train: epochs must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must be in [0, 1)");
    if (foreground_bias < 0.0 || foreground_bias > 1.0) throw ConfigError("train: foreground_bias must be in [0, 1]");
    if (folds == 0) throw ConfigError("train: folds must be >= 1");
    if (overlap < 0.0 || overlap >= 1.0) throw ConfigError("train: overlap must be in [0, 1)");
    for (auto p : patch) {
      if (p == 0) throw ConfigError("train: patch extents must be positive");
    }
    loss.validate();
  }

  static const std::set<std::string>& keys() {
    static const std::set<std::string> k{"epochs", "batch_size",      "lr",      "momentum", "poly_exponent",
                                         "seed",   "patch",           "scheme",  "loss",     "topk_fraction",
                                         "dice_smooth", "foreground_bias", "augment", "iterations_per_epoch",
                                         "folds",  "overlap"};
    return k;
  }

  /// The dtk10 scheme switches the default loss to Dice + top-k CE.
  static TrainConfig from_kv(const KeyValues& kv) {
    TrainConfig c;
    c.epochs = kv.get_size("epochs", c.epochs);
    c.batch_size = kv.get_size("batch_size", c.batch_size);
    c.lr = kv.get_double("lr", c.lr);
    c.momentum = kv.get_double("momentum", c.momentum);
    c.poly_exponent = kv.get_double("poly_exponent", c.poly_exponent);
    c.seed = kv.get_size("seed", c.seed);
    const auto p = kv.get_sizes("patch", {c.patch[0], c.patch[1], c.patch[2]});
    if (p.size() == 1) {
      c.patch = {p[0], p[0], p[0]};
    } else if (p.size() == 3) {
      c.patch = {p[0], p[1], p[2]};
    } else {
      throw ConfigError("patch: expected one or three extents");
    }
    c.scheme = parse_scheme(kv.get_string("scheme", to_string(c.scheme)));
    if (c.scheme == Scheme::dtk10) c.loss.kind = LossKind::dice_topk;
    c.loss.kind = parse_loss(kv.get_string("loss", to_string(c.loss.kind)));
    c.loss.topk_fraction = kv.get_double("topk_fraction", c.loss.topk_fraction);
    c.loss.dice_smooth = kv.get_double("dice_smooth", c.loss.dice_smooth);
    c.foreground_bias = kv.get_double("foreground_bias", c.foreground_bias);
    c.augment = kv.get_bool("augment", c.augment);
    c.iterations_per_epoch = kv.get_size("iterations_per_epoch", c.iterations_per_epoch);
    c.folds = kv.get_size("folds", c.folds);
    c.overlap = kv.get_double("overlap", c.overlap);
    c.validate();
    return c;
  }

  KeyValues to_kv() const {
    const auto num = [](double v) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      return std::string(buf);
    };
    KeyValues kv;
    kv.set("epochs", std::to_string(epochs));
    kv.set("batch_size", std::to_string(batch_size));
    kv.set("lr", num(lr));
    kv.set("momentum", num(momentum));
    kv.set("poly_exponent", num(poly_exponent));
    kv.set("seed", std::to_string(seed));
    kv.set("patch", join(std::vector<std::size_t>(patch.begin(), patch.end())));
    kv.set("scheme", to_string(scheme));
    kv.set("loss", to_string(loss.kind));
    kv.set("topk_fraction", num(loss.topk_fraction));
    kv.set("dice_smooth", num(loss.dice_smooth));
    kv.set("foreground_bias", num(foreground_bias));
    kv.set("augment", augment ? "on" : "off");
    kv.set("iterations_per_epoch", std::to_string(iterations_per_epoch));
    kv.set("folds", std::to_string(folds));
    kv.set("overlap", num(overlap));
    return kv;
  }
};

/// Model and training settings read from one key=value file.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  /// The resunet scheme defaults the backbone to residual.
  static RunConfig from_kv(const KeyValues& kv) {
    std::set<std::string> known = ModelConfig::keys();
    known.insert(TrainConfig::keys().begin(), TrainConfig::keys().end());
    kv.require_known(known);
    RunConfig r;
    r.train = TrainConfig::from_kv(kv);
    KeyValues model_kv = kv;
    if (r.train.scheme == Scheme::resunet && !kv.has("backbone")) model_kv.set("backbone", "res");
    r.model = ModelConfig::from_kv(model_kv);
    r.model.validate_extents(r.train.patch);
    return r;
  }

  KeyValues to_kv() const {
    KeyValues kv = model.to_kv();
    kv.merge(train.to_kv());
    return kv;
  }
};

struct Case {
  std::string id;
  data::Volume volume;
  data::LabelMask mask;
};

inline std::vector<Case> load_cases(const std::vector<data::ManifestEntry>& entries) {
  std::vector<Case> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    if (e.mask_path.empty()) throw DataError("case '" + e.id + "' has no mask");
    auto v = data::nifti_read_volume(e.volume_path);
    auto m = data::nifti_read_mask(e.mask_path);
    if (v.extents != m.extents()) throw DataError("case '" + e.id + "': volume and mask extents differ");
    out.push_back({e.id, std::move(v), std::move(m)});
  }
  return out;
}

/// Never placed in a validation fold.
inline constexpr std::size_t kTrainOnly = std::numeric_limits<std::size_t>::max();

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Cases outside `fold` train, cases inside validate. Without a fold every
/// case trains and validation runs on the training set.
inline Split make_split(const std::vector<std::size_t>& fold_of, std::size_t k, std::optional<std::size_t> fold) {
  if (fold && *fold >= k) {
    throw ConfigError("fold " + std::to_string(*fold) + " out of range for " + std::to_string(k) + " folds");
  }
  Split s;
  for (std::size_t i = 0; i < fold_of.size(); ++i) {
    if (fold && fold_of[i] == *fold) {
      s.val.push_back(i);
    } else {
      s.train.push_back(i);
    }
  }
  if (s.train.empty()) throw ConfigError("empty training fold");
  if (!fold) s.val = s.train;
  return s;
}

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_dice = 0;
};

inline constexpr const char* kLogHeader = "epoch,lr,train_loss,val_dice";

inline std::string format_log_row(const EpochLog& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g", r.epoch, r.lr, r.train_loss, r.val_dice);
  return buf;
}

struct TrainResult {
  NetworkParams<float> best;
  NetworkParams<float> last;
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_val_dice = -1.0;
};

struct Model {
  ModelConfig cfg;
  NetworkParams<float> params;
};

inline void write_kv_file(const KeyValues& kv, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << kv.str();
}

/// Reads a checkpoint and the model.cfg stored next to it.
inline Model load_model(const fs::path& checkpoint) {
  const fs::path cfg_path = checkpoint.parent_path() / "model.cfg";
  if (!fs::exists(cfg_path)) throw DataError("missing " + cfg_path.string() + " next to checkpoint");
  const auto kv = KeyValues::read(cfg_path);
  kv.require_known(ModelConfig::keys());
  Model m{ModelConfig::from_kv(kv), unet::load_checkpoint(checkpoint)};
  unet::check_params(m.params, m.cfg);
  return m;
}

/// Mean case Dice of argmax predictions.
inline double mean_case_dice(const std::vector<Case>& cases, const std::vector<std::size_t>& which,
                             const NetworkParams<float>& p, const ModelConfig& cfg, const unet::PredictOptions& opt) {
  if (which.empty()) return 0.0;
  double total = 0;
  for (auto i : which) {
    const auto prob = unet::predict(cases[i].volume, p, cfg, opt);
    total += eval::dice_score(unet::argmax_mask(prob, cases[i].volume), cases[i].mask);
  }
  return total / static_cast<double>(which.size());
}

namespace detail {

struct Batch {
  Tensor<float> image;   // [B, 1, p, p, p]
  Tensor<float> labels;  // [B, p, p, p]
};

inline Batch make_batch(const std::vector<Case>& cases, const std::vector<std::size_t>& idx, const TrainConfig& run,
                        Rng& rng) {
  const std::size_t pn = data::voxel_count(run.patch), B = idx.size();
  std::vector<float> img(B * pn), lab(B * pn);
  for (std::size_t b = 0; b < B; ++b) {
    const Case& c = cases[idx[b]];
    auto pair = data::sample_patch(c.volume, c.mask, run.patch, run.foreground_bias, rng);
    if (run.augment) pair = data::augment(pair, rng);
    auto v = pair.image.voxels;
    unet::zscore(v);
    std::copy(v.begin(), v.end(), img.begin() + static_cast<std::ptrdiff_t>(b * pn));
    for (std::size_t i = 0; i < pn; ++i) lab[b * pn + i] = pair.mask[i] ? 1.0f : 0.0f;
  }
  const auto& p = run.patch;
  return {Tensor<float>({B, 1, p[0], p[1], p[2]}, std::move(img)), Tensor<float>({B, p[0], p[1], p[2]}, std::move(lab))};
}

/// Weights are drawn from `seed`, patches from an independent stream.
inline std::uint64_t data_seed(std::uint64_t seed) { return seed ^ 0xD1B54A32D192ED03ULL; }

}  // namespace detail

/// Trains a fresh model. Each epoch shuffles the training cases, draws
/// foreground-biased patch batches, steps SGD at the epoch's poly rate and
/// scores the validation cases. With a non-empty `out_dir` it writes
/// train_log.csv, model.cfg, train.cfg, best.ckpt and final.ckpt.
inline TrainResult train_cases(const TrainConfig& run, const ModelConfig& model, const std::vector<Case>& cases,
                               const Split& split, const fs::path& out_dir = {}) {
  run.validate();
  model.validate();
  model.validate_extents(run.patch);
  if (split.train.empty()) throw ConfigError("empty training fold");
  for (auto i : split.train) {
    if (i >= cases.size()) throw ConfigError("split index out of range");
  }

  Rng init_rng(run.seed);
  Rng rng(detail::data_seed(run.seed));
  TrainResult result{unet::init_params<float>(model, init_rng), {}, {}, 0, -1.0};
  NetworkParams<float> params = result.best.clone();
  SgdState<float> state;

  std::ofstream log;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_kv_file(model.to_kv(), out_dir / "model.cfg");
    write_kv_file(run.to_kv(), out_dir / "train.cfg");
    log.open(out_dir / "train_log.csv");
    if (!log) throw DataError("cannot write " + (out_dir / "train_log.csv").string());
    log << kLogHeader << '\n';
  }

  const unet::PredictOptions popt{run.patch, run.overlap, true};
  const std::size_t n = split.train.size();
  const std::size_t iters = run.iterations_per_epoch ? run.iterations_per_epoch : (n + run.batch_size - 1) / run.batch_size;
  std::vector<std::size_t> order = split.train;

  for (std::size_t epoch = 0; epoch < run.epochs; ++epoch) {
    const double lr = poly_lr(run.lr, epoch, run.epochs, run.poly_exponent);
    rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0;
    for (std::size_t it = 0; it < iters; ++it) {
      std::vector<std::size_t> idx(run.batch_size);
      for (std::size_t b = 0; b < run.batch_size; ++b) idx[b] = order[(it * run.batch_size + b) % n];
      const auto batch = detail::make_batch(cases, idx, run, rng);
      const auto logits = unet::forward(batch.image, params, model, ops::Mode::train);
      const auto loss = segmentation_loss(logits, batch.labels, run.loss);
      const double value = loss[0];
      if (!std::isfinite(value)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", iteration " + std::to_string(it));
      }
      params.zero_grad();
      backward(loss);
      sgd_step(params, state, lr, run.momentum);
      loss_sum += value;
    }
    EpochLog row{epoch, lr, loss_sum / static_cast<double>(iters), mean_case_dice(cases, split.val, params, model, popt)};
    result.log.push_back(row);
    if (log.is_open()) log << format_log_row(row) << '\n' << std::flush;
    if (row.val_dice > result.best_val_dice) {
      result.best_val_dice = row.val_dice;
      result.best_epoch = epoch;
      result.best = params.clone();
      if (!out_dir.empty()) unet::save_checkpoint(result.best, out_dir / "best.ckpt");
    }
  }
  result.last = std::move(params);
  if (!out_dir.empty()) unet::save_checkpoint(result.last, out_dir / "final.ckpt");
  return result;
}

/// Serpentine size-balanced folds over the lesion volumes of the first `count` cases.
inline std::vector<std::size_t> assign_folds(const std::vector<Case>& cases, std::size_t k, std::size_t count) {
  std::vector<data::CaseVolume> cv;
  for (std::size_t i = 0; i < count; ++i) cv.push_back({cases[i].id, cases[i].mask.lesion_volume()});
  return data::fold_assignment(cv, k);
}

namespace detail {

/// Explicit assignment if given, otherwise computed; k is inferred from an explicit assignment.
inline Split split_for(const std::vector<Case>& cases, std::size_t labeled, const TrainConfig& run,
                       std::optional<std::size_t> fold, const std::vector<std::size_t>& given) {
  std::vector<std::size_t> fold_of(labeled, 0);
  std::size_t k = run.folds;
  if (!given.empty()) {
    if (given.size() != labeled) throw ConfigError("fold assignment does not match the manifest");
    fold_of = given;
    k = *std::max_element(given.begin(), given.end()) + 1;
  } else if (fold) {
    fold_of = assign_folds(cases, k, labeled);
  }
  fold_of.resize(cases.size(), kTrainOnly);
  return make_split(fold_of, k, fold);
}

}  // namespace detail

/// Trains on the manifest minus `fold` (every case when no fold is given).
/// Folds come from `fold_of` when supplied, else from size-balanced dealing
/// into run.folds folds.
inline TrainResult train(const TrainConfig& run, const ModelConfig& model,
                         const std::vector<data::ManifestEntry>& manifest, std::optional<std::size_t> fold,
                         const fs::path& out_dir = {}, const std::vector<std::size_t>& fold_of = {}) {
  if (manifest.empty()) throw ConfigError("empty training fold");
  const auto cases = load_cases(manifest);
  return train_cases(run, model, cases, detail::split_for(cases, cases.size(), run, fold, fold_of), out_dir);
}

/// Mean of per-model sliding-window softmax maps, [C, H, W, D].
inline Tensor<float> ensemble_predict(const std::vector<Model>& models, const data::Volume& volume,
                                      const unet::PredictOptions& opt = {}) {
  if (models.empty()) throw ConfigError("ensemble_predict: need at least one checkpoint");
  const std::size_t C = models.front().cfg.num_classes;
  for (const auto& m : models) {
    if (m.cfg.num_classes != C) throw ConfigError("ensemble_predict: class counts differ between checkpoints");
  }
  std::vector<double> acc;
  Shape shape;
  for (const auto& m : models) {
    const auto prob = unet::predict(volume, m.params, m.cfg, opt);
    if (acc.empty()) {
      acc.assign(prob.numel(), 0.0);
      shape = prob.shape();
    }
    const auto d = prob.data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += d[i];
  }
  std::vector<float> out(acc.size());
  const double inv = static_cast<double>(models.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / inv);
  return Tensor<float>(std::move(shape), std::move(out));
}

/// Foreground probability >= threshold.
inline data::LabelMask threshold_mask(const Tensor<float>& prob, const data::Volume& like, double threshold = 0.5) {
  const std::size_t n = prob.numel() / prob.dim(0);
  std::vector<std::uint8_t> m(n);
  const auto d = prob.data();
  for (std::size_t v = 0; v < n; ++v) m[v] = d[n + v] >= threshold;
  data::LabelMask out(like.extents, std::move(m), like.spacing);
  out.affine = like.affine;
  return out;
}

struct SelfTrainResult {
  TrainResult training;
  std::vector<data::ManifestEntry> merged;
};

/// One round: pseudo-label the unlabeled cases with the (ensembled) base
/// checkpoints, then train a fresh model on labeled + pseudo-labeled cases.
/// Pseudo-labeled cases always train and never validate. An empty unlabeled
/// set degenerates to plain training.
inline SelfTrainResult self_train(const std::vector<fs::path>& base_checkpoints,
                                  const std::vector<data::ManifestEntry>& labeled,
                                  const std::vector<data::ManifestEntry>& unlabeled, const TrainConfig& run,
                                  const ModelConfig& model, std::optional<std::size_t> fold, const fs::path& out_dir,
                                  const std::vector<std::size_t>& fold_of = {}) {
  if (base_checkpoints.empty()) throw ConfigError("self_train: need at least one base checkpoint");
  if (labeled.empty()) throw ConfigError("empty training fold");
  std::vector<Model> base;
  for (const auto& p : base_checkpoints) base.push_back(load_model(p));

  auto cases = load_cases(labeled);
  const std::size_t n_labeled = cases.size();

  SelfTrainResult r;
  r.merged = labeled;
  const unet::PredictOptions popt{run.patch, run.overlap, true};
  for (const auto& e : unlabeled) {
    auto volume = data::nifti_read_volume(e.volume_path);
    auto mask = threshold_mask(ensemble_predict(base, volume, popt), volume);
    const fs::path mask_path = out_dir / "pseudo" / (e.id + "_mask.nii");
    fs::create_directories(mask_path.parent_path());
    data::nifti_write(mask, mask_path);
    r.merged.push_back({e.id, e.volume_path, mask_path, mask.lesion_volume()});
    cases.push_back({e.id, std::move(volume), std::move(mask)});
  }
  if (!out_dir.empty() && !unlabeled.empty()) data::write_manifest(out_dir / "merged_manifest.csv", r.merged);
  r.training = train_cases(run, model, cases, detail::split_for(cases, n_labeled, run, fold, fold_of), out_dir);
  return r;
}

}  // namespace mscsa::training
