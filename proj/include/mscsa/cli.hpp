#pragma once

// Command-line front end. Exit codes: 0 success, 1 usage or configuration
// error, 2 data error, 3 numeric failure.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mscsa/core/error.hpp"
#include "mscsa/core/kv.hpp"
#include "mscsa/data/folds.hpp"
#include "mscsa/data/manifest.hpp"
#include "mscsa/data/nifti.hpp"
#include "mscsa/data/phantom.hpp"
#include "mscsa/eval/report.hpp"
#include "mscsa/gradcheck_suite.hpp"
#include "mscsa/training/train.hpp"

namespace mscsa::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

/// Flags shared by train and selftrain that override config-file keys.
struct RunFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string mscsa, backbone, loss, scheme;
  std::optional<std::size_t> epochs;

  void add_to(CLI::App* app) {
    app->add_option("--config", config, "key = value run configuration file")->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "random seed");
    app->add_option("--mscsa", mscsa, "attach the MSCSA module")->check(CLI::IsMember({"on", "off"}));
    app->add_option("--backbone", backbone, "U-Net backbone")->check(CLI::IsMember({"plain", "res"}));
    app->add_option("--loss", loss, "training loss")->check(CLI::IsMember({"dice_ce", "dtk10"}));
    app->add_option("--scheme", scheme, "training scheme")
        ->check(CLI::IsMember({"default", "dtk10", "resunet", "selftrain", "ensemble"}));
    app->add_option("--epochs", epochs, "number of epochs");
  }

  training::RunConfig resolve() const {
    KeyValues kv = config.empty() ? KeyValues{} : KeyValues::read(config);
    if (seed) kv.set("seed", std::to_string(*seed));
    if (!mscsa.empty()) kv.set("mscsa", mscsa);
    if (!backbone.empty()) kv.set("backbone", backbone);
    if (!loss.empty()) kv.set("loss", loss);
    if (!scheme.empty()) kv.set("scheme", scheme);
    if (epochs) kv.set("epochs", std::to_string(*epochs));
    return training::RunConfig::from_kv(kv);
  }
};

inline std::optional<std::size_t> fold_arg(int fold) {
  if (fold < 0) return std::nullopt;
  return static_cast<std::size_t>(fold);
}

inline std::vector<std::size_t> fold_file(const std::string& path, const std::vector<data::ManifestEntry>& m) {
  return path.empty() ? std::vector<std::size_t>{} : data::read_folds(path, m);
}

inline std::vector<fs::path> as_paths(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

/// Patch and overlap recorded next to a checkpoint by training, if any.
inline unet::PredictOptions predict_options_for(const fs::path& checkpoint) {
  unet::PredictOptions opt;
  const fs::path cfg = checkpoint.parent_path() / "train.cfg";
  if (fs::exists(cfg)) {
    const auto run = training::TrainConfig::from_kv(KeyValues::read(cfg));
    opt.patch = run.patch;
    opt.overlap = run.overlap;
  }
  return opt;
}

inline int cmd_phantom(const fs::path& out_dir, std::uint64_t seed, std::size_t count, std::size_t extent,
                       std::size_t unlabeled, std::ostream& out) {
  if (count == 0) throw ConfigError("phantom: --count must be positive");
  Rng seeds(seed);
  const auto make = [&](const fs::path& dir, const std::string& prefix, std::size_t n, bool labeled) {
    std::vector<data::ManifestEntry> entries;
    for (std::size_t i = 0; i < n; ++i) {
      data::PhantomSpec spec;
      spec.extents = {extent, extent, extent};
      spec.seed = seeds.next();
      const auto ph = data::generate_phantom(spec);
      char id[32];
      std::snprintf(id, sizeof id, "%s_%03zu", prefix.c_str(), i);
      data::ManifestEntry e{id, dir / (std::string(id) + ".nii"), {}, 0};
      data::nifti_write(ph.volume, e.volume_path);
      if (labeled) {
        e.mask_path = dir / (std::string(id) + "_mask.nii");
        e.lesion_volume = ph.mask.lesion_volume();
        data::nifti_write(ph.mask, e.mask_path);
      }
      for (const auto& w : ph.warnings) out << "warning: " << id << ": " << w << '\n';
      entries.push_back(std::move(e));
    }
    return entries;
  };
  fs::create_directories(out_dir);
  const auto labeled = make(out_dir / "images", "case", count, true);
  data::write_manifest(out_dir / "manifest.csv", labeled);
  out << "wrote " << labeled.size() << " cases to " << (out_dir / "manifest.csv").string() << '\n';
  if (unlabeled > 0) {
    const auto extra = make(out_dir / "unlabeled", "unl", unlabeled, false);
    data::write_manifest(out_dir / "unlabeled_manifest.csv", extra);
    out << "wrote " << extra.size() << " unlabeled cases to " << (out_dir / "unlabeled_manifest.csv").string()
        << '\n';
  }
  return kOk;
}

inline int cmd_folds(const fs::path& manifest_path, std::size_t k, const std::string& dealing, const fs::path& out_dir,
                     std::ostream& out) {
  const auto manifest = data::read_manifest(manifest_path);
  std::vector<data::CaseVolume> cv;
  for (const auto& e : manifest) cv.push_back({e.id, e.lesion_volume});
  const auto d = dealing == "round_robin" ? data::Dealing::round_robin : data::Dealing::serpentine;
  const auto fold = data::fold_assignment(cv, k, d);
  data::write_folds(out_dir / "folds.csv", manifest, fold);
  std::vector<double> sum(k, 0.0);
  std::vector<std::size_t> n(k, 0);
  for (std::size_t i = 0; i < fold.size(); ++i) {
    sum[fold[i]] += static_cast<double>(cv[i].lesion_volume);
    ++n[fold[i]];
  }
  for (std::size_t f = 0; f < k; ++f) {
    out << "fold " << f << ": " << n[f] << " cases, mean lesion volume " << sum[f] / static_cast<double>(n[f]) << '\n';
  }
  out << "spread of fold means: " << data::fold_mean_spread(cv, fold, k) << '\n';
  return kOk;
}

inline void print_training(const training::TrainResult& r, const fs::path& out_dir, std::ostream& out) {
  const auto& last = r.log.back();
  out << "epochs " << r.log.size() << ", final train_loss " << last.train_loss << ", best val_dice "
      << r.best_val_dice << " at epoch " << r.best_epoch << '\n';
  out << "checkpoints in " << out_dir.string() << '\n';
}

inline int cmd_predict(const std::vector<std::string>& checkpoints, const fs::path& manifest_path,
                       const fs::path& out_dir, int fold, const std::string& folds_path, std::ostream& out) {
  std::vector<training::Model> models;
  for (const auto& c : checkpoints) models.push_back(training::load_model(c));
  const auto opt = predict_options_for(checkpoints.front());
  const auto manifest = data::read_manifest(manifest_path);
  std::vector<std::size_t> fold_of;
  if (fold >= 0) {
    if (folds_path.empty()) throw ConfigError("predict: --fold needs --folds");
    fold_of = data::read_folds(folds_path, manifest);
  }
  fs::create_directories(out_dir);
  std::size_t written = 0;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    if (fold >= 0 && fold_of[i] != static_cast<std::size_t>(fold)) continue;
    const auto volume = data::nifti_read_volume(manifest[i].volume_path);
    const auto mask = unet::argmax_mask(training::ensemble_predict(models, volume, opt), volume);
    data::nifti_write(mask, eval::prediction_path(out_dir, manifest[i].id));
    ++written;
  }
  out << "wrote " << written << " predictions from " << models.size() << " checkpoint(s) to " << out_dir.string()
      << '\n';
  return kOk;
}

inline int cmd_eval(const fs::path& manifest_path, const fs::path& predictions, const fs::path& out_dir,
                    std::size_t threshold, std::ostream& out) {
  const auto r = eval::report(data::read_manifest(manifest_path), predictions, out_dir, threshold);
  out << "all:   " << r.all.cases << " cases, mean dice " << eval::format_real(r.all.mean_dice) << ", lesion F1 "
      << eval::format_real(r.all.f1) << '\n';
  out << "small: " << r.small.cases << " cases (< " << threshold << " voxels), mean dice "
      << eval::format_real(r.small.mean_dice) << ", lesion F1 " << eval::format_real(r.small.f1) << '\n';
  out << "wrote metrics.csv, summary.csv, dice_vs_volume.csv to " << out_dir.string() << '\n';
  return kOk;
}

inline int cmd_gradcheck(double tol, std::ostream& out) {
  double worst = 0;
  bool ok = true;
  run_gradcheck_suite([&](const GradcheckOutcome& o) {
    const bool pass = o.result.passed(tol);
    ok = ok && pass;
    worst = std::max(worst, o.result.max_rel_error);
    out << std::left << std::setw(28) << o.name << " max_rel_error " << std::scientific << std::setprecision(3)
        << o.result.max_rel_error << std::defaultfloat << "  checked " << o.result.checked << (pass ? "" : "  FAIL")
        << '\n'
        << std::flush;
  });
  out << "max relative error " << std::scientific << std::setprecision(3) << worst << std::defaultfloat
      << (ok ? " (pass)" : " (FAIL)") << '\n';
  return ok ? kOk : kNumeric;
}

/// Cross-scale attention (queries at full resolution, keys/values from the
/// three strided branches) against full self-attention on the same tokens.
inline int cmd_bench(std::size_t extent, std::size_t channels, std::size_t heads, std::size_t repeat,
                     std::ostream& out) {
  attention::MscsaConfig cfg;
  cfg.heads = heads;
  cfg.target_stage = 0;
  cfg.validate(1, channels);
  Rng rng(1);
  NetworkParams<float> p;
  attention::init_csa_params(p, "csa", channels, cfg, rng);
  std::vector<float> v(channels * extent * extent * extent);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  const Tensor<float> x({1, channels, extent, extent, extent}, v);
  using clock = std::chrono::steady_clock;
  const auto time = [&](auto&& fn) {
    double best = 1e300;
    for (std::size_t r = 0; r < repeat; ++r) {
      const auto t0 = clock::now();
      fn();
      best = std::min(best, std::chrono::duration<double, std::milli>(clock::now() - t0).count());
    }
    return best;
  };
  std::size_t kv_tokens = 0;
  const double csa_ms = time([&] {
    const auto proj = attention::msp_project(x, p, "csa", cfg);
    kv_tokens = proj.tokens_kv;
    (void)attention::cross_scale_attention(proj.q, proj.k, proj.v);
  });
  const std::size_t tokens = extent * extent * extent;
  const double full_ms = time([&] {
    const auto q = attention::volume_to_tokens(ops::pointwise(x, p.weight("csa.q.weight"), p.weight("csa.q.bias")), heads);
    const auto k = attention::volume_to_tokens(
        ops::conv3d(x, p.weight("csa.s1.k.weight"), p.weight("csa.s1.k.bias"), {}), heads);
    const auto val = attention::volume_to_tokens(
        ops::conv3d(x, p.weight("csa.s1.v.weight"), p.weight("csa.s1.v.bias"), {}), heads);
    (void)attention::cross_scale_attention(q, k, val);
  });
  out << "volume " << extent << "^3, channels " << channels << ", heads " << heads << '\n';
  out << "cross-scale attention: " << tokens << " queries x " << kv_tokens << " keys, " << csa_ms << " ms\n";
  out << "full self-attention:   " << tokens << " queries x " << tokens << " keys, " << full_ms << " ms\n";
  return kOk;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multi-stage cross-scale attention 3D U-Net for lesion segmentation", "mscsa"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  std::string out_dir, manifest, folds_path, dealing = "serpentine", predictions, unlabeled;
  std::uint64_t seed = 0;
  std::size_t count = 8, extent = 32, n_unlabeled = 0, k = 5, threshold = eval::kSmallLesionThreshold;
  std::size_t channels = 32, heads = 4, repeat = 3;
  int fold = -1;
  double tol = 1e-4;
  std::vector<std::string> checkpoints;
  RunFlags train_flags, self_flags;

  auto* phantom = app.add_subcommand("phantom", "generate a synthetic lesion dataset and manifest");
  phantom->add_option("--out", out_dir, "output directory")->required();
  phantom->add_option("--seed", seed, "random seed");
  phantom->add_option("--count", count, "labeled cases");
  phantom->add_option("--extent", extent, "cube edge in voxels");
  phantom->add_option("--unlabeled", n_unlabeled, "extra cases without masks");

  auto* folds = app.add_subcommand("folds", "size-balanced k-fold split of a manifest");
  folds->add_option("--manifest", manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
  folds->add_option("--k", k, "number of folds");
  folds->add_option("--dealing", dealing, "fold dealing order")
      ->check(CLI::IsMember({"serpentine", "round_robin"}));
  folds->add_option("--out", out_dir, "output directory")->required();

  auto* train = app.add_subcommand("train", "train one model");
  train_flags.add_to(train);
  train->add_option("--manifest", manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
  train->add_option("--fold", fold, "held-out fold (-1: train on everything)");
  train->add_option("--folds", folds_path, "folds.csv from the folds command")->check(CLI::ExistingFile);
  train->add_option("--out", out_dir, "run directory")->required();

  auto* predict = app.add_subcommand("predict", "sliding-window prediction of every manifest case");
  predict->add_option("--checkpoint", checkpoints, "checkpoint; repeat to average several")
      ->required()
      ->check(CLI::ExistingFile);
  predict->add_option("--manifest", manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
  predict->add_option("--fold", fold, "only cases of this fold");
  predict->add_option("--folds", folds_path, "folds.csv")->check(CLI::ExistingFile);
  predict->add_option("--out", out_dir, "prediction directory")->required();

  auto* ensemble = app.add_subcommand("ensemble", "predict with the softmax mean of several checkpoints");
  ensemble->add_option("--checkpoint", checkpoints, "checkpoints to average")->required()->check(CLI::ExistingFile);
  ensemble->add_option("--manifest", manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
  ensemble->add_option("--fold", fold, "only cases of this fold");
  ensemble->add_option("--folds", folds_path, "folds.csv")->check(CLI::ExistingFile);
  ensemble->add_option("--out", out_dir, "prediction directory")->required();

  auto* selftrain = app.add_subcommand("selftrain", "pseudo-label unlabeled cases, then retrain");
  self_flags.add_to(selftrain);
  selftrain->add_option("--checkpoint", checkpoints, "base checkpoint(s)")->required()->check(CLI::ExistingFile);
  selftrain->add_option("--manifest", manifest, "labeled manifest")->required()->check(CLI::ExistingFile);
  selftrain->add_option("--unlabeled", unlabeled, "unlabeled manifest")->required()->check(CLI::ExistingFile);
  selftrain->add_option("--fold", fold, "held-out fold (-1: train on everything)");
  selftrain->add_option("--folds", folds_path, "folds.csv")->check(CLI::ExistingFile);
  selftrain->add_option("--out", out_dir, "run directory")->required();

  auto* evaluate = app.add_subcommand("eval", "Dice and lesion-wise F1 report");
  evaluate->add_option("--manifest", manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--predictions", predictions, "directory of <id>_pred.nii")->required();
  evaluate->add_option("--out", out_dir, "report directory")->required();
  evaluate->add_option("--threshold", threshold, "small-lesion threshold in voxels");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  gradcheck->add_option("--tol", tol, "maximum relative error");

  auto* bench = app.add_subcommand("bench", "time cross-scale vs full attention");
  bench->add_option("--extent", extent, "cube edge of the feature map")->default_val(16);
  bench->add_option("--channels", channels, "channels");
  bench->add_option("--heads", heads, "attention heads");
  bench->add_option("--repeat", repeat, "repetitions (best time reported)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (phantom->parsed()) return cmd_phantom(out_dir, seed, count, extent, n_unlabeled, out);
    if (folds->parsed()) return cmd_folds(manifest, k, dealing, out_dir, out);
    if (train->parsed()) {
      const auto cfg = train_flags.resolve();
      const auto m = data::read_manifest(manifest);
      const auto r = training::train(cfg.train, cfg.model, m, fold_arg(fold), out_dir, fold_file(folds_path, m));
      print_training(r, out_dir, out);
      return kOk;
    }
    if (predict->parsed() || ensemble->parsed()) {
      return cmd_predict(checkpoints, manifest, out_dir, fold, folds_path, out);
    }
    if (selftrain->parsed()) {
      const auto cfg = self_flags.resolve();
      const auto m = data::read_manifest(manifest);
      const auto r = training::self_train(as_paths(checkpoints), m, data::read_manifest(unlabeled), cfg.train,
                                          cfg.model, fold_arg(fold), out_dir, fold_file(folds_path, m));
      out << "merged manifest: " << r.merged.size() << " cases\n";
      print_training(r.training, out_dir, out);
      return kOk;
    }
    if (evaluate->parsed()) return cmd_eval(manifest, predictions, out_dir, threshold, out);
    if (gradcheck->parsed()) return cmd_gradcheck(tol, out);
    if (bench->parsed()) return cmd_bench(extent, channels, heads, repeat, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const DimensionError& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}

}  // namespace mscsa::cli
