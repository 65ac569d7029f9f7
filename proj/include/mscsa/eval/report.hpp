#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "mscsa/core/error.hpp"
#include "mscsa/data/manifest.hpp"
#include "mscsa/data/nifti.hpp"
#include "mscsa/eval/metrics.hpp"

namespace mscsa::eval {

namespace fs = std::filesystem;

inline constexpr std::size_t kSmallLesionThreshold = 1000;
inline constexpr const char* kMetricsHeader = "id,lesion_volume,dice,tp,fp,fn,f1";
inline constexpr const char* kSummaryHeader = "subset,threshold,cases,mean_dice,tp,fp,fn,f1";
inline constexpr const char* kDiceVolumeHeader = "lesion_volume,dice";

/// Prediction file expected for a case id.
inline fs::path prediction_path(const fs::path& dir, const std::string& id) { return dir / (id + "_pred.nii"); }

struct CaseMetrics {
  std::string id;
  std::size_t lesion_volume = 0;
  double dice = 0;
  LesionF1 lesions;
};

/// Mean case Dice and lesion counts pooled over cases (F1 from the pooled counts).
struct Aggregate {
  std::size_t cases = 0;
  double mean_dice = std::numeric_limits<double>::quiet_NaN();
  std::size_t tp = 0, fp = 0, fn = 0;
  double f1 = std::numeric_limits<double>::quiet_NaN();
};

struct MetricsReport {
  std::vector<CaseMetrics> rows;  // manifest order
  std::size_t threshold = kSmallLesionThreshold;
  Aggregate all;
  Aggregate small;  // rows with lesion_volume < threshold
};

inline CaseMetrics case_metrics(const std::string& id, const LabelMask& pred, const LabelMask& gt) {
  return {id, gt.lesion_volume(), dice_score(pred, gt), lesion_f1(pred, gt)};
}

/// Empty subsets keep NaN for the means.
inline Aggregate aggregate(const std::vector<CaseMetrics>& rows, std::size_t threshold = 0) {
  Aggregate a;
  double total = 0;
  for (const auto& r : rows) {
    if (threshold != 0 && r.lesion_volume >= threshold) continue;
    ++a.cases;
    total += r.dice;
    a.tp += r.lesions.tp;
    a.fp += r.lesions.fp;
    a.fn += r.lesions.fn;
  }
  if (a.cases > 0) {
    a.mean_dice = total / static_cast<double>(a.cases);
    a.f1 = f1_from_counts(a.tp, a.fp, a.fn);
  }
  return a;
}

inline MetricsReport build_report(std::vector<CaseMetrics> rows, std::size_t threshold = kSmallLesionThreshold) {
  if (threshold == 0) throw ConfigError("report: threshold must be positive");
  MetricsReport r;
  r.rows = std::move(rows);
  r.threshold = threshold;
  r.all = aggregate(r.rows);
  r.small = aggregate(r.rows, threshold);
  return r;
}

/// %.17g: values read back from the CSV are the exact doubles written.
inline std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_report(const MetricsReport& r, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const auto open = [&](const char* name) {
    std::ofstream f(out_dir / name);
    if (!f) throw DataError("cannot write " + (out_dir / name).string());
    return f;
  };
  auto metrics = open("metrics.csv");
  metrics << kMetricsHeader << '\n';
  for (const auto& c : r.rows) {
    metrics << c.id << ',' << c.lesion_volume << ',' << format_real(c.dice) << ',' << c.lesions.tp << ','
            << c.lesions.fp << ',' << c.lesions.fn << ',' << format_real(c.lesions.f1) << '\n';
  }
  auto summary = open("summary.csv");
  summary << kSummaryHeader << '\n';
  const auto row = [&](const char* name, std::size_t threshold, const Aggregate& a) {
    summary << name << ',' << threshold << ',' << a.cases << ',' << format_real(a.mean_dice) << ',' << a.tp << ','
            << a.fp << ',' << a.fn << ',' << format_real(a.f1) << '\n';
  };
  row("all", 0, r.all);
  row("small", r.threshold, r.small);
  auto dv = open("dice_vs_volume.csv");
  dv << kDiceVolumeHeader << '\n';
  for (const auto& c : r.rows) dv << c.lesion_volume << ',' << format_real(c.dice) << '\n';
}

/// Scores `<id>_pred.nii` in `predictions` against every labeled manifest
/// case and writes metrics.csv, summary.csv and dice_vs_volume.csv to
/// `out_dir`. Missing predictions are all listed in one DataError.
inline MetricsReport report(const std::vector<data::ManifestEntry>& manifest, const fs::path& predictions,
                            const fs::path& out_dir, std::size_t threshold = kSmallLesionThreshold) {
  std::vector<std::string> missing;
  for (const auto& e : manifest) {
    if (e.mask_path.empty()) throw DataError("report: case '" + e.id + "' has no ground-truth mask");
    if (!fs::exists(prediction_path(predictions, e.id))) missing.push_back(e.id);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& id : missing) list += (list.empty() ? "" : ", ") + prediction_path(predictions, id).string();
    throw DataError("missing predictions: " + list);
  }
  std::vector<CaseMetrics> rows;
  for (const auto& e : manifest) {
    const auto gt = data::nifti_read_mask(e.mask_path);
    const auto pred = data::nifti_read_mask(prediction_path(predictions, e.id));
    if (gt.extents() != pred.extents()) throw DataError("report: prediction extents differ for '" + e.id + "'");
    rows.push_back(case_metrics(e.id, pred, gt));
  }
  auto r = build_report(std::move(rows), threshold);
  write_report(r, out_dir);
  return r;
}

}  // namespace mscsa::eval
