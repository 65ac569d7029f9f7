#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "mscsa/core/error.hpp"

namespace mscsa::data {

struct CaseVolume {
  std::string id;
  std::size_t lesion_volume = 0;
};

enum class Dealing {
  round_robin,  // 0,1,..,k-1, 0,1,..
  serpentine,   // 0,1,..,k-1, k-1,..,1,0, 0,1,..
};

/// Sorts cases by lesion volume (descending, ties keep input order) and deals
/// them into k folds. Returns fold index per input case.
inline std::vector<std::size_t> fold_assignment(const std::vector<CaseVolume>& cases, std::size_t k,
                                                Dealing dealing = Dealing::serpentine) {
  if (k == 0) throw ConfigError("folds: k must be positive");
  if (k > cases.size()) {
    throw ConfigError("folds: k=" + std::to_string(k) + " exceeds case count " + std::to_string(cases.size()));
  }
  std::vector<std::size_t> order(cases.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return cases[a].lesion_volume > cases[b].lesion_volume; });
  std::vector<std::size_t> fold(cases.size());
  for (std::size_t p = 0; p < order.size(); ++p) {
    const std::size_t round = p / k, slot = p % k;
    fold[order[p]] = (dealing == Dealing::serpentine && round % 2 == 1) ? k - 1 - slot : slot;
  }
  return fold;
}

inline std::vector<std::vector<CaseVolume>> size_balanced_folds(const std::vector<CaseVolume>& cases, std::size_t k,
                                                                Dealing dealing = Dealing::serpentine) {
  const auto fold = fold_assignment(cases, k, dealing);
  std::vector<std::vector<CaseVolume>> out(k);
  std::vector<std::size_t> order(cases.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return cases[a].lesion_volume > cases[b].lesion_volume; });
  for (auto i : order) out[fold[i]].push_back(cases[i]);
  return out;
}

/// Largest minus smallest per-fold mean lesion volume.
inline double fold_mean_spread(const std::vector<CaseVolume>& cases, const std::vector<std::size_t>& fold,
                               std::size_t k) {
  std::vector<double> sum(k, 0.0), count(k, 0.0);
  for (std::size_t i = 0; i < cases.size(); ++i) {
    sum[fold[i]] += static_cast<double>(cases[i].lesion_volume);
    count[fold[i]] += 1.0;
  }
  double lo = 0, hi = 0;
  bool first = true;
  for (std::size_t f = 0; f < k; ++f) {
    if (count[f] == 0) continue;
    const double m = sum[f] / count[f];
    if (first) lo = hi = m;
    lo = std::min(lo, m);
    hi = std::max(hi, m);
    first = false;
  }
  return hi - lo;
}

}  // namespace mscsa::data
