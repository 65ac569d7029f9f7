#pragma once

// Dataset manifest CSV: `id,volume_path,mask_path,lesion_volume`.
// Relative paths are resolved against the manifest's directory.

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mscsa/core/error.hpp"

namespace mscsa::data {

namespace fs = std::filesystem;

inline constexpr const char* kManifestHeader = "id,volume_path,mask_path,lesion_volume";

struct ManifestEntry {
  std::string id;
  fs::path volume_path;
  fs::path mask_path;  // empty for unlabeled cases
  std::size_t lesion_volume = 0;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

inline std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("manifest: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || strip_cr(line) != kManifestHeader) {
    throw DataError("manifest: expected header '" + std::string(kManifestHeader) + "' in " + path.string());
  }
  const fs::path base = path.parent_path();
  std::vector<ManifestEntry> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != 4) throw DataError("manifest: line " + std::to_string(lineno) + " needs 4 fields");
    ManifestEntry e;
    e.id = cells[0];
    if (e.id.empty()) throw DataError("manifest: empty id on line " + std::to_string(lineno));
    const auto resolve = [&](const std::string& p) -> fs::path {
      if (p.empty()) return {};
      fs::path q(p);
      return q.is_absolute() ? q : base / q;
    };
    e.volume_path = resolve(cells[1]);
    e.mask_path = resolve(cells[2]);
    try {
      std::size_t used = 0;
      e.lesion_volume = cells[3].empty() ? 0 : std::stoull(cells[3], &used);
      if (!cells[3].empty() && used != cells[3].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw DataError("manifest: bad lesion_volume on line " + std::to_string(lineno));
    }
    out.push_back(std::move(e));
  }
  return out;
}

/// Paths under the manifest's directory are written relative to it.
inline void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  const fs::path base = fs::absolute(path).parent_path();
  const auto rel = [&](const fs::path& p) -> std::string {
    if (p.empty()) return {};
    const auto abs = fs::absolute(p).lexically_normal();
    auto r = abs.lexically_relative(base);
    if (!r.empty() && *r.begin() != "..") return r.generic_string();
    return abs.generic_string();
  };
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("manifest: cannot write " + path.string());
  out << kManifestHeader << '\n';
  for (const auto& e : entries) {
    out << e.id << ',' << rel(e.volume_path) << ',' << rel(e.mask_path) << ',' << e.lesion_volume << '\n';
  }
}

inline constexpr const char* kFoldsHeader = "id,lesion_volume,fold";

inline void write_folds(const fs::path& path, const std::vector<ManifestEntry>& entries,
                        const std::vector<std::size_t>& fold) {
  if (fold.size() != entries.size()) throw DataError("folds: assignment size does not match manifest");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("folds: cannot write " + path.string());
  out << kFoldsHeader << '\n';
  for (std::size_t i = 0; i < entries.size(); ++i) {
    out << entries[i].id << ',' << entries[i].lesion_volume << ',' << fold[i] << '\n';
  }
}

/// Fold index for every manifest entry, looked up by id.
inline std::vector<std::size_t> read_folds(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  std::ifstream in(path);
  if (!in) throw DataError("folds: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || strip_cr(line) != kFoldsHeader) {
    throw DataError("folds: expected header '" + std::string(kFoldsHeader) + "' in " + path.string());
  }
  std::map<std::string, std::size_t> by_id;
  while (std::getline(in, line)) {
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 3) throw DataError("folds: malformed row '" + line + "'");
    try {
      by_id[cells[0]] = std::stoul(cells[2]);
    } catch (const std::exception&) {
      throw DataError("folds: bad fold index in '" + line + "'");
    }
  }
  std::vector<std::size_t> out;
  for (const auto& e : entries) {
    auto it = by_id.find(e.id);
    if (it == by_id.end()) throw DataError("folds: no fold for case '" + e.id + "'");
    out.push_back(it->second);
  }
  return out;
}

}  // namespace mscsa::data
