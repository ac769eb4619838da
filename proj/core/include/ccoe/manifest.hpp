// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ccoe/model.hpp"
#include "ccoe/registry.hpp"

namespace ccoe {

// A manifest is a line-delimited JSON file, one record per line:
//   {"kind":"seed","seed":42}
//   {"kind":"backbone","path":"backbone.ccoe"}
//   {"kind":"expert","id":1,"domain":"reverse","path":"e1.ccoe","positions":[0,2,4,6]}
//   {"kind":"mapping","domain":"reverse","experts":[1]}
//   {"kind":"planner","path":"planner.ccoe"}
// Relative paths resolve against the manifest's directory.

struct ManifestExpert {
  ExpertId id = 0;
  std::string domain;
  std::string path;
  std::vector<std::size_t> positions;
};

struct Manifest {
  std::uint64_t seed = 0;
  std::string backbone;
  std::vector<ManifestExpert> experts;
  std::map<std::string, std::vector<ExpertId>> mapping;
  std::optional<std::string> planner;

  /// DatasetError when missing or malformed.
  static Manifest load(const std::filesystem::path& path);
  /// Atomic replace (temporary file, then rename).
  void save(const std::filesystem::path& path) const;
  std::string to_jsonl() const;

  const ManifestExpert* find(ExpertId id) const;
};

/// Exclusive advisory lock on "<manifest>.lock", released on destruction.
class ManifestLock {
 public:
  explicit ManifestLock(const std::filesystem::path& manifest);
  ~ManifestLock();
  ManifestLock(const ManifestLock&) = delete;
  ManifestLock& operator=(const ManifestLock&) = delete;

 private:
  int fd_ = -1;
};

/// Loads every referenced checkpoint (digests verified on load) into a registry.
ExpertRegistry build_registry(const Manifest& manifest, const std::filesystem::path& manifest_path);

/// Resolves a manifest-relative path.
std::filesystem::path resolve(const std::filesystem::path& manifest_path, const std::string& p);

/// $CCOE_DATA_DIR, or "ccoe-data" under the working directory.
std::filesystem::path data_dir();

}  // namespace ccoe
