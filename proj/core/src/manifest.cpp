// SPDX-License-Identifier: Apache-2.0
#include "ccoe/manifest.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ccoe/checkpoint.hpp"
#include "ccoe/errors.hpp"

namespace ccoe {

using json = nlohmann::json;

Manifest Manifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open manifest " + path.string());
  Manifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      const std::string kind = j.at("kind").get<std::string>();
      if (kind == "seed") {
        m.seed = j.at("seed").get<std::uint64_t>();
      } else if (kind == "backbone") {
        m.backbone = j.at("path").get<std::string>();
      } else if (kind == "expert") {
        m.experts.push_back({j.at("id").get<ExpertId>(), j.at("domain").get<std::string>(),
                             j.at("path").get<std::string>(),
                             j.at("positions").get<std::vector<std::size_t>>()});
      } else if (kind == "mapping") {
        m.mapping[j.at("domain").get<std::string>()] = j.at("experts").get<std::vector<ExpertId>>();
      } else if (kind == "planner") {
        m.planner = j.at("path").get<std::string>();
      } else {
        throw DatasetError("unknown record kind '" + kind + "'");
      }
    } catch (const json::exception& e) {
      throw DatasetError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const DatasetError& e) {
      throw DatasetError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (m.backbone.empty()) throw DatasetError("manifest " + path.string() + " names no backbone");
  return m;
}

std::string Manifest::to_jsonl() const {
  std::ostringstream out;
  out << json{{"kind", "seed"}, {"seed", seed}}.dump() << '\n';
  out << json{{"kind", "backbone"}, {"path", backbone}}.dump() << '\n';
  for (const ManifestExpert& e : experts) {
    out << json{{"kind", "expert"},     {"id", e.id},    {"domain", e.domain},
                {"path", e.path},       {"positions", e.positions}}
               .dump()
        << '\n';
  }
  for (const auto& [domain, ids] : mapping)
    out << json{{"kind", "mapping"}, {"domain", domain}, {"experts", ids}}.dump() << '\n';
  if (planner) out << json{{"kind", "planner"}, {"path", *planner}}.dump() << '\n';
  return out.str();
}

void Manifest::save(const std::filesystem::path& path) const {
  const std::string s = to_jsonl();
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

const ManifestExpert* Manifest::find(ExpertId id) const {
  for (const ManifestExpert& e : experts)
    if (e.id == id) return &e;
  return nullptr;
}

ManifestLock::ManifestLock(const std::filesystem::path& manifest) {
  const std::string lock = manifest.string() + ".lock";
  fd_ = ::open(lock.c_str(), O_RDWR | O_CREAT, 0644);
  if (fd_ < 0) throw ConfigError("cannot open lock file " + lock + ": " + std::strerror(errno));
  if (::flock(fd_, LOCK_EX) != 0) {
    ::close(fd_);
    throw ConfigError("cannot lock " + lock + ": " + std::strerror(errno));
  }
}

ManifestLock::~ManifestLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

std::filesystem::path resolve(const std::filesystem::path& manifest_path, const std::string& p) {
  const std::filesystem::path path(p);
  if (path.is_absolute()) return path;
  return manifest_path.parent_path() / path;
}

ExpertRegistry build_registry(const Manifest& m, const std::filesystem::path& manifest_path) {
  ExpertRegistry reg(load_backbone(resolve(manifest_path, m.backbone)), m.seed);
  for (const ManifestExpert& e : m.experts) {
    ExpertSubnetwork expert = load_expert(resolve(manifest_path, e.path));
    if (expert.id != e.id || expert.positions != e.positions) {
      throw ConfigError("manifest entry for expert " + std::to_string(e.id) +
                        " disagrees with its checkpoint");
    }
    expert.domain = e.domain;
    reg.push(std::move(expert));
  }
  // Mapping rows in the manifest are authoritative.
  for (const auto& [domain, ids] : m.mapping) {
    reg.add_domain(domain);
    for (ExpertId id : reg.expert_ids()) reg.set_mapping(domain, id, false);
    for (ExpertId id : ids) reg.set_mapping(domain, id, true);
  }
  if (m.planner) reg.set_planner(load_planner(resolve(manifest_path, *m.planner)));
  return reg;
}

std::filesystem::path data_dir() {
  if (const char* env = std::getenv("CCOE_DATA_DIR"); env && *env) return env;
  return std::filesystem::current_path() / "ccoe-data";
}

}  // namespace ccoe
