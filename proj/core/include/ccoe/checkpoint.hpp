// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "ccoe/model.hpp"
#include "ccoe/routing.hpp"

namespace ccoe {

// File layout (all integers little-endian):
//   "CCOE" | u32 version | u32 header length | header (UTF-8 JSON, sorted keys)
//   payload: u32 tensor count, then per tensor
//            u32 name length | name | u32 rank | u32 dims[rank] | f32 data[]
// The header carries the SHA-256 of the payload bytes.

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class ComponentKind : std::uint8_t { backbone, expert, planner };

using Component = std::variant<BackboneModel, ExpertSubnetwork, PlannerExpert>;

/// Canonical payload bytes (the digested part).
std::vector<std::uint8_t> payload_bytes(const BackboneModel& model);
std::vector<std::uint8_t> payload_bytes(const ExpertSubnetwork& expert);
std::vector<std::uint8_t> payload_bytes(const PlannerExpert& planner);

/// Hex SHA-256 of the payload.
std::string digest(const BackboneModel& model);
std::string digest(const ExpertSubnetwork& expert);
std::string digest(const PlannerExpert& planner);

/// Whole-file bytes. Experts and planners also record the backbone config
/// they were built against.
std::vector<std::uint8_t> serialize(const BackboneModel& model);
std::vector<std::uint8_t> serialize(const ExpertSubnetwork& expert, const ModelConfig& config);
std::vector<std::uint8_t> serialize(const PlannerExpert& planner, const ModelConfig& config);

struct CheckpointInfo {
  ComponentKind kind = ComponentKind::backbone;
  std::uint32_t version = 0;
  ModelConfig config;
  std::string digest;
  std::size_t tensor_bytes = 0;  // sum of f32 payload data, excluding names and dims
};

struct LoadedComponent {
  CheckpointInfo info;
  Component component;
};

/// Verifies magic, version and digest before building anything.
/// CorruptionError on bad magic, truncation, malformed records or digest
/// mismatch; VersionError on an unknown version.
LoadedComponent deserialize(std::span<const std::uint8_t> bytes);

/// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const BackboneModel& model, const std::filesystem::path& path);
void save_checkpoint(const ExpertSubnetwork& expert, const ModelConfig& config,
                     const std::filesystem::path& path);
void save_checkpoint(const PlannerExpert& planner, const ModelConfig& config,
                     const std::filesystem::path& path);

LoadedComponent load_checkpoint(const std::filesystem::path& path);

/// Typed loaders; CorruptionError when the file holds a different kind.
BackboneModel load_backbone(const std::filesystem::path& path);
ExpertSubnetwork load_expert(const std::filesystem::path& path);
PlannerExpert load_planner(const std::filesystem::path& path);

/// Atomic whole-file write (temporary file, fsync, rename).
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace ccoe
