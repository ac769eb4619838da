// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ccoe/model.hpp"
#include "ccoe/rng.hpp"
#include "ccoe/routing.hpp"

namespace ccoe {

/// Experts may hold at most 15% of the backbone's parameter bytes.
inline constexpr std::size_t kBudgetPercent = 15;

/// True when 100 * expert_bytes <= 15 * backbone_bytes.
bool within_budget(std::size_t expert_bytes, std::size_t backbone_bytes) noexcept;

struct LedgerEntry {
  std::string component;  // "backbone", "expert:<id>", "planner"
  std::size_t bytes = 0;
};

/// Resident parameter bytes of a CCoE instance next to the two alternative
/// deployments of the same domains.
struct MemoryReport {
  std::vector<LedgerEntry> components;
  std::size_t total_bytes = 0;
  std::size_t backbone_bytes = 0;
  std::size_t expert_count = 0;
  std::size_t mdme_bytes = 0;     // one full backbone-sized model per expert
  double reduction_vs_mdme = 0.0; // 1 - total / mdme (0 when there are no experts)
  std::size_t adapter_rank = 0;
  std::size_t adapter_bytes = 0;  // backbone + per-domain adapters + one merged overlay
};

/// The live instance: one frozen backbone, the expert pool, the mapping
/// matrix and an optional planner. Mutations validate first and then commit,
/// so a rejected push leaves every byte unchanged.
class ExpertRegistry {
 public:
  /// Freezes the backbone. `seed` drives indicator-row initialization.
  explicit ExpertRegistry(BackboneModel backbone, std::uint64_t seed = 0);

  const BackboneModel& backbone() const noexcept { return backbone_; }
  const MappingMatrix& mapping() const noexcept { return mapping_; }
  /// Mapping edits; columns still track the expert pool exactly.
  void set_mapping(const std::string& domain, ExpertId id, bool value);
  void add_domain(const std::string& domain) { mapping_.add_domain(domain); }

  /// Adds a new expert (and a column of M, a mapping entry for its domain tag,
  /// and an uncalibrated planner row) or atomically replaces an existing one.
  /// BudgetError above the 15% cap; RoutingError for invalid positions;
  /// ConfigError when an update changes an existing expert's positions.
  void push(ExpertSubnetwork expert);

  /// Deep copy sharing no storage with the registry. LookupError if absent.
  ExpertSubnetwork pop_copy(ExpertId id) const;

  /// Removes the expert, its column of M and its planner row.
  void pop_remove(ExpertId id);

  bool contains(ExpertId id) const { return experts_.count(id) != 0; }
  const ExpertSubnetwork& expert(ExpertId id) const;
  std::vector<ExpertId> expert_ids() const;
  std::map<ExpertId, std::vector<std::size_t>> positions() const;
  /// Lowest-id expert whose domain tag equals `domain`.
  std::optional<ExpertId> expert_for_domain(const std::string& domain) const;

  /// Installs a planner; its expert must fit the budget and its candidate
  /// list must name registered experts.
  void set_planner(PlannerExpert planner);
  void clear_planner() { planner_.reset(); }
  const PlannerExpert* planner() const { return planner_ ? &*planner_ : nullptr; }

  std::vector<LedgerEntry> ledger() const;
  std::size_t total_bytes() const;
  MemoryReport memory_report(std::size_t adapter_rank = 4) const;

 private:
  BackboneModel backbone_;
  std::map<ExpertId, ExpertSubnetwork> experts_;
  MappingMatrix mapping_;
  std::optional<PlannerExpert> planner_;
  Rng rng_;
};

/// Gated answers: one decode per path step (the base model when the path is empty).
struct GatedAnswer {
  std::optional<ExpertId> expert;
  Tokens output;
};
std::vector<GatedAnswer> answer(const ExpertRegistry& registry, const ExecutionPath& path,
                                std::span<const TokenId> prompt, std::size_t max_new = 16);

/// Parameter-level reduction of a shared-backbone deployment against an
/// ensemble of independent models: 1 - backbone * (1 + n * fraction) / sum(models).
double ensemble_reduction(std::span<const double> ensemble_sizes, double backbone_size,
                          double expert_fraction);

}  // namespace ccoe
