// SPDX-License-Identifier: Apache-2.0
#include "ccoe/registry.hpp"

#include <numeric>

#include "ccoe/bench.hpp"
#include "ccoe/errors.hpp"

namespace ccoe {

bool within_budget(std::size_t expert_bytes, std::size_t backbone_bytes) noexcept {
  return 100 * expert_bytes <= kBudgetPercent * backbone_bytes;
}

namespace {

void require_budget(std::size_t bytes, std::size_t backbone_bytes, const std::string& what) {
  if (!within_budget(bytes, backbone_bytes)) {
    throw BudgetError(what + " holds " + std::to_string(bytes) + " parameter bytes, above " +
                      std::to_string(kBudgetPercent) + "% of the backbone's " +
                      std::to_string(backbone_bytes));
  }
}

}  // namespace

ExpertRegistry::ExpertRegistry(BackboneModel backbone, std::uint64_t seed)
    : backbone_(std::move(backbone)), rng_(seed) {
  backbone_.freeze();
}

void ExpertRegistry::set_mapping(const std::string& domain, ExpertId id, bool value) {
  if (!contains(id)) throw LookupError("expert " + std::to_string(id) + " is not registered");
  mapping_.set(domain, id, value);
}

void ExpertRegistry::push(ExpertSubnetwork expert) {
  expert.validate(backbone_.config());
  require_budget(param_bytes(expert), param_bytes(backbone_), "expert " + std::to_string(expert.id));
  auto it = experts_.find(expert.id);
  if (it != experts_.end()) {
    if (it->second.positions != expert.positions) {
      throw ConfigError("expert " + std::to_string(expert.id) +
                        " is registered with different insertion positions");
    }
    it->second = std::move(expert);
    return;
  }

  // Stage every change on copies, then commit without throwing.
  MappingMatrix mapping = mapping_;
  mapping.add_expert(expert.id);
  if (!expert.domain.empty()) {
    mapping.add_domain(expert.domain);
    mapping.set(expert.domain, expert.id, true);
  }
  std::optional<PlannerExpert> planner = planner_;
  Rng rng = rng_;
  if (planner) planner->add_candidate(expert.id, backbone_, rng);

  const ExpertId id = expert.id;
  experts_.emplace(id, std::move(expert));
  mapping_ = std::move(mapping);
  planner_ = std::move(planner);
  rng_ = rng;
}

ExpertSubnetwork ExpertRegistry::pop_copy(ExpertId id) const { return expert(id); }

void ExpertRegistry::pop_remove(ExpertId id) {
  if (!contains(id)) throw LookupError("expert " + std::to_string(id) + " is not registered");
  if (planner_ && planner_->candidate_index(id)) planner_->remove_candidate(id);
  mapping_.remove_expert(id);
  experts_.erase(id);
}

const ExpertSubnetwork& ExpertRegistry::expert(ExpertId id) const {
  auto it = experts_.find(id);
  if (it == experts_.end()) throw LookupError("expert " + std::to_string(id) + " is not registered");
  return it->second;
}

std::vector<ExpertId> ExpertRegistry::expert_ids() const {
  std::vector<ExpertId> ids;
  for (const auto& [id, e] : experts_) ids.push_back(id);
  return ids;
}

std::map<ExpertId, std::vector<std::size_t>> ExpertRegistry::positions() const {
  std::map<ExpertId, std::vector<std::size_t>> out;
  for (const auto& [id, e] : experts_) out.emplace(id, e.positions);
  return out;
}

std::optional<ExpertId> ExpertRegistry::expert_for_domain(const std::string& domain) const {
  for (const auto& [id, e] : experts_)
    if (e.domain == domain) return id;
  return std::nullopt;
}

void ExpertRegistry::set_planner(PlannerExpert planner) {
  planner.validate(backbone_.config());
  require_budget(param_bytes(planner), param_bytes(backbone_), "planner");
  for (ExpertId id : planner.candidates) {
    if (!contains(id)) {
      throw LookupError("planner candidate " + std::to_string(id) + " is not registered");
    }
  }
  planner_ = std::move(planner);
}

std::vector<LedgerEntry> ExpertRegistry::ledger() const {
  std::vector<LedgerEntry> out{{"backbone", param_bytes(backbone_)}};
  for (const auto& [id, e] : experts_) out.push_back({"expert:" + std::to_string(id), param_bytes(e)});
  if (planner_) out.push_back({"planner", param_bytes(*planner_)});
  return out;
}

std::size_t ExpertRegistry::total_bytes() const {
  std::size_t total = 0;
  for (const LedgerEntry& e : ledger()) total += e.bytes;
  return total;
}

MemoryReport ExpertRegistry::memory_report(std::size_t adapter_rank) const {
  MemoryReport r;
  r.components = ledger();
  r.total_bytes = total_bytes();
  r.backbone_bytes = param_bytes(backbone_);
  r.expert_count = experts_.size();
  r.mdme_bytes = r.expert_count * r.backbone_bytes;
  r.reduction_vs_mdme =
      r.mdme_bytes ? 1.0 - static_cast<double>(r.total_bytes) / static_cast<double>(r.mdme_bytes)
                   : 0.0;
  r.adapter_rank = adapter_rank;
  r.adapter_bytes = r.backbone_bytes;
  if (adapter_rank > 0) {
    const std::size_t one = adapter_param_bytes(backbone_.config(), adapter_rank);
    r.adapter_bytes += r.expert_count * one;
    if (r.expert_count) r.adapter_bytes += merged_overlay_bytes(backbone_.config());
  }
  return r;
}

std::vector<GatedAnswer> answer(const ExpertRegistry& registry, const ExecutionPath& path,
                                std::span<const TokenId> prompt, std::size_t max_new) {
  std::vector<GatedAnswer> out;
  KvCache cache;
  if (path.steps.empty()) {
    out.push_back({std::nullopt, greedy_decode(registry.backbone(), nullptr, prompt, max_new, &cache)});
    return out;
  }
  for (const PathStep& step : path.steps) {
    const ExpertSubnetwork& e = registry.expert(step.expert);
    if (e.positions != step.positions) {
      throw RoutingError("path positions for expert " + std::to_string(step.expert) +
                         " disagree with the registry");
    }
    out.push_back({step.expert, greedy_decode(registry.backbone(), &e, prompt, max_new, &cache)});
  }
  return out;
}

double ensemble_reduction(std::span<const double> ensemble_sizes, double backbone_size,
                          double expert_fraction) {
  const double ensemble = std::accumulate(ensemble_sizes.begin(), ensemble_sizes.end(), 0.0);
  if (!(ensemble > 0.0)) throw ConfigError("ensemble_reduction: empty ensemble");
  const double n = static_cast<double>(ensemble_sizes.size());
  return 1.0 - backbone_size * (1.0 + n * expert_fraction) / ensemble;
}

}  // namespace ccoe
