// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ccoe/model.hpp"
#include "ccoe/rng.hpp"
#include "ccoe/tensor.hpp"

namespace ccoe {

class ExpertRegistry;

/// Binary domain x expert association table. Rows are domain tags, columns
/// are expert ids kept in ascending order.
class MappingMatrix {
 public:
  void add_domain(const std::string& tag);
  void remove_domain(const std::string& tag);
  bool has_domain(const std::string& tag) const { return rows_.count(tag) != 0; }

  void add_expert(ExpertId id);
  /// Drops the column; unknown ids are ignored.
  void remove_expert(ExpertId id);
  bool has_expert(ExpertId id) const;

  /// Throws GatingError for an unknown tag, LookupError for an unknown expert.
  void set(const std::string& tag, ExpertId id, bool value);
  bool get(const std::string& tag, ExpertId id) const;

  /// Row as 0/1 entries aligned with experts(). Throws GatingError for an unknown tag.
  const std::vector<std::uint8_t>& row(const std::string& tag) const;

  const std::vector<ExpertId>& experts() const noexcept { return columns_; }
  std::vector<std::string> domains() const;

  friend bool operator==(const MappingMatrix&, const MappingMatrix&) = default;

 private:
  std::size_t column_of(ExpertId id) const;

  std::vector<ExpertId> columns_;
  std::map<std::string, std::vector<std::uint8_t>> rows_;
};

struct PathStep {
  ExpertId expert = 0;
  std::vector<std::size_t> positions;

  friend bool operator==(const PathStep&, const PathStep&) = default;
};

struct ExecutionPath {
  enum class Origin : std::uint8_t { gating, planning };

  Origin origin = Origin::gating;
  std::vector<PathStep> steps;
  bool truncated = false;  // planning only: carried context was cut to fit max_seq

  friend bool operator==(const ExecutionPath&, const ExecutionPath&) = default;
};

struct GateQuery {
  std::string domain;
  Tokens tokens;
};

/// One path per query: a step for every expert whose entry in the query's
/// row is 1, in ascending id order, each with that expert's positions. An
/// all-zero row yields an empty path (the base model answers). Unknown tags
/// raise GatingError; a mapped expert missing from `positions` raises LookupError.
std::vector<ExecutionPath> gate(const MappingMatrix& mapping,
                                const std::map<ExpertId, std::vector<std::size_t>>& positions,
                                std::span<const GateQuery> queries);

/// gate() against the registry's own mapping matrix and expert positions.
std::vector<ExecutionPath> gate(const ExpertRegistry& registry, std::span<const GateQuery> queries);

/// Single-head cross-attention from indicator rows onto planner hidden
/// states, followed by a scalar linear head.
struct PlannerScorer {
  Tensor w_q, w_k, w_v;  // [d, d]
  Tensor f_w;            // [d]
  Tensor f_b;            // [1]
};

/// The planning expert: an ordinary expert subnetwork, one indicator row per
/// candidate expert plus a trailing STOP row, and the scorer.
struct PlannerExpert {
  ExpertSubnetwork expert;
  std::vector<ExpertId> candidates;
  std::vector<std::uint8_t> uncalibrated;  // parallel to candidates
  Tensor indicators;                       // [candidates + 1, d]
  PlannerScorer scorer;

  /// Indicator rows start from the backbone's indicator-token embedding plus
  /// N(0, 0.02) noise; the STOP row likewise.
  static PlannerExpert init(std::vector<std::size_t> positions, std::size_t inner,
                            std::vector<ExpertId> candidates, const BackboneModel& backbone,
                            Rng& rng);

  std::size_t stop_index() const noexcept { return candidates.size(); }
  std::optional<std::size_t> candidate_index(ExpertId id) const;
  std::size_t param_count() const;

  /// Appends a row for `id` (before STOP) marked uncalibrated.
  void add_candidate(ExpertId id, const BackboneModel& backbone, Rng& rng);
  /// Removes the row for `id`; unknown ids raise LookupError.
  void remove_candidate(ExpertId id);

  /// Shapes against a backbone config; DimensionError / RoutingError on mismatch.
  void validate(const ModelConfig& config) const;

  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    ExpertSubnetwork::visit(self.expert, [&](const std::string& n, auto& t) { f("expert." + n, t); });
    f(std::string("indicators"), self.indicators);
    f(std::string("scorer.w_q"), self.scorer.w_q);
    f(std::string("scorer.w_k"), self.scorer.w_k);
    f(std::string("scorer.w_v"), self.scorer.w_v);
    f(std::string("scorer.f_w"), self.scorer.f_w);
    f(std::string("scorer.f_b"), self.scorer.f_b);
  }
};

std::size_t param_bytes(const PlannerExpert& planner);

/// Step `index` (1-based) of a planned query. `tokens` is the instruction
/// (e.g. "rev>upc:abc" as bytes); `carried_context` is the previous step's output.
struct Subtask {
  std::size_t index = 1;
  Tokens tokens;
  Tokens carried_context;
};

/// What the planner reads: bos, step digit, carried context, '|', instruction.
Tokens planner_input(const Subtask& subtask);

/// h_i = F(CrossAttention(W_i, E_p(q))) for every indicator row, STOP last.
/// Throws RoutingError on an empty subtask.
std::vector<float> plan_scores(const PlannerExpert& planner, const BackboneModel& backbone,
                               const Subtask& subtask);

/// Argmax over raw scores, lowest index on ties. Empty input raises RoutingError.
std::size_t select_expert(std::span<const float> scores);

struct PlanResult {
  Tokens output;  // final step's output (empty when no step ran)
  ExecutionPath path;
  std::vector<Tokens> step_outputs;
};

/// Planned execution of `instruction` on `payload`. At step t the planner
/// scores the subtask (STOP is not eligible at t = 1); on STOP or after
/// `max_steps` steps the loop ends. The chosen expert decodes a task prompt
/// (bos, kNoTag, ..., '=') holding the previous output followed by the
/// step's operand: the payload at t = 1, nothing afterwards. When that would exceed
/// max_seq the oldest carried tokens are dropped and path.truncated is set.
PlanResult execute_plan(const ExpertRegistry& registry, std::string_view instruction,
                        std::string_view payload, std::size_t max_steps,
                        std::size_t max_new_tokens = 16);

}  // namespace ccoe
