// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ccoe/data.hpp"
#include "ccoe/model.hpp"
#include "ccoe/registry.hpp"
#include "ccoe/training.hpp"

namespace ccoe {

// ---------------------------------------------------------------------------
// Insertion strategies

enum class InsertionStrategy : std::uint8_t { GL, FB, FE, MD, BE };

inline constexpr std::array<InsertionStrategy, 5> kAllStrategies = {
    InsertionStrategy::GL, InsertionStrategy::FB, InsertionStrategy::FE, InsertionStrategy::MD,
    InsertionStrategy::BE};

std::string_view strategy_name(InsertionStrategy s);
std::optional<InsertionStrategy> parse_strategy(std::string_view name);

/// Position vector for `count` expert layers in an L-layer backbone.
/// GL: floor(k*L/count); FE: first count; BE: last count; MD: block starting
/// at (L-count)/2; FB: ceil(count/2) front, floor(count/2) back.
/// ConfigError when count > L.
std::vector<std::size_t> strategy_positions(InsertionStrategy s, std::size_t layers,
                                            std::size_t count);

// ---------------------------------------------------------------------------
// Workloads and reports

struct WorkloadItem {
  std::string domain;
  std::string prompt;  // payload text; decoded as bos, payload, '='
};

struct Workload {
  std::vector<WorkloadItem> items;  // one repetition
  std::size_t repetitions = 1;
  std::size_t warmup = 1;           // repetitions run before timing starts
  std::size_t max_new_tokens = 8;   // every query generates exactly this many tokens

  /// Domain changes over the timed run, counting the first query.
  std::size_t switch_count() const;
};

/// One item per domain per round, `rounds` rounds, payloads drawn from the eval split.
Workload round_robin_workload(std::span<const Domain> domains, std::size_t rounds,
                              std::size_t repetitions, std::uint64_t seed);

/// Line-delimited records: {"domain":..,"prompt":..}. An optional record
/// {"repeat":n} sets the repetition count. WorkloadError on malformed input.
Workload load_workload(const std::filesystem::path& path);
void save_workload(const Workload& workload, const std::filesystem::path& path);

struct BenchReport {
  std::string system;
  std::size_t resident_param_bytes_peak = 0;
  std::size_t activation_bytes_peak = 0;  // KV cache, reported separately
  std::size_t tokens_generated = 0;
  std::size_t switch_count = 0;
  double switch_seconds = 0.0;  // total time spent switching
  double wall_seconds = 0.0;    // decoding plus switching
  double tokens_per_second = 0.0;

  double per_switch_seconds() const {
    return switch_count ? switch_seconds / static_cast<double>(switch_count) : 0.0;
  }
  std::string to_jsonl() const;
};

/// Aligned human-readable table.
std::string format_reports(std::span<const BenchReport> reports);

/// All experts resident; a switch is a gating lookup. WorkloadError when a
/// domain has no mapped expert.
BenchReport run_ccoe(const ExpertRegistry& registry, const Workload& workload);

/// Same decode loop with the expert for each item resolved ahead of time;
/// the reference point for routing overhead.
BenchReport run_pure_decode(const ExpertRegistry& registry, const Workload& workload);

/// Full standalone model for one domain: the backbone with the expert's
/// sublayers written into the FFN slots at its positions, zero-padded to
/// d_ff. Produces the same logits as the spliced expert. DimensionError when
/// the expert is wider than d_ff; a null expert copies the backbone.
BackboneModel standalone_model(const BackboneModel& backbone, const ExpertSubnetwork* expert);

/// One standalone full model per domain. When their bytes exceed
/// `resident_budget_bytes`, models are spilled to `spill_dir` and reloaded
/// from disk on each switch (least recently used evicted); load time counts.
BenchReport run_mdme_baseline(const std::vector<BackboneModel>& models,
                              const std::vector<std::string>& domains, const Workload& workload,
                              std::size_t resident_budget_bytes,
                              const std::filesystem::path& spill_dir);

/// Rank-r factors for every attention and feed-forward weight matrix.
struct LowRankAdapter {
  std::string domain;
  std::size_t rank = 0;
  std::vector<Tensor> a;  // [d_in, r]
  std::vector<Tensor> b;  // [r, d_out]

  /// A ~ N(0, 0.02); B zero when `zero_b`, else N(0, 0.02).
  static LowRankAdapter init(const ModelConfig& config, std::size_t rank, std::string domain,
                             Rng& rng, bool zero_b);
  std::size_t param_count() const;
};

std::size_t adapter_param_bytes(const ModelConfig& config, std::size_t rank);
/// Bytes of one merged copy of every adapted matrix.
std::size_t merged_overlay_bytes(const ModelConfig& config);

/// Writes W + A*B into `overlay` for every adapted matrix of `base`.
void materialize_adapter(const BackboneModel& base, const LowRankAdapter& adapter,
                         BackboneParams& overlay);

/// Shared backbone plus adapters; every domain switch re-materializes the
/// merged weights before decoding.
BenchReport run_adapter_baseline(const BackboneModel& backbone,
                                 const std::vector<LowRankAdapter>& adapters,
                                 const Workload& workload);

// ---------------------------------------------------------------------------
// Insertion ablation

struct AblationRow {
  InsertionStrategy strategy = InsertionStrategy::GL;
  std::vector<std::size_t> positions;
  double accuracy = 0.0;
  double base_accuracy = 0.0;
  double gain = 0.0;  // accuracy - base_accuracy
  double final_loss = 0.0;
};

struct AblationConfig {
  Domain domain = Domain::reverse;
  std::size_t expert_layers = 4;
  std::size_t expert_inner = 128;
  std::size_t eval_examples = 200;
  std::uint64_t init_seed = 0;
  TrainConfig train;
};

/// Trains one expert per strategy with identical seeds, data and config, and
/// scores each on the same held-out examples.
std::vector<AblationRow> ablate_insertion(const BackboneModel& backbone,
                                          std::span<const InsertionStrategy> strategies,
                                          const AblationConfig& cfg);

std::string format_ablation(std::span<const AblationRow> rows);

}  // namespace ccoe
