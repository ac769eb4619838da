// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ccoe/data.hpp"
#include "ccoe/model.hpp"
#include "ccoe/tensor.hpp"

namespace ccoe {

struct PlannerExpert;

struct TrainConfig {
  float learning_rate = 3e-3f;
  std::size_t batch_size = 32;
  std::size_t steps = 1000;
  float grad_clip = 1.0f;  // global L2 norm; <= 0 disables clipping
  std::uint64_t seed = 0;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;   // decoupled, applied to rank-2 tensors only
  std::size_t warmup = 0;      // linear learning-rate warmup steps
  bool cosine_decay = true;    // decay to 10% of the peak rate by the last step
  std::size_t log_every = 50;  // 0 disables loss records

  /// Throws ConfigError unless learning_rate >= 0, steps >= 1, batch_size >= 1
  /// and the Adam moments lie in [0, 1).
  void validate() const;
  /// Learning rate at 0-based step s.
  float rate_at(std::size_t s) const;
};

/// One point of a loss curve.
struct LossRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // masked next-token accuracy

  /// {"step":..,"loss":..,"accuracy":..} on one line.
  std::string to_jsonl() const;
};

using LossCallback = std::function<void(const LossRecord&)>;

struct LossResult {
  double loss = 0.0;       // mean NLL over masked positions
  std::size_t count = 0;   // masked positions
  std::size_t correct = 0; // argmax hits among them
  Tensor dlogits;          // d(loss)/d(logits); zero on unmasked rows
};

/// Mean masked negative log-likelihood of `targets` under softmax(logits).
/// Rows with mask 0 contribute nothing. Throws DatasetError when every row is
/// masked out, DimensionError on length mismatch or out-of-range targets.
LossResult nll_loss(const Tensor& logits, std::span<const TokenId> targets,
                    std::span<const std::uint8_t> mask);

/// A trainable tensor and its gradient buffer.
struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
};

/// Adam with decoupled weight decay over an explicit parameter list. Only
/// tensors in the list can change; nothing else is reachable from here.
class Adam {
 public:
  Adam(std::vector<ParamRef> params, const TrainConfig& cfg);

  const std::vector<ParamRef>& params() const noexcept { return params_; }
  bool contains(const Tensor* t) const noexcept;

  void zero_grad();
  /// Global gradient L2 norm (before clipping).
  double grad_norm() const;
  /// Clips, then applies one update at learning rate `lr`.
  void step(float lr);

 private:
  std::vector<ParamRef> params_;
  std::vector<std::vector<float>> m_, v_;
  TrainConfig cfg_;
  std::size_t t_ = 0;
};

/// Sequences padded on the right and flattened for one packed forward pass.
struct Batch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  Tokens inputs;                    // [batch*seq]
  Tokens targets;                   // [batch*seq]
  std::vector<std::uint8_t> mask;   // 1 where the target is part of an answer
};

/// inputs = prompt + target minus its last token; only answer positions are scored.
Batch make_batch(std::span<const Example> examples);

struct ExpertTrainResult {
  ExpertSubnetwork expert;
  std::vector<LossRecord> curve;
};

/// Trains the expert's sublayers against a frozen backbone. The optimizer
/// is built from the expert's tensors alone. A non-finite loss restores the
/// last finite parameters and throws DivergenceError.
ExpertTrainResult train_expert(ExpertSubnetwork expert, const BackboneModel& backbone,
                               const ExampleSampler& sampler, const TrainConfig& cfg,
                               const LossCallback& on_record = {});

/// Tensors an expert trainer would hand to its optimizer (for inspection).
std::vector<ParamRef> expert_param_refs(ExpertSubnetwork& expert,
                                        std::vector<FeedForward>& grads);

struct PretrainResult {
  BackboneModel backbone;  // frozen
  std::vector<LossRecord> curve;
  double initial_loss = 0.0;  // fixed 256-example probe batch, before training
  double final_loss = 0.0;    // same probe batch, after the last step
};

/// Trains every backbone tensor on the sampler's mixture, then freezes.
PretrainResult pretrain_backbone(const ModelConfig& config, const ExampleSampler& sampler,
                                 const TrainConfig& cfg, const LossCallback& on_record = {});

/// Fraction of examples whose greedy decode (up to eos) equals the target exactly.
double exact_match_accuracy(const BackboneModel& backbone, const ExpertSubnetwork* expert,
                            std::span<const Example> examples);

/// `n` examples drawn from `sampler` with a generator seeded by `seed`.
std::vector<Example> draw_examples(const ExampleSampler& sampler, std::size_t n,
                                   std::uint64_t seed);

/// One teacher-forced planner decision: the input at step `step` of a
/// composite task and the row of the indicator matrix that should win.
struct PlannerSample {
  Tokens tokens;
  std::size_t label = 0;  // candidate index, or the STOP index
  bool first_step = false;
};

/// Expands a composite task into one sample per step, ending with STOP.
/// `domain_to_candidate` maps each domain onto a planner candidate index;
/// a domain without a candidate raises DatasetError.
std::vector<PlannerSample> planner_samples(const CoTask& task,
                                           const std::function<std::size_t(Domain)>& domain_to_candidate,
                                           std::size_t stop_index);

struct PlannerTrainResult {
  std::vector<LossRecord> curve;  // accuracy = per-decision accuracy on the batch
};

using PlannerSampleSource = std::function<std::vector<PlannerSample>(Rng&)>;

/// Jointly trains the planner's sublayers, scorer and indicator rows with
/// per-step cross-entropy over candidates (STOP excluded at the first step).
/// Clears every uncalibrated flag on success.
PlannerTrainResult train_planner(PlannerExpert& planner, const BackboneModel& backbone,
                                 const PlannerSampleSource& source, const TrainConfig& cfg,
                                 const LossCallback& on_record = {});

/// Teacher-forced planner decision at one step (STOP barred at the first).
std::size_t planner_decision(const PlannerExpert& planner, const BackboneModel& backbone,
                             const PlannerSample& sample);

struct PlannerEval {
  std::size_t tasks = 0;
  double selection_accuracy = 0.0;  // first decision correct
  double path_accuracy = 0.0;       // every decision correct, STOP included
};

/// Scores the planner on composite tasks with ground-truth carried contexts.
PlannerEval evaluate_planner(const PlannerExpert& planner, const BackboneModel& backbone,
                             std::span<const CoTask> tasks,
                             const std::function<std::size_t(Domain)>& domain_to_candidate);

}  // namespace ccoe
