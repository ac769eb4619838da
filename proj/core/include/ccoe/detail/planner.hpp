// SPDX-License-Identifier: Apache-2.0
#pragma once

// Batched planner scoring with a matching backward pass, used by planner
// training and by gradient checks.

#include <cstddef>
#include <span>
#include <vector>

#include "ccoe/detail/transformer.hpp"
#include "ccoe/routing.hpp"

namespace ccoe::detail {

struct PlannerTrace {
  Trace trunk;                       // backbone + planner expert
  std::vector<std::size_t> lengths;  // valid rows per sequence
  Tensor q;                          // indicators * w_q  [R, d]
  Tensor k, v;                       // hidden * w_k / w_v  [N, d]
  std::vector<float> probs;          // [B][R][seq]
  Tensor attn;                       // [B*R, d]
};

/// Scores [B, R] for `batch` right-padded sequences of length `seq`; only the
/// first lengths[b] rows of sequence b are attended to. Scores are not
/// checked for finiteness; callers decide how to react.
Tensor planner_forward(const PlannerExpert& planner, const BackboneModel& backbone,
                       std::span<const TokenId> tokens, std::size_t batch, std::size_t seq,
                       std::span<const std::size_t> lengths, PlannerTrace* trace);

/// Accumulates gradients of sum(dscores * scores) into `grads`, which has
/// the planner's shapes.
void planner_backward(const PlannerExpert& planner, const BackboneModel& backbone,
                      const PlannerTrace& trace, const Tensor& dscores, PlannerExpert& grads);

}  // namespace ccoe::detail
