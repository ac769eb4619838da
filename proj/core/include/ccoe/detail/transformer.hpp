// SPDX-License-Identifier: Apache-2.0
#pragma once

// Packed forward pass with activation recording, and the matching
// hand-written backward pass. Shared by inference and training.

#include <cstddef>
#include <span>
#include <vector>

#include "ccoe/model.hpp"

namespace ccoe::detail {

/// Backbone with an optional expert overlay: the FFN at layer l is the
/// expert's when l is in the expert's position vector.
class Composite {
 public:
  Composite(const BackboneModel& backbone, const ExpertSubnetwork* expert);
  Composite(const ModelConfig& config, const BackboneParams& params,
            const ExpertSubnetwork* expert);

  const ModelConfig& config() const { return config_; }
  const BackboneParams& params() const { return params_; }
  const ExpertSubnetwork* expert() const { return expert_; }
  const FeedForward& ffn(std::size_t layer) const;
  int expert_slot(std::size_t layer) const { return slots_[layer]; }

 private:
  const ModelConfig& config_;
  const BackboneParams& params_;
  const ExpertSubnetwork* expert_;
  std::vector<int> slots_;
};

struct LayerTrace {
  Tensor x_in;  // residual entering the layer [N, d]
  Tensor ln1_hat;
  std::vector<float> ln1_rstd;
  Tensor a_in;  // [N, d]
  Tensor q, k, v;
  std::vector<float> probs;  // [B][H][T][T]
  Tensor ctx;                // attention output before w_o
  Tensor x_mid;              // residual after attention
  Tensor ln2_hat;
  std::vector<float> ln2_rstd;
  Tensor f_in;   // [N, d]
  Tensor h_pre;  // [N, f]
  Tensor h_act;  // [N, f]
};

struct Trace {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<TokenId> tokens;
  std::vector<LayerTrace> layers;
  Tensor x_final;
  Tensor final_hat;
  std::vector<float> final_rstd;
  Tensor hidden;  // after final norm [N, d]
};

/// Runs `batch` sequences of length `seq` packed row-major in `tokens`.
/// Any of trace / hidden / logits may be null.
void forward_packed(const Composite& model, std::span<const TokenId> tokens, std::size_t batch,
                    std::size_t seq, Trace* trace, Tensor* hidden, Tensor* logits);

/// Destination of parameter gradients. Null members are not differentiated;
/// the backward pass stops at the lowest layer that still owes a gradient.
struct GradSink {
  BackboneParams* backbone = nullptr;
  std::vector<FeedForward>* expert = nullptr;  // parallel to expert->layers
};

/// Backpropagates either d(logits) [N, vocab] or d(hidden) [N, d]
/// (exactly one must be non-null), accumulating into `sink`.
void backward_packed(const Composite& model, const Trace& trace, const Tensor* dlogits,
                     const Tensor* dhidden, GradSink sink);

}  // namespace ccoe::detail
