// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ccoe/rng.hpp"
#include "ccoe/tensor.hpp"
#include "ccoe/tokenizer.hpp"

namespace ccoe {

using ExpertId = std::int32_t;

struct ModelConfig {
  std::size_t layers = 8;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab = tokens::kVocabSize;
  std::size_t max_seq = 256;

  /// Throws ConfigError on L < 2, d_model % n_heads != 0, vocab < 2, or zero sizes.
  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }

  /// Closed-form backbone parameter count for this configuration.
  std::size_t backbone_param_count() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Pre-norm feed-forward sublayer: layer norm, then w_out * gelu(w_in * x + b_in) + b_out.
/// This is the unit an expert substitutes into the backbone.
struct FeedForward {
  Tensor norm_gain;  // [d]
  Tensor norm_bias;  // [d]
  Tensor w_in;       // [d, f]
  Tensor b_in;       // [f]
  Tensor w_out;      // [f, d]
  Tensor b_out;      // [d]

  static FeedForward init(std::size_t d_model, std::size_t inner, float out_scale, Rng& rng);
  static FeedForward zeros_like(const FeedForward& other);

  std::size_t d_model() const { return norm_gain.size(); }
  std::size_t inner_width() const { return b_in.size(); }
  std::size_t param_count() const;
  void validate(std::size_t d_model) const;

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "norm_gain", self.norm_gain);
    f(prefix + "norm_bias", self.norm_bias);
    f(prefix + "w_in", self.w_in);
    f(prefix + "b_in", self.b_in);
    f(prefix + "w_out", self.w_out);
    f(prefix + "b_out", self.b_out);
  }
};

/// Pre-norm multi-head causal self-attention sublayer.
struct Attention {
  Tensor norm_gain, norm_bias;  // [d]
  Tensor w_q, w_k, w_v, w_o;    // [d, d]
  Tensor b_q, b_k, b_v, b_o;    // [d]

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "norm_gain", self.norm_gain);
    f(prefix + "norm_bias", self.norm_bias);
    f(prefix + "w_q", self.w_q);
    f(prefix + "b_q", self.b_q);
    f(prefix + "w_k", self.w_k);
    f(prefix + "b_k", self.b_k);
    f(prefix + "w_v", self.w_v);
    f(prefix + "b_v", self.b_v);
    f(prefix + "w_o", self.w_o);
    f(prefix + "b_o", self.b_o);
  }
};

struct DecoderLayer {
  Attention attn;
  FeedForward ffn;
};

/// Every tensor of the shared model. Also used as the gradient container
/// during pretraining.
struct BackboneParams {
  Tensor token_embedding;  // [vocab, d]
  Tensor pos_embedding;    // [max_seq, d]
  std::vector<DecoderLayer> layers;
  Tensor final_gain, final_bias;  // [d]
  Tensor head;                    // [d, vocab]
  Tensor head_bias;               // [vocab]

  static BackboneParams zeros_like(const BackboneParams& other);

  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f(std::string("token_embedding"), self.token_embedding);
    f(std::string("pos_embedding"), self.pos_embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      Attention::visit(self.layers[l].attn, p + "attn.", f);
      FeedForward::visit(self.layers[l].ffn, p + "ffn.", f);
    }
    f(std::string("final_gain"), self.final_gain);
    f(std::string("final_bias"), self.final_bias);
    f(std::string("head"), self.head);
    f(std::string("head_bias"), self.head_bias);
  }
};

/// The shared model. Once frozen, its parameters are read-only: the only
/// mutable accessor throws FrozenModelError.
class BackboneModel {
 public:
  BackboneModel(ModelConfig config, BackboneParams params, bool frozen = false);

  /// Scaled-normal init: std 0.02, and 0.02/sqrt(2L) for residual output projections.
  static BackboneModel init(const ModelConfig& config, Rng& rng);

  const ModelConfig& config() const noexcept { return config_; }
  const BackboneParams& params() const noexcept { return params_; }
  BackboneParams& mutable_params();

  bool frozen() const noexcept { return frozen_; }
  void freeze() noexcept { frozen_ = true; }

  std::size_t param_count() const;

  template <class F>
  void visit_params(F&& f) const {
    BackboneParams::visit(params_, f);
  }

 private:
  ModelConfig config_;
  BackboneParams params_;
  bool frozen_ = false;
};

/// Domain expert E_i: one FeedForward per insertion position. At every
/// backbone layer index in `positions` the expert's sublayer replaces the
/// backbone FFN sublayer; attention stays shared.
struct ExpertSubnetwork {
  ExpertId id = 0;
  std::string domain;
  std::vector<FeedForward> layers;
  std::vector<std::size_t> positions;  // strictly increasing, each < L

  static ExpertSubnetwork init(ExpertId id, std::string domain, std::vector<std::size_t> positions,
                               const ModelConfig& config, std::size_t inner, Rng& rng);

  /// Expert whose sublayers are copies of the backbone FFNs at `positions`.
  static ExpertSubnetwork from_backbone(ExpertId id, std::string domain,
                                        std::vector<std::size_t> positions,
                                        const BackboneModel& backbone);

  std::size_t param_count() const;

  /// Shapes and position vector against a backbone config. Position problems
  /// raise RoutingError, shape problems DimensionError.
  void validate(const ModelConfig& config) const;

  /// Index into `layers` for backbone layer `layer`, or -1.
  int slot_for_layer(std::size_t layer) const;

  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    for (std::size_t i = 0; i < self.layers.size(); ++i)
      FeedForward::visit(self.layers[i], "layers." + std::to_string(i) + ".", f);
  }
};

std::size_t param_bytes(const FeedForward& ffn);
std::size_t param_bytes(const BackboneModel& model);
std::size_t param_bytes(const ExpertSubnetwork& expert);

/// Per-layer key/value cache for incremental decoding. Owned by one decode.
class KvCache {
 public:
  void reset() { length_ = 0; }
  std::size_t length() const noexcept { return length_; }

 private:
  friend struct KvCacheAccess;
  std::vector<Tensor> keys_;
  std::vector<Tensor> values_;
  std::size_t length_ = 0;
};

/// Next-token logits [t, vocab] from the backbone alone.
Tensor forward_base(const BackboneModel& model, std::span<const TokenId> tokens);

/// Same as forward_base with the expert's sublayers substituted at its positions.
Tensor forward_with_expert(const BackboneModel& model, const ExpertSubnetwork& expert,
                           std::span<const TokenId> tokens);

/// Dispatches on a nullable expert.
Tensor forward(const BackboneModel& model, const ExpertSubnetwork* expert,
               std::span<const TokenId> tokens);

/// Final-layer hidden states after the output norm, [t, d_model].
Tensor final_hidden(const BackboneModel& model, const ExpertSubnetwork* expert,
                    std::span<const TokenId> tokens);

/// Argmax with the lowest index winning ties.
TokenId argmax_token(std::span<const float> logits);

/// Greedy decoding. Returns only the generated tokens (the eos that stops
/// decoding is not included). With `cache == nullptr` every step re-runs the
/// full prefix; both paths produce identical tokens.
Tokens greedy_decode(const BackboneModel& model, const ExpertSubnetwork* expert,
                     std::span<const TokenId> prompt, std::size_t max_new, KvCache* cache,
                     bool stop_at_eos = true);

}  // namespace ccoe
