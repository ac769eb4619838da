// SPDX-License-Identifier: Apache-2.0
#include "ccoe/model.hpp"

#include <algorithm>
#include <cmath>

#include "ccoe/detail/transformer.hpp"
#include "ccoe/errors.hpp"
#include "ccoe/kernels.hpp"

namespace ccoe {

void ModelConfig::validate() const {
  if (layers < 2) throw ConfigError("config: layers must be >= 2");
  if (d_model == 0 || n_heads == 0 || d_ff == 0 || max_seq == 0) {
    throw ConfigError("config: sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("config: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (vocab < 2) throw ConfigError("config: vocab must be >= 2");
}

std::size_t ModelConfig::backbone_param_count() const {
  const std::size_t d = d_model;
  const std::size_t attn = 4 * (d * d + d) + 2 * d;
  const std::size_t ffn = d * d_ff + d_ff + d_ff * d + d + 2 * d;
  return vocab * d + max_seq * d + layers * (attn + ffn) + 2 * d + d * vocab + vocab;
}

namespace {

Tensor normal_tensor(Shape shape, float stddev, Rng& rng) {
  Tensor t(shape);
  for (float& v : t.values()) v = static_cast<float>(rng.normal()) * stddev;
  return t;
}

constexpr float kInitStd = 0.02f;

}  // namespace

FeedForward FeedForward::init(std::size_t d_model, std::size_t inner, float out_scale, Rng& rng) {
  FeedForward f;
  f.norm_gain = Tensor({d_model}, 1.0f);
  f.norm_bias = Tensor({d_model});
  f.w_in = normal_tensor({d_model, inner}, kInitStd, rng);
  f.b_in = Tensor({inner});
  f.w_out = normal_tensor({inner, d_model}, out_scale, rng);
  f.b_out = Tensor({d_model});
  return f;
}

FeedForward FeedForward::zeros_like(const FeedForward& o) {
  FeedForward f;
  f.norm_gain = Tensor(o.norm_gain.shape());
  f.norm_bias = Tensor(o.norm_bias.shape());
  f.w_in = Tensor(o.w_in.shape());
  f.b_in = Tensor(o.b_in.shape());
  f.w_out = Tensor(o.w_out.shape());
  f.b_out = Tensor(o.b_out.shape());
  return f;
}

std::size_t FeedForward::param_count() const {
  return norm_gain.size() + norm_bias.size() + w_in.size() + b_in.size() + w_out.size() +
         b_out.size();
}

void FeedForward::validate(std::size_t d) const {
  const std::size_t f = b_in.size();
  const bool ok = norm_gain.shape() == Shape{d} && norm_bias.shape() == Shape{d} &&
                  w_in.shape() == Shape{d, f} && w_out.shape() == Shape{f, d} &&
                  b_out.shape() == Shape{d} && b_in.rank() == 1 && f > 0;
  if (!ok) {
    throw DimensionError("feed-forward sublayer shapes inconsistent with d_model " +
                         std::to_string(d) + ": w_in " + w_in.shape().to_string() + ", w_out " +
                         w_out.shape().to_string());
  }
}

BackboneParams BackboneParams::zeros_like(const BackboneParams& other) {
  BackboneParams z = other;
  visit(z, [](const std::string&, Tensor& t) { t.fill(0.0f); });
  return z;
}

BackboneModel::BackboneModel(ModelConfig config, BackboneParams params, bool frozen)
    : config_(config), params_(std::move(params)), frozen_(frozen) {
  config_.validate();
  const std::size_t d = config_.d_model;
  auto expect = [](const Tensor& t, Shape s, const char* what) {
    if (!(t.shape() == s)) {
      throw DimensionError(std::string("backbone ") + what + " has shape " +
                           t.shape().to_string() + ", expected " + s.to_string());
    }
  };
  expect(params_.token_embedding, {config_.vocab, d}, "token_embedding");
  expect(params_.pos_embedding, {config_.max_seq, d}, "pos_embedding");
  expect(params_.final_gain, {d}, "final_gain");
  expect(params_.final_bias, {d}, "final_bias");
  expect(params_.head, {d, config_.vocab}, "head");
  expect(params_.head_bias, {config_.vocab}, "head_bias");
  if (params_.layers.size() != config_.layers) {
    throw DimensionError("backbone has " + std::to_string(params_.layers.size()) +
                         " layers, config says " + std::to_string(config_.layers));
  }
  for (const DecoderLayer& layer : params_.layers) {
    const Attention& a = layer.attn;
    for (const Tensor* w : {&a.w_q, &a.w_k, &a.w_v, &a.w_o}) expect(*w, {d, d}, "attention weight");
    for (const Tensor* b : {&a.b_q, &a.b_k, &a.b_v, &a.b_o, &a.norm_gain, &a.norm_bias})
      expect(*b, {d}, "attention vector");
    layer.ffn.validate(d);
  }
}

BackboneModel BackboneModel::init(const ModelConfig& config, Rng& rng) {
  config.validate();
  const std::size_t d = config.d_model;
  const float resid_std = kInitStd / std::sqrt(2.0f * static_cast<float>(config.layers));
  BackboneParams p;
  p.token_embedding = normal_tensor({config.vocab, d}, kInitStd, rng);
  p.pos_embedding = normal_tensor({config.max_seq, d}, kInitStd, rng);
  p.layers.resize(config.layers);
  for (DecoderLayer& layer : p.layers) {
    Attention& a = layer.attn;
    a.norm_gain = Tensor({d}, 1.0f);
    a.norm_bias = Tensor({d});
    a.w_q = normal_tensor({d, d}, kInitStd, rng);
    a.w_k = normal_tensor({d, d}, kInitStd, rng);
    a.w_v = normal_tensor({d, d}, kInitStd, rng);
    a.w_o = normal_tensor({d, d}, resid_std, rng);
    a.b_q = Tensor({d});
    a.b_k = Tensor({d});
    a.b_v = Tensor({d});
    a.b_o = Tensor({d});
    layer.ffn = FeedForward::init(d, config.d_ff, resid_std, rng);
  }
  p.final_gain = Tensor({d}, 1.0f);
  p.final_bias = Tensor({d});
  p.head = normal_tensor({d, config.vocab}, kInitStd, rng);
  p.head_bias = Tensor({config.vocab});
  return BackboneModel(config, std::move(p), false);
}

BackboneParams& BackboneModel::mutable_params() {
  if (frozen_) throw FrozenModelError("backbone is frozen; its parameters are read-only");
  return params_;
}

std::size_t BackboneModel::param_count() const {
  std::size_t n = 0;
  visit_params([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

ExpertSubnetwork ExpertSubnetwork::init(ExpertId id, std::string domain,
                                        std::vector<std::size_t> positions,
                                        const ModelConfig& config, std::size_t inner, Rng& rng) {
  ExpertSubnetwork e;
  e.id = id;
  e.domain = std::move(domain);
  e.positions = std::move(positions);
  const float resid_std = kInitStd / std::sqrt(2.0f * static_cast<float>(config.layers));
  for (std::size_t i = 0; i < e.positions.size(); ++i)
    e.layers.push_back(FeedForward::init(config.d_model, inner, resid_std, rng));
  e.validate(config);
  return e;
}

ExpertSubnetwork ExpertSubnetwork::from_backbone(ExpertId id, std::string domain,
                                                 std::vector<std::size_t> positions,
                                                 const BackboneModel& backbone) {
  ExpertSubnetwork e;
  e.id = id;
  e.domain = std::move(domain);
  e.positions = std::move(positions);
  for (std::size_t p : e.positions) {
    if (p >= backbone.config().layers) {
      throw RoutingError("position " + std::to_string(p) + " outside backbone");
    }
    e.layers.push_back(backbone.params().layers[p].ffn);
  }
  e.validate(backbone.config());
  return e;
}

std::size_t ExpertSubnetwork::param_count() const {
  std::size_t n = 0;
  for (const FeedForward& f : layers) n += f.param_count();
  return n;
}

void ExpertSubnetwork::validate(const ModelConfig& config) const {
  if (layers.size() != positions.size()) {
    throw RoutingError("expert " + std::to_string(id) + " has " + std::to_string(layers.size()) +
                       " layers but " + std::to_string(positions.size()) + " positions");
  }
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] >= config.layers) {
      throw RoutingError("expert " + std::to_string(id) + " position " +
                         std::to_string(positions[i]) + " outside [0, " +
                         std::to_string(config.layers) + ")");
    }
    if (i > 0 && positions[i] <= positions[i - 1]) {
      throw RoutingError("expert " + std::to_string(id) +
                         " positions must be strictly increasing");
    }
  }
  for (const FeedForward& f : layers) f.validate(config.d_model);
}

int ExpertSubnetwork::slot_for_layer(std::size_t layer) const {
  auto it = std::find(positions.begin(), positions.end(), layer);
  return it == positions.end() ? -1 : static_cast<int>(it - positions.begin());
}

std::size_t param_bytes(const FeedForward& ffn) { return ffn.param_count() * sizeof(float); }
std::size_t param_bytes(const BackboneModel& model) { return model.param_count() * sizeof(float); }
std::size_t param_bytes(const ExpertSubnetwork& expert) {
  return expert.param_count() * sizeof(float);
}

// ---------------------------------------------------------------------------
// Inference

namespace {

Tensor run(const BackboneModel& model, const ExpertSubnetwork* expert,
           std::span<const TokenId> tokens, bool want_logits) {
  if (tokens.empty()) throw SequenceLengthError("forward: empty token sequence");
  if (tokens.size() > model.config().max_seq) {
    throw SequenceLengthError("sequence of " + std::to_string(tokens.size()) +
                              " tokens exceeds max_seq " +
                              std::to_string(model.config().max_seq));
  }
  if (expert) expert->validate(model.config());
  detail::Composite composite(model, expert);
  Tensor hidden, logits;
  detail::forward_packed(composite, tokens, 1, tokens.size(), nullptr, &hidden,
                         want_logits ? &logits : nullptr);
  Tensor& out = want_logits ? logits : hidden;
  require_finite(out, "forward");
  return std::move(out);
}

}  // namespace

Tensor forward_base(const BackboneModel& model, std::span<const TokenId> tokens) {
  return run(model, nullptr, tokens, true);
}

Tensor forward_with_expert(const BackboneModel& model, const ExpertSubnetwork& expert,
                           std::span<const TokenId> tokens) {
  return run(model, &expert, tokens, true);
}

Tensor forward(const BackboneModel& model, const ExpertSubnetwork* expert,
               std::span<const TokenId> tokens) {
  return run(model, expert, tokens, true);
}

Tensor final_hidden(const BackboneModel& model, const ExpertSubnetwork* expert,
                    std::span<const TokenId> tokens) {
  return run(model, expert, tokens, false);
}

TokenId argmax_token(std::span<const float> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<TokenId>(best);
}

struct KvCacheAccess {
  static std::vector<Tensor>& keys(KvCache& c) { return c.keys_; }
  static std::vector<Tensor>& values(KvCache& c) { return c.values_; }
  static std::size_t& length(KvCache& c) { return c.length_; }
};

namespace {

// One incremental step at position `pos`. Mirrors forward_packed row by row
// with the same kernels, so logits match the full-prefix path exactly.
void decode_step(const detail::Composite& m, TokenId tok, KvCache& cache, float* logits) {
  const ModelConfig& cfg = m.config();
  const BackboneParams& P = m.params();
  const std::size_t d = cfg.d_model;
  std::size_t& len = KvCacheAccess::length(cache);
  auto& keys = KvCacheAccess::keys(cache);
  auto& vals = KvCacheAccess::values(cache);
  const std::size_t pos = len;
  if (pos >= cfg.max_seq) throw SequenceLengthError("decode: context exceeds max_seq");
  if (keys.size() != cfg.layers) {
    keys.assign(cfg.layers, Tensor({cfg.max_seq, d}));
    vals.assign(cfg.layers, Tensor({cfg.max_seq, d}));
  }

  thread_local std::vector<float> x, a, q, ctx, f_in, h;
  x.resize(d);
  a.resize(d);
  q.resize(d);
  ctx.resize(d);
  f_in.resize(d);
  const float* te = P.token_embedding.data() + static_cast<std::size_t>(tok) * d;
  const float* pe = P.pos_embedding.data() + pos * d;
  for (std::size_t c = 0; c < d; ++c) x[c] = te[c] + pe[c];

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const Attention& at = P.layers[l].attn;
    const FeedForward& ff = m.ffn(l);
    const std::size_t f = ff.inner_width();
    h.resize(f);
    kernels::layer_norm_forward(x.data(), at.norm_gain.data(), at.norm_bias.data(), a.data(),
                                nullptr, nullptr, 1, d, kLayerNormEps);
    float* krow = keys[l].data() + pos * d;
    float* vrow = vals[l].data() + pos * d;
    kernels::gemm(a.data(), at.w_q.data(), q.data(), 1, d, d, false);
    kernels::add_bias(q.data(), at.b_q.data(), 1, d);
    kernels::gemm(a.data(), at.w_k.data(), krow, 1, d, d, false);
    kernels::add_bias(krow, at.b_k.data(), 1, d);
    kernels::gemm(a.data(), at.w_v.data(), vrow, 1, d, d, false);
    kernels::add_bias(vrow, at.b_v.data(), 1, d);
    kernels::attention_row(q.data(), keys[l].data(), vals[l].data(), ctx.data(), nullptr, pos,
                           pos + 1, cfg.n_heads, cfg.head_dim(), d);
    kernels::gemm(ctx.data(), at.w_o.data(), x.data(), 1, d, d, true);
    kernels::add_bias(x.data(), at.b_o.data(), 1, d);
    kernels::layer_norm_forward(x.data(), ff.norm_gain.data(), ff.norm_bias.data(), f_in.data(),
                                nullptr, nullptr, 1, d, kLayerNormEps);
    kernels::gemm(f_in.data(), ff.w_in.data(), h.data(), 1, d, f, false);
    kernels::add_bias(h.data(), ff.b_in.data(), 1, f);
    kernels::gelu_forward(h.data(), h.data(), f);
    kernels::gemm(h.data(), ff.w_out.data(), x.data(), 1, f, d, true);
    kernels::add_bias(x.data(), ff.b_out.data(), 1, d);
  }
  kernels::layer_norm_forward(x.data(), P.final_gain.data(), P.final_bias.data(), a.data(),
                              nullptr, nullptr, 1, d, kLayerNormEps);
  kernels::gemm(a.data(), P.head.data(), logits, 1, d, cfg.vocab, false);
  kernels::add_bias(logits, P.head_bias.data(), 1, cfg.vocab);
  ++len;
}

}  // namespace

Tokens greedy_decode(const BackboneModel& model, const ExpertSubnetwork* expert,
                     std::span<const TokenId> prompt, std::size_t max_new, KvCache* cache,
                     bool stop_at_eos) {
  if (prompt.empty()) throw ConfigError("greedy_decode: prompt must be nonempty");
  if (max_new == 0) throw ConfigError("greedy_decode: max_new must be >= 1");
  const std::size_t max_seq = model.config().max_seq;
  if (prompt.size() > max_seq) {
    throw SequenceLengthError("prompt of " + std::to_string(prompt.size()) +
                              " tokens exceeds max_seq " + std::to_string(max_seq));
  }
  if (expert) expert->validate(model.config());
  for (TokenId t : prompt) {
    if (t < 0 || static_cast<std::size_t>(t) >= model.config().vocab) {
      throw DimensionError("token id " + std::to_string(t) + " outside vocabulary");
    }
  }

  Tokens out;
  if (cache) {
    detail::Composite composite(model, expert);
    cache->reset();
    std::vector<float> logits(model.config().vocab);
    for (TokenId t : prompt) decode_step(composite, t, *cache, logits.data());
    for (std::size_t i = 0; i < max_new; ++i) {
      const TokenId next = argmax_token(logits);
      if (stop_at_eos && next == tokens::kEos) break;
      out.push_back(next);
      if (i + 1 == max_new) break;
      if (cache->length() >= max_seq) {
        throw SequenceLengthError("decode: context exceeds max_seq " + std::to_string(max_seq));
      }
      decode_step(composite, next, *cache, logits.data());
    }
    return out;
  }

  Tokens context(prompt.begin(), prompt.end());
  for (std::size_t i = 0; i < max_new; ++i) {
    if (context.size() > max_seq) {
      throw SequenceLengthError("decode: context exceeds max_seq " + std::to_string(max_seq));
    }
    const Tensor logits = forward(model, expert, context);
    const TokenId next = argmax_token(logits.row(logits.dim(0) - 1));
    if (stop_at_eos && next == tokens::kEos) break;
    out.push_back(next);
    context.push_back(next);
  }
  return out;
}

}  // namespace ccoe
