// SPDX-License-Identifier: Apache-2.0
#include "ccoe/detail/transformer.hpp"

#include <algorithm>
#include <cmath>

#include "ccoe/errors.hpp"
#include "ccoe/kernels.hpp"

namespace ccoe::detail {

using kernels::add_bias;
using kernels::gemm;
using kernels::gemm_a_bt;
using kernels::gemm_at_b_acc;
using kernels::sum_rows_acc;

Composite::Composite(const BackboneModel& backbone, const ExpertSubnetwork* expert)
    : Composite(backbone.config(), backbone.params(), expert) {}

Composite::Composite(const ModelConfig& config, const BackboneParams& params,
                     const ExpertSubnetwork* expert)
    : config_(config), params_(params), expert_(expert), slots_(config.layers, -1) {
  if (expert_) {
    for (std::size_t i = 0; i < expert_->positions.size(); ++i) {
      const std::size_t p = expert_->positions[i];
      if (p >= config_.layers) {
        throw RoutingError("expert " + std::to_string(expert_->id) + " position " +
                           std::to_string(p) + " outside [0, " + std::to_string(config_.layers) +
                           ")");
      }
      slots_[p] = static_cast<int>(i);
    }
  }
}

const FeedForward& Composite::ffn(std::size_t layer) const {
  const int slot = slots_[layer];
  return slot >= 0 ? expert_->layers[static_cast<std::size_t>(slot)] : params_.layers[layer].ffn;
}

namespace {

void ensure(Tensor& t, std::size_t rows, std::size_t cols) {
  if (t.rank() != 2 || t.dim(0) != rows || t.dim(1) != cols) t = Tensor({rows, cols});
}

// out = in * w + b
void linear(const Tensor& in, const Tensor& w, const Tensor& b, Tensor& out) {
  const std::size_t rows = in.dim(0);
  const std::size_t din = w.dim(0);
  const std::size_t dout = w.dim(1);
  ensure(out, rows, dout);
  gemm(in.data(), w.data(), out.data(), rows, din, dout, false);
  add_bias(out.data(), b.data(), rows, dout);
}

}  // namespace

void forward_packed(const Composite& model, std::span<const TokenId> tokens, std::size_t batch,
                    std::size_t seq, Trace* trace, Tensor* hidden, Tensor* logits) {
  const ModelConfig& cfg = model.config();
  const BackboneParams& P = model.params();
  const std::size_t n = batch * seq;
  const std::size_t d = cfg.d_model;
  const std::size_t heads = cfg.n_heads;
  const std::size_t hd = cfg.head_dim();
  if (tokens.size() != n) throw DimensionError("forward: token count does not match batch*seq");
  if (seq > cfg.max_seq) {
    throw SequenceLengthError("sequence length " + std::to_string(seq) + " exceeds max_seq " +
                              std::to_string(cfg.max_seq));
  }

  // Scratch used when no trace is recorded.
  thread_local LayerTrace scratch;
  Tensor x({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    const TokenId tok = tokens[r];
    if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab) {
      throw DimensionError("token id " + std::to_string(tok) + " outside vocabulary");
    }
    const float* te = P.token_embedding.data() + static_cast<std::size_t>(tok) * d;
    const float* pe = P.pos_embedding.data() + (r % seq) * d;
    float* xr = x.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) xr[c] = te[c] + pe[c];
  }

  if (trace) {
    trace->batch = batch;
    trace->seq = seq;
    trace->tokens.assign(tokens.begin(), tokens.end());
    trace->layers.resize(cfg.layers);
  }

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerTrace& lt = trace ? trace->layers[l] : scratch;
    const Attention& at = P.layers[l].attn;
    const FeedForward& ff = model.ffn(l);
    const std::size_t f = ff.inner_width();

    ensure(lt.a_in, n, d);
    ensure(lt.ln1_hat, n, d);
    lt.ln1_rstd.resize(n);
    kernels::layer_norm_forward(x.data(), at.norm_gain.data(), at.norm_bias.data(),
                                lt.a_in.data(), trace ? lt.ln1_hat.data() : nullptr,
                                lt.ln1_rstd.data(), n, d, kLayerNormEps);
    linear(lt.a_in, at.w_q, at.b_q, lt.q);
    linear(lt.a_in, at.w_k, at.b_k, lt.k);
    linear(lt.a_in, at.w_v, at.b_v, lt.v);
    ensure(lt.ctx, n, d);
    if (trace) lt.probs.resize(batch * heads * seq * seq);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = b * seq * d;
      kernels::attention_forward(lt.q.data() + off, lt.k.data() + off, lt.v.data() + off,
                                 lt.ctx.data() + off,
                                 trace ? lt.probs.data() + b * heads * seq * seq : nullptr, seq,
                                 heads, hd, d);
    }
    if (trace) lt.x_in = x;
    // x_mid = x + ctx * w_o + b_o
    gemm(lt.ctx.data(), at.w_o.data(), x.data(), n, d, d, true);
    add_bias(x.data(), at.b_o.data(), n, d);
    if (trace) lt.x_mid = x;

    ensure(lt.f_in, n, d);
    ensure(lt.ln2_hat, n, d);
    lt.ln2_rstd.resize(n);
    kernels::layer_norm_forward(x.data(), ff.norm_gain.data(), ff.norm_bias.data(),
                                lt.f_in.data(), trace ? lt.ln2_hat.data() : nullptr,
                                lt.ln2_rstd.data(), n, d, kLayerNormEps);
    linear(lt.f_in, ff.w_in, ff.b_in, lt.h_pre);
    ensure(lt.h_act, n, f);
    kernels::gelu_forward(lt.h_pre.data(), lt.h_act.data(), n * f);
    gemm(lt.h_act.data(), ff.w_out.data(), x.data(), n, f, d, true);
    add_bias(x.data(), ff.b_out.data(), n, d);
  }

  Tensor local_hidden;
  Tensor& hid = trace ? trace->hidden : (hidden ? *hidden : local_hidden);
  ensure(hid, n, d);
  if (trace) {
    trace->x_final = x;
    ensure(trace->final_hat, n, d);
    trace->final_rstd.resize(n);
  }
  kernels::layer_norm_forward(x.data(), P.final_gain.data(), P.final_bias.data(), hid.data(),
                              trace ? trace->final_hat.data() : nullptr,
                              trace ? trace->final_rstd.data() : nullptr, n, d, kLayerNormEps);
  if (trace && hidden) *hidden = hid;
  if (logits) linear(hid, P.head, P.head_bias, *logits);
}

void backward_packed(const Composite& model, const Trace& trace, const Tensor* dlogits,
                     const Tensor* dhidden, GradSink sink) {
  const ModelConfig& cfg = model.config();
  const BackboneParams& P = model.params();
  const std::size_t n = trace.batch * trace.seq;
  const std::size_t seq = trace.seq;
  const std::size_t d = cfg.d_model;
  const std::size_t V = cfg.vocab;
  const std::size_t heads = cfg.n_heads;
  const std::size_t hd = cfg.head_dim();
  if ((dlogits == nullptr) == (dhidden == nullptr)) {
    throw ConfigError("backward: exactly one of dlogits / dhidden must be given");
  }

  const ExpertSubnetwork* expert = model.expert();
  if (sink.expert && !expert) throw ConfigError("backward: expert gradients without an expert");
  std::size_t lowest = cfg.layers;
  if (sink.backbone) {
    lowest = 0;
  } else if (sink.expert && !expert->positions.empty()) {
    lowest = expert->positions.front();
  }
  BackboneParams* G = sink.backbone;

  Tensor dh({n, d});
  if (dlogits) {
    gemm_a_bt(dlogits->data(), P.head.data(), dh.data(), n, V, d, false);
    if (G) {
      gemm_at_b_acc(trace.hidden.data(), dlogits->data(), G->head.data(), n, d, V);
      sum_rows_acc(dlogits->data(), G->head_bias.data(), n, V);
    }
  } else {
    dh = *dhidden;
  }
  if (lowest == cfg.layers) return;

  Tensor dx({n, d});
  kernels::layer_norm_backward(dh.data(), trace.final_hat.data(), trace.final_rstd.data(),
                               P.final_gain.data(), dx.data(), G ? G->final_gain.data() : nullptr,
                               G ? G->final_bias.data() : nullptr, n, d, false);

  Tensor dh_act, df_in({n, d}), dctx({n, d}), dq({n, d}), dk({n, d}), dv({n, d}), da({n, d});
  for (std::size_t li = cfg.layers; li-- > lowest;) {
    const LayerTrace& lt = trace.layers[li];
    const FeedForward& ff = model.ffn(li);
    const int slot = model.expert_slot(li);
    FeedForward* g = nullptr;
    if (slot >= 0 && sink.expert) g = &(*sink.expert)[static_cast<std::size_t>(slot)];
    if (slot < 0 && G) g = &G->layers[li].ffn;
    const std::size_t f = ff.inner_width();

    // Feed-forward sublayer; dx is d(x_out) and becomes d(x_mid).
    if (g) {
      gemm_at_b_acc(lt.h_act.data(), dx.data(), g->w_out.data(), n, f, d);
      sum_rows_acc(dx.data(), g->b_out.data(), n, d);
    }
    ensure(dh_act, n, f);
    gemm_a_bt(dx.data(), ff.w_out.data(), dh_act.data(), n, d, f, false);
    kernels::gelu_backward(lt.h_pre.data(), dh_act.data(), n * f);
    if (g) {
      gemm_at_b_acc(lt.f_in.data(), dh_act.data(), g->w_in.data(), n, d, f);
      sum_rows_acc(dh_act.data(), g->b_in.data(), n, f);
    }
    if (li == lowest && !G) {
      // Only the norm gradient of this sublayer is still owed.
      if (g) {
        gemm_a_bt(dh_act.data(), ff.w_in.data(), df_in.data(), n, f, d, false);
        for (std::size_t r = 0; r < n; ++r) {
          const float* dyr = df_in.data() + r * d;
          const float* hr = lt.ln2_hat.data() + r * d;
          for (std::size_t c = 0; c < d; ++c) {
            g->norm_gain[c] += dyr[c] * hr[c];
            g->norm_bias[c] += dyr[c];
          }
        }
      }
      break;
    }
    gemm_a_bt(dh_act.data(), ff.w_in.data(), df_in.data(), n, f, d, false);
    kernels::layer_norm_backward(df_in.data(), lt.ln2_hat.data(), lt.ln2_rstd.data(),
                                 ff.norm_gain.data(), dx.data(), g ? g->norm_gain.data() : nullptr,
                                 g ? g->norm_bias.data() : nullptr, n, d, true);

    // Attention sublayer; dx is d(x_mid) and becomes d(x_in).
    const Attention& at = P.layers[li].attn;
    Attention* ga = G ? &G->layers[li].attn : nullptr;
    if (ga) {
      gemm_at_b_acc(lt.ctx.data(), dx.data(), ga->w_o.data(), n, d, d);
      sum_rows_acc(dx.data(), ga->b_o.data(), n, d);
    }
    gemm_a_bt(dx.data(), at.w_o.data(), dctx.data(), n, d, d, false);
    dq.fill(0.0f);
    dk.fill(0.0f);
    dv.fill(0.0f);
    for (std::size_t b = 0; b < trace.batch; ++b) {
      const std::size_t off = b * seq * d;
      kernels::attention_backward(dctx.data() + off, lt.q.data() + off, lt.k.data() + off,
                                  lt.v.data() + off, lt.probs.data() + b * heads * seq * seq,
                                  dq.data() + off, dk.data() + off, dv.data() + off, seq, heads,
                                  hd, d);
    }
    if (ga) {
      gemm_at_b_acc(lt.a_in.data(), dq.data(), ga->w_q.data(), n, d, d);
      gemm_at_b_acc(lt.a_in.data(), dk.data(), ga->w_k.data(), n, d, d);
      gemm_at_b_acc(lt.a_in.data(), dv.data(), ga->w_v.data(), n, d, d);
      sum_rows_acc(dq.data(), ga->b_q.data(), n, d);
      sum_rows_acc(dk.data(), ga->b_k.data(), n, d);
      sum_rows_acc(dv.data(), ga->b_v.data(), n, d);
    }
    gemm_a_bt(dq.data(), at.w_q.data(), da.data(), n, d, d, false);
    gemm_a_bt(dk.data(), at.w_k.data(), da.data(), n, d, d, true);
    gemm_a_bt(dv.data(), at.w_v.data(), da.data(), n, d, d, true);
    kernels::layer_norm_backward(da.data(), lt.ln1_hat.data(), lt.ln1_rstd.data(),
                                 at.norm_gain.data(), dx.data(),
                                 ga ? ga->norm_gain.data() : nullptr,
                                 ga ? ga->norm_bias.data() : nullptr, n, d, true);
  }

  if (G && lowest == 0) {
    for (std::size_t r = 0; r < n; ++r) {
      const auto tok = static_cast<std::size_t>(trace.tokens[r]);
      float* te = G->token_embedding.data() + tok * d;
      float* pe = G->pos_embedding.data() + (r % seq) * d;
      const float* dxr = dx.data() + r * d;
      for (std::size_t c = 0; c < d; ++c) {
        te[c] += dxr[c];
        pe[c] += dxr[c];
      }
    }
  }
}

}  // namespace ccoe::detail
