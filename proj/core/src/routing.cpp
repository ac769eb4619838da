// SPDX-License-Identifier: Apache-2.0
#include "ccoe/routing.hpp"

#include <algorithm>
#include <cmath>

#include "ccoe/data.hpp"
#include "ccoe/detail/planner.hpp"
#include "ccoe/errors.hpp"
#include "ccoe/kernels.hpp"
#include "ccoe/registry.hpp"

namespace ccoe {

// ---------------------------------------------------------------------------
// Mapping matrix

void MappingMatrix::add_domain(const std::string& tag) {
  rows_.try_emplace(tag, std::vector<std::uint8_t>(columns_.size(), 0));
}

void MappingMatrix::remove_domain(const std::string& tag) { rows_.erase(tag); }

bool MappingMatrix::has_expert(ExpertId id) const {
  return std::binary_search(columns_.begin(), columns_.end(), id);
}

std::size_t MappingMatrix::column_of(ExpertId id) const {
  auto it = std::lower_bound(columns_.begin(), columns_.end(), id);
  if (it == columns_.end() || *it != id) {
    throw LookupError("expert " + std::to_string(id) + " is not a column of the mapping matrix");
  }
  return static_cast<std::size_t>(it - columns_.begin());
}

void MappingMatrix::add_expert(ExpertId id) {
  auto it = std::lower_bound(columns_.begin(), columns_.end(), id);
  if (it != columns_.end() && *it == id) return;
  const auto col = it - columns_.begin();
  columns_.insert(it, id);
  for (auto& [tag, row] : rows_) row.insert(row.begin() + col, 0);
}

void MappingMatrix::remove_expert(ExpertId id) {
  auto it = std::lower_bound(columns_.begin(), columns_.end(), id);
  if (it == columns_.end() || *it != id) return;
  const auto col = it - columns_.begin();
  columns_.erase(it);
  for (auto& [tag, row] : rows_) row.erase(row.begin() + col);
}

const std::vector<std::uint8_t>& MappingMatrix::row(const std::string& tag) const {
  auto it = rows_.find(tag);
  if (it == rows_.end()) throw GatingError("unknown domain tag '" + tag + "'");
  return it->second;
}

void MappingMatrix::set(const std::string& tag, ExpertId id, bool value) {
  auto it = rows_.find(tag);
  if (it == rows_.end()) throw GatingError("unknown domain tag '" + tag + "'");
  it->second[column_of(id)] = value ? 1 : 0;
}

bool MappingMatrix::get(const std::string& tag, ExpertId id) const {
  return row(tag)[column_of(id)] != 0;
}

std::vector<std::string> MappingMatrix::domains() const {
  std::vector<std::string> out;
  for (const auto& [tag, row] : rows_) out.push_back(tag);
  return out;
}

// ---------------------------------------------------------------------------
// Gating

std::vector<ExecutionPath> gate(const MappingMatrix& mapping,
                                const std::map<ExpertId, std::vector<std::size_t>>& positions,
                                std::span<const GateQuery> queries) {
  std::vector<ExecutionPath> paths;
  paths.reserve(queries.size());
  for (const GateQuery& q : queries) {
    const auto& row = mapping.row(q.domain);
    ExecutionPath path;
    path.origin = ExecutionPath::Origin::gating;
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (!row[c]) continue;
      const ExpertId id = mapping.experts()[c];
      auto it = positions.find(id);
      if (it == positions.end()) {
        throw LookupError("mapping references expert " + std::to_string(id) +
                          " which is not registered");
      }
      path.steps.push_back({id, it->second});
    }
    paths.push_back(std::move(path));
  }
  return paths;
}

std::vector<ExecutionPath> gate(const ExpertRegistry& registry, std::span<const GateQuery> queries) {
  return gate(registry.mapping(), registry.positions(), queries);
}

// ---------------------------------------------------------------------------
// Planner

namespace {

constexpr float kIndicatorNoise = 0.02f;

void indicator_row(const BackboneModel& backbone, Rng& rng, float* out) {
  const std::size_t d = backbone.config().d_model;
  const float* emb = backbone.params().token_embedding.row(tokens::kIndicator).data();
  for (std::size_t c = 0; c < d; ++c)
    out[c] = emb[c] + static_cast<float>(rng.normal()) * kIndicatorNoise;
}

Tensor normal(Shape s, float stddev, Rng& rng) {
  Tensor t(s);
  for (float& v : t.values()) v = static_cast<float>(rng.normal()) * stddev;
  return t;
}

}  // namespace

PlannerExpert PlannerExpert::init(std::vector<std::size_t> positions, std::size_t inner,
                                  std::vector<ExpertId> candidates, const BackboneModel& backbone,
                                  Rng& rng) {
  const ModelConfig& cfg = backbone.config();
  const std::size_t d = cfg.d_model;
  PlannerExpert p;
  p.expert = ExpertSubnetwork::init(-1, "planner", std::move(positions), cfg, inner, rng);
  p.candidates = std::move(candidates);
  p.uncalibrated.assign(p.candidates.size(), 1);
  p.indicators = Tensor({p.candidates.size() + 1, d});
  for (std::size_t r = 0; r <= p.candidates.size(); ++r)
    indicator_row(backbone, rng, p.indicators.row(r).data());
  const float s = 1.0f / std::sqrt(static_cast<float>(d));
  p.scorer.w_q = normal({d, d}, s, rng);
  p.scorer.w_k = normal({d, d}, s, rng);
  p.scorer.w_v = normal({d, d}, s, rng);
  p.scorer.f_w = normal({d}, s, rng);
  p.scorer.f_b = Tensor({1});
  p.validate(cfg);
  return p;
}

std::optional<std::size_t> PlannerExpert::candidate_index(ExpertId id) const {
  auto it = std::find(candidates.begin(), candidates.end(), id);
  if (it == candidates.end()) return std::nullopt;
  return static_cast<std::size_t>(it - candidates.begin());
}

std::size_t PlannerExpert::param_count() const {
  std::size_t n = 0;
  visit(*this, [&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

std::size_t param_bytes(const PlannerExpert& planner) {
  return planner.param_count() * sizeof(float);
}

void PlannerExpert::add_candidate(ExpertId id, const BackboneModel& backbone, Rng& rng) {
  if (candidate_index(id)) return;
  const std::size_t d = indicators.dim(1);
  const std::size_t n = candidates.size();
  Tensor next({n + 2, d});
  std::copy(indicators.data(), indicators.data() + n * d, next.data());
  indicator_row(backbone, rng, next.row(n).data());
  std::copy(indicators.data() + n * d, indicators.data() + (n + 1) * d, next.row(n + 1).data());
  indicators = std::move(next);
  candidates.push_back(id);
  uncalibrated.push_back(1);
}

void PlannerExpert::remove_candidate(ExpertId id) {
  const auto idx = candidate_index(id);
  if (!idx) throw LookupError("planner has no candidate " + std::to_string(id));
  const std::size_t d = indicators.dim(1);
  const std::size_t rows = indicators.dim(0);
  Tensor next({rows - 1, d});
  for (std::size_t r = 0, w = 0; r < rows; ++r) {
    if (r == *idx) continue;
    std::copy(indicators.row(r).begin(), indicators.row(r).end(), next.row(w++).begin());
  }
  indicators = std::move(next);
  candidates.erase(candidates.begin() + static_cast<std::ptrdiff_t>(*idx));
  uncalibrated.erase(uncalibrated.begin() + static_cast<std::ptrdiff_t>(*idx));
}

void PlannerExpert::validate(const ModelConfig& config) const {
  expert.validate(config);
  const std::size_t d = config.d_model;
  if (uncalibrated.size() != candidates.size()) {
    throw DimensionError("planner: calibration flags do not match candidates");
  }
  if (!(indicators.shape() == Shape{candidates.size() + 1, d})) {
    throw DimensionError("planner: indicators " + indicators.shape().to_string() + " but " +
                         std::to_string(candidates.size()) + " candidates plus STOP");
  }
  for (const Tensor* w : {&scorer.w_q, &scorer.w_k, &scorer.w_v}) {
    if (!(w->shape() == Shape{d, d})) {
      throw DimensionError("planner: scorer projection has shape " + w->shape().to_string());
    }
  }
  if (!(scorer.f_w.shape() == Shape{d}) || !(scorer.f_b.shape() == Shape{1})) {
    throw DimensionError("planner: scorer head shapes are inconsistent");
  }
}

Tokens planner_input(const Subtask& subtask) {
  if (subtask.index == 0) throw RoutingError("subtask index must be >= 1");
  Tokens t{tokens::kBos, static_cast<TokenId>('0' + std::min<std::size_t>(subtask.index, 9))};
  t.insert(t.end(), subtask.carried_context.begin(), subtask.carried_context.end());
  t.push_back('|');
  t.insert(t.end(), subtask.tokens.begin(), subtask.tokens.end());
  return t;
}

namespace detail {

Tensor planner_forward(const PlannerExpert& planner, const BackboneModel& backbone,
                       std::span<const TokenId> tokens, std::size_t batch, std::size_t seq,
                       std::span<const std::size_t> lengths, PlannerTrace* trace) {
  const ModelConfig& cfg = backbone.config();
  const std::size_t d = cfg.d_model;
  const std::size_t R = planner.indicators.dim(0);
  const std::size_t N = batch * seq;
  if (lengths.size() != batch) throw DimensionError("planner: one length per sequence required");
  for (std::size_t len : lengths) {
    if (len == 0 || len > seq) throw RoutingError("planner: sequence length out of range");
  }

  PlannerTrace local;
  PlannerTrace& tr = trace ? *trace : local;
  Composite composite(backbone, &planner.expert);
  Tensor hidden;
  forward_packed(composite, tokens, batch, seq, trace ? &tr.trunk : nullptr, &hidden, nullptr);
  tr.lengths.assign(lengths.begin(), lengths.end());

  const PlannerScorer& s = planner.scorer;
  tr.q = Tensor({R, d});
  kernels::gemm(planner.indicators.data(), s.w_q.data(), tr.q.data(), R, d, d, false);
  tr.k = Tensor({N, d});
  tr.v = Tensor({N, d});
  kernels::gemm(hidden.data(), s.w_k.data(), tr.k.data(), N, d, d, false);
  kernels::gemm(hidden.data(), s.w_v.data(), tr.v.data(), N, d, d, false);
  tr.probs.assign(batch * R * seq, 0.0f);
  tr.attn = Tensor({batch * R, d});

  const float scale = 1.0f / std::sqrt(static_cast<float>(d));
  Tensor scores({batch, R});
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t len = lengths[b];
    for (std::size_t r = 0; r < R; ++r) {
      float* p = tr.probs.data() + (b * R + r) * seq;
      const float* qr = tr.q.data() + r * d;
      for (std::size_t j = 0; j < len; ++j) {
        const float* kj = tr.k.data() + (b * seq + j) * d;
        float acc = 0.0f;
        for (std::size_t c = 0; c < d; ++c) acc += qr[c] * kj[c];
        p[j] = acc * scale;
      }
      kernels::softmax_inplace(p, len);
      float* a = tr.attn.data() + (b * R + r) * d;
      for (std::size_t j = 0; j < len; ++j) {
        const float* vj = tr.v.data() + (b * seq + j) * d;
        for (std::size_t c = 0; c < d; ++c) a[c] += p[j] * vj[c];
      }
      float h = s.f_b[0];
      for (std::size_t c = 0; c < d; ++c) h += s.f_w[c] * a[c];
      scores.at(b, r) = h;
    }
  }
  if (trace) tr.trunk.hidden = std::move(hidden);
  return scores;
}

void planner_backward(const PlannerExpert& planner, const BackboneModel& backbone,
                      const PlannerTrace& tr, const Tensor& dscores, PlannerExpert& grads) {
  const ModelConfig& cfg = backbone.config();
  const std::size_t d = cfg.d_model;
  const std::size_t R = planner.indicators.dim(0);
  const std::size_t batch = tr.trunk.batch;
  const std::size_t seq = tr.trunk.seq;
  const std::size_t N = batch * seq;
  const PlannerScorer& s = planner.scorer;
  PlannerScorer& g = grads.scorer;
  const float scale = 1.0f / std::sqrt(static_cast<float>(d));

  Tensor dq({R, d}), dk({N, d}), dv({N, d});
  std::vector<float> da(d), dp(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t len = tr.lengths[b];
    for (std::size_t r = 0; r < R; ++r) {
      const float ds = dscores.at(b, r);
      if (ds == 0.0f) continue;
      const float* a = tr.attn.data() + (b * R + r) * d;
      g.f_b[0] += ds;
      for (std::size_t c = 0; c < d; ++c) {
        g.f_w[c] += ds * a[c];
        da[c] = ds * s.f_w[c];
      }
      const float* p = tr.probs.data() + (b * R + r) * seq;
      float dot = 0.0f;
      for (std::size_t j = 0; j < len; ++j) {
        const float* vj = tr.v.data() + (b * seq + j) * d;
        float* dvj = dv.data() + (b * seq + j) * d;
        float acc = 0.0f;
        for (std::size_t c = 0; c < d; ++c) {
          acc += da[c] * vj[c];
          dvj[c] += p[j] * da[c];
        }
        dp[j] = acc;
        dot += p[j] * acc;
      }
      const float* qr = tr.q.data() + r * d;
      float* dqr = dq.data() + r * d;
      for (std::size_t j = 0; j < len; ++j) {
        const float dsj = p[j] * (dp[j] - dot) * scale;
        const float* kj = tr.k.data() + (b * seq + j) * d;
        float* dkj = dk.data() + (b * seq + j) * d;
        for (std::size_t c = 0; c < d; ++c) {
          dqr[c] += dsj * kj[c];
          dkj[c] += dsj * qr[c];
        }
      }
    }
  }

  const Tensor& hidden = tr.trunk.hidden;
  kernels::gemm_at_b_acc(planner.indicators.data(), dq.data(), g.w_q.data(), R, d, d);
  kernels::gemm_a_bt(dq.data(), s.w_q.data(), grads.indicators.data(), R, d, d, true);
  kernels::gemm_at_b_acc(hidden.data(), dk.data(), g.w_k.data(), N, d, d);
  kernels::gemm_at_b_acc(hidden.data(), dv.data(), g.w_v.data(), N, d, d);
  Tensor dhidden({N, d});
  kernels::gemm_a_bt(dk.data(), s.w_k.data(), dhidden.data(), N, d, d, false);
  kernels::gemm_a_bt(dv.data(), s.w_v.data(), dhidden.data(), N, d, d, true);

  Composite composite(backbone, &planner.expert);
  backward_packed(composite, tr.trunk, nullptr, &dhidden,
                  GradSink{nullptr, &grads.expert.layers});
}

}  // namespace detail

std::vector<float> plan_scores(const PlannerExpert& planner, const BackboneModel& backbone,
                               const Subtask& subtask) {
  if (subtask.tokens.empty()) throw RoutingError("plan_scores: empty subtask");
  const Tokens input = planner_input(subtask);
  if (input.size() > backbone.config().max_seq) {
    throw SequenceLengthError("planner input of " + std::to_string(input.size()) +
                              " tokens exceeds max_seq");
  }
  const std::size_t len = input.size();
  const Tensor scores =
      detail::planner_forward(planner, backbone, input, 1, len, std::span(&len, 1), nullptr);
  require_finite(scores, "planner scores");
  return {scores.values().begin(), scores.values().end()};
}

std::size_t select_expert(std::span<const float> scores) {
  if (scores.empty()) throw RoutingError("select_expert: no candidate experts");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

PlanResult execute_plan(const ExpertRegistry& registry, std::string_view instruction,
                        std::string_view payload, std::size_t max_steps,
                        std::size_t max_new_tokens) {
  if (max_steps == 0) throw ConfigError("execute_plan: max_steps must be >= 1");
  const PlannerExpert* planner = registry.planner();
  if (!planner) throw RoutingError("execute_plan: no planner installed");
  if (planner->candidates.empty()) throw RoutingError("execute_plan: planner has no candidates");
  const BackboneModel& backbone = registry.backbone();
  const std::size_t max_seq = backbone.config().max_seq;

  PlanResult result;
  result.path.origin = ExecutionPath::Origin::planning;
  Subtask st;
  st.tokens = encode_bytes(instruction);
  const Tokens operand = encode_bytes(payload);
  KvCache cache;

  auto trim = [&](Tokens& carried, std::size_t fixed, std::size_t budget) {
    if (fixed + carried.size() <= budget) return;
    if (fixed > budget) throw SequenceLengthError("execute_plan: query alone exceeds max_seq");
    carried.erase(carried.begin(),
                  carried.begin() + static_cast<std::ptrdiff_t>(fixed + carried.size() - budget));
    result.path.truncated = true;
  };

  for (std::size_t t = 1; t <= max_steps; ++t) {
    st.index = t;
    trim(st.carried_context, 3 + st.tokens.size(), max_seq);
    const std::vector<float> h = plan_scores(*planner, backbone, st);
    const std::size_t eligible = t == 1 ? planner->stop_index() : h.size();
    const std::size_t k = select_expert(std::span(h).first(eligible));
    if (k == planner->stop_index()) break;
    const ExpertId id = planner->candidates[k];
    if (!registry.contains(id)) {
      throw RoutingError("planner selected unregistered expert " + std::to_string(id));
    }
    const ExpertSubnetwork& expert = registry.expert(id);

    Tokens carried = st.carried_context;
    const std::size_t tail = (t == 1 ? operand.size() : 0) + 3;
    trim(carried, tail + max_new_tokens, max_seq);
    Tokens prompt{tokens::kBos, kNoTag};
    prompt.insert(prompt.end(), carried.begin(), carried.end());
    if (t == 1) prompt.insert(prompt.end(), operand.begin(), operand.end());
    prompt.push_back('=');
    Tokens out = greedy_decode(backbone, &expert, prompt, max_new_tokens, &cache);

    result.path.steps.push_back({id, expert.positions});
    result.step_outputs.push_back(out);
    st.carried_context = std::move(out);
  }
  if (!result.step_outputs.empty()) result.output = result.step_outputs.back();
  return result;
}

}  // namespace ccoe
