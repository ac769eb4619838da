// SPDX-License-Identifier: Apache-2.0
#include "ccoe/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <json.hpp>

#include "ccoe/detail/planner.hpp"
#include "ccoe/detail/transformer.hpp"
#include "ccoe/errors.hpp"
#include "ccoe/routing.hpp"

namespace ccoe {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0f) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be a finite value >= 0");
  }
  if (steps == 0) throw ConfigError("steps must be >= 1");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(beta1 >= 0.0f && beta1 < 1.0f) || !(beta2 >= 0.0f && beta2 < 1.0f)) {
    throw ConfigError("Adam moments must lie in [0, 1)");
  }
  if (!(eps > 0.0f)) throw ConfigError("Adam eps must be positive");
  if (weight_decay < 0.0f) throw ConfigError("weight_decay must be >= 0");
}

float TrainConfig::rate_at(std::size_t s) const {
  if (warmup > 0 && s < warmup) {
    return learning_rate * static_cast<float>(s + 1) / static_cast<float>(warmup);
  }
  if (!cosine_decay || steps <= warmup + 1) return learning_rate;
  const double progress =
      static_cast<double>(s - warmup) / static_cast<double>(steps - warmup - 1);
  const double f = 0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return learning_rate * static_cast<float>(f);
}

std::string LossRecord::to_jsonl() const {
  return nlohmann::json{{"step", step}, {"loss", loss}, {"accuracy", accuracy}}.dump();
}

LossResult nll_loss(const Tensor& logits, std::span<const TokenId> targets,
                    std::span<const std::uint8_t> mask) {
  if (logits.rank() != 2) throw DimensionError("nll_loss: logits must be rank 2");
  const std::size_t n = logits.dim(0);
  const std::size_t V = logits.dim(1);
  if (targets.size() != n || mask.size() != n) {
    throw DimensionError("nll_loss: " + std::to_string(n) + " logit rows but " +
                         std::to_string(targets.size()) + " targets and " +
                         std::to_string(mask.size()) + " mask entries");
  }
  LossResult r;
  for (std::size_t i = 0; i < n; ++i) r.count += mask[i] ? 1 : 0;
  if (r.count == 0) throw DatasetError("nll_loss: every position is masked out");
  r.dlogits = Tensor(logits.shape());
  const float inv = 1.0f / static_cast<float>(r.count);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const TokenId y = targets[i];
    if (y < 0 || static_cast<std::size_t>(y) >= V) {
      throw DimensionError("nll_loss: target " + std::to_string(y) + " outside vocabulary");
    }
    const float* z = logits.data() + i * V;
    float* g = r.dlogits.data() + i * V;
    const float mx = *std::max_element(z, z + V);
    double sum = 0.0;
    for (std::size_t j = 0; j < V; ++j) sum += std::exp(static_cast<double>(z[j] - mx));
    const double lse = static_cast<double>(mx) + std::log(sum);
    total += lse - static_cast<double>(z[y]);
    std::size_t best = 0;
    for (std::size_t j = 0; j < V; ++j) {
      g[j] = static_cast<float>(std::exp(static_cast<double>(z[j]) - lse)) * inv;
      if (z[j] > z[best]) best = j;
    }
    g[y] -= inv;
    if (best == static_cast<std::size_t>(y)) ++r.correct;
  }
  r.loss = total / static_cast<double>(r.count);
  return r;
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<ParamRef> params, const TrainConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
  cfg_.validate();
  for (const ParamRef& p : params_) {
    if (!p.value || !p.grad || !(p.value->shape() == p.grad->shape())) {
      throw DimensionError("optimizer parameter '" + p.name + "' lacks a matching gradient");
    }
    m_.emplace_back(p.value->size(), 0.0f);
    v_.emplace_back(p.value->size(), 0.0f);
  }
}

bool Adam::contains(const Tensor* t) const noexcept {
  return std::any_of(params_.begin(), params_.end(),
                     [&](const ParamRef& p) { return p.value == t; });
}

void Adam::zero_grad() {
  for (ParamRef& p : params_) p.grad->fill(0.0f);
}

double Adam::grad_norm() const {
  double sq = 0.0;
  for (const ParamRef& p : params_)
    for (float g : p.grad->values()) sq += static_cast<double>(g) * g;
  return std::sqrt(sq);
}

void Adam::step(float lr) {
  ++t_;
  float scale = 1.0f;
  if (cfg_.grad_clip > 0.0f) {
    const double norm = grad_norm();
    if (norm > cfg_.grad_clip) scale = static_cast<float>(cfg_.grad_clip / norm);
  }
  const float b1 = cfg_.beta1;
  const float b2 = cfg_.beta2;
  const float c1 = 1.0f - std::pow(b1, static_cast<float>(t_));
  const float c2 = 1.0f - std::pow(b2, static_cast<float>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& w = *params_[i].value;
    const Tensor& g = *params_[i].grad;
    std::vector<float>& m = m_[i];
    std::vector<float>& v = v_[i];
    const float decay = w.rank() == 2 ? lr * cfg_.weight_decay : 0.0f;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const float gj = g[j] * scale;
      m[j] = b1 * m[j] + (1.0f - b1) * gj;
      v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
      const float update = lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
      w[j] -= update + decay * w[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Batches

Batch make_batch(std::span<const Example> examples) {
  if (examples.empty()) throw DatasetError("make_batch: no examples");
  Batch b;
  b.batch = examples.size();
  for (const Example& e : examples) {
    if (e.prompt.empty() || e.target.empty()) throw DatasetError("make_batch: empty prompt or target");
    b.seq = std::max(b.seq, e.prompt.size() + e.target.size() - 1);
  }
  const std::size_t n = b.batch * b.seq;
  b.inputs.assign(n, tokens::kPad);
  b.targets.assign(n, tokens::kPad);
  b.mask.assign(n, 0);
  for (std::size_t i = 0; i < b.batch; ++i) {
    const Example& e = examples[i];
    Tokens full = e.prompt;
    full.insert(full.end(), e.target.begin(), e.target.end());
    const std::size_t len = full.size() - 1;
    for (std::size_t j = 0; j < len; ++j) {
      b.inputs[i * b.seq + j] = full[j];
      b.targets[i * b.seq + j] = full[j + 1];
      b.mask[i * b.seq + j] = j + 1 >= e.prompt.size() ? 1 : 0;
    }
  }
  return b;
}

std::vector<Example> draw_examples(const ExampleSampler& sampler, std::size_t n,
                                   std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(sampler(rng));
  return out;
}

namespace {

/// Averages loss records over a logging window.
class Logger {
 public:
  Logger(const TrainConfig& cfg, const LossCallback& cb, std::vector<LossRecord>& curve)
      : cfg_(cfg), cb_(cb), curve_(curve) {}

  void add(std::size_t step, double loss, double acc) {
    if (cfg_.log_every == 0) return;
    loss_ += loss;
    acc_ += acc;
    ++n_;
    if ((step + 1) % cfg_.log_every == 0 || step + 1 == cfg_.steps) {
      LossRecord r{step + 1, loss_ / static_cast<double>(n_), acc_ / static_cast<double>(n_)};
      curve_.push_back(r);
      if (cb_) cb_(r);
      loss_ = acc_ = 0.0;
      n_ = 0;
    }
  }

 private:
  const TrainConfig& cfg_;
  const LossCallback& cb_;
  std::vector<LossRecord>& curve_;
  double loss_ = 0.0, acc_ = 0.0;
  std::size_t n_ = 0;
};

std::vector<Example> sample_batch(const ExampleSampler& sampler, Rng& rng, std::size_t n) {
  std::vector<Example> ex;
  ex.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ex.push_back(sampler(rng));
  return ex;
}

[[noreturn]] void diverged(std::size_t step, long last_good) {
  throw DivergenceError("loss became non-finite at step " + std::to_string(step + 1) +
                            "; parameters restored to step " + std::to_string(last_good),
                        last_good);
}

}  // namespace

std::vector<ParamRef> expert_param_refs(ExpertSubnetwork& expert,
                                        std::vector<FeedForward>& grads) {
  grads.clear();
  for (const FeedForward& f : expert.layers) grads.push_back(FeedForward::zeros_like(f));
  std::vector<ParamRef> refs;
  for (std::size_t i = 0; i < expert.layers.size(); ++i) {
    const std::string prefix = "layers." + std::to_string(i) + ".";
    std::vector<std::pair<std::string, Tensor*>> values, gs;
    FeedForward::visit(expert.layers[i], prefix,
                       [&](const std::string& n, Tensor& t) { values.emplace_back(n, &t); });
    FeedForward::visit(grads[i], prefix,
                       [&](const std::string& n, Tensor& t) { gs.emplace_back(n, &t); });
    for (std::size_t k = 0; k < values.size(); ++k)
      refs.push_back({values[k].first, values[k].second, gs[k].second});
  }
  return refs;
}

ExpertTrainResult train_expert(ExpertSubnetwork expert, const BackboneModel& backbone,
                               const ExampleSampler& sampler, const TrainConfig& cfg,
                               const LossCallback& on_record) {
  cfg.validate();
  expert.validate(backbone.config());
  ExpertTrainResult result;
  std::vector<FeedForward> grads;
  Adam adam(expert_param_refs(expert, grads), cfg);
  Logger log(cfg, on_record, result.curve);
  Rng rng(cfg.seed);
  detail::Trace trace;
  Tensor logits;
  std::vector<FeedForward> snapshot = expert.layers;
  long last_good = 0;

  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const Batch batch = make_batch(sample_batch(sampler, rng, cfg.batch_size));
    detail::Composite model(backbone, &expert);
    detail::forward_packed(model, batch.inputs, batch.batch, batch.seq, &trace, nullptr, &logits);
    if (!logits.all_finite()) {
      expert.layers = snapshot;
      diverged(s, last_good);
    }
    LossResult loss = nll_loss(logits, batch.targets, batch.mask);
    if (!std::isfinite(loss.loss)) {
      expert.layers = snapshot;
      diverged(s, last_good);
    }
    snapshot = expert.layers;
    last_good = static_cast<long>(s);
    log.add(s, loss.loss, static_cast<double>(loss.correct) / static_cast<double>(loss.count));

    adam.zero_grad();
    detail::backward_packed(model, trace, &loss.dlogits, nullptr, {nullptr, &grads});
    adam.step(cfg.rate_at(s));
  }
  result.expert = std::move(expert);
  return result;
}

PretrainResult pretrain_backbone(const ModelConfig& config, const ExampleSampler& sampler,
                                 const TrainConfig& cfg, const LossCallback& on_record) {
  cfg.validate();
  Rng init_rng(cfg.seed);
  BackboneModel model = BackboneModel::init(config, init_rng);
  BackboneParams& params = model.mutable_params();
  BackboneParams grads = BackboneParams::zeros_like(params);

  std::vector<std::pair<std::string, Tensor*>> values, gs;
  BackboneParams::visit(params, [&](const std::string& n, Tensor& t) { values.emplace_back(n, &t); });
  BackboneParams::visit(grads, [&](const std::string& n, Tensor& t) { gs.emplace_back(n, &t); });
  std::vector<ParamRef> refs;
  for (std::size_t k = 0; k < values.size(); ++k)
    refs.push_back({values[k].first, values[k].second, gs[k].second});
  Adam adam(std::move(refs), cfg);

  // A fixed probe batch measures progress on the same data at both ends.
  const Batch probe = make_batch(draw_examples(sampler, 256, cfg.seed ^ 0x5eedULL));
  auto probe_loss = [&]() {
    Tensor lg;
    detail::forward_packed(detail::Composite(model, nullptr), probe.inputs, probe.batch, probe.seq,
                           nullptr, nullptr, &lg);
    return nll_loss(lg, probe.targets, probe.mask).loss;
  };

  PretrainResult result{model, {}, 0.0, 0.0};
  result.initial_loss = probe_loss();
  Logger log(cfg, on_record, result.curve);
  Rng rng(cfg.seed + 1);
  detail::Trace trace;
  Tensor logits;
  BackboneParams snapshot = params;
  long last_good = 0;

  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const Batch batch = make_batch(sample_batch(sampler, rng, cfg.batch_size));
    detail::Composite composite(model, nullptr);
    detail::forward_packed(composite, batch.inputs, batch.batch, batch.seq, &trace, nullptr,
                           &logits);
    const bool finite = logits.all_finite();
    LossResult loss;
    if (finite) loss = nll_loss(logits, batch.targets, batch.mask);
    if (!finite || !std::isfinite(loss.loss)) {
      params = snapshot;
      diverged(s, last_good);
    }
    snapshot = params;
    last_good = static_cast<long>(s);
    log.add(s, loss.loss, static_cast<double>(loss.correct) / static_cast<double>(loss.count));

    adam.zero_grad();
    detail::backward_packed(composite, trace, &loss.dlogits, nullptr, {&grads, nullptr});
    adam.step(cfg.rate_at(s));
  }
  result.final_loss = probe_loss();
  model.freeze();
  result.backbone = std::move(model);
  return result;
}

double exact_match_accuracy(const BackboneModel& backbone, const ExpertSubnetwork* expert,
                            std::span<const Example> examples) {
  if (examples.empty()) return 0.0;
  std::size_t hits = 0;
  KvCache cache;
  for (const Example& e : examples) {
    const Tokens out = greedy_decode(backbone, expert, e.prompt, e.target.size(), &cache);
    Tokens want(e.target.begin(), e.target.end());
    if (!want.empty() && want.back() == tokens::kEos) want.pop_back();
    // A match must also stop: the decode ends on eos only if out is shorter than the budget.
    if (out == want && out.size() < e.target.size()) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

// ---------------------------------------------------------------------------
// Planner

std::vector<PlannerSample> planner_samples(
    const CoTask& task, const std::function<std::size_t(Domain)>& domain_to_candidate,
    std::size_t stop_index) {
  const std::vector<std::string> chain = task.chain();
  Subtask st;
  st.tokens = encode_bytes(task.instruction());
  std::vector<PlannerSample> out;
  for (std::size_t t = 1; t <= task.order.size() + 1; ++t) {
    st.index = t;
    st.carried_context = t == 1 ? Tokens{} : encode_bytes(chain[t - 2]);
    const std::size_t label =
        t <= task.order.size() ? domain_to_candidate(task.order[t - 1]) : stop_index;
    if (label > stop_index) throw DatasetError("planner label outside the candidate set");
    out.push_back({planner_input(st), label, t == 1});
  }
  return out;
}

namespace {

std::vector<ParamRef> planner_refs(PlannerExpert& p, PlannerExpert& g) {
  std::vector<std::pair<std::string, Tensor*>> values, gs;
  PlannerExpert::visit(p, [&](const std::string& n, Tensor& t) { values.emplace_back(n, &t); });
  PlannerExpert::visit(g, [&](const std::string& n, Tensor& t) { gs.emplace_back(n, &t); });
  std::vector<ParamRef> refs;
  for (std::size_t k = 0; k < values.size(); ++k)
    refs.push_back({values[k].first, values[k].second, gs[k].second});
  return refs;
}

PlannerExpert planner_zeros(const PlannerExpert& p) {
  PlannerExpert g = p;
  PlannerExpert::visit(g, [](const std::string&, Tensor& t) { t.fill(0.0f); });
  return g;
}

}  // namespace

PlannerTrainResult train_planner(PlannerExpert& planner, const BackboneModel& backbone,
                                 const PlannerSampleSource& source, const TrainConfig& cfg,
                                 const LossCallback& on_record) {
  cfg.validate();
  planner.validate(backbone.config());
  const std::size_t R = planner.indicators.dim(0);
  const std::size_t stop = planner.stop_index();
  PlannerExpert grads = planner_zeros(planner);
  Adam adam(planner_refs(planner, grads), cfg);
  PlannerTrainResult result;
  Logger log(cfg, on_record, result.curve);
  Rng rng(cfg.seed);
  detail::PlannerTrace trace;
  PlannerExpert snapshot = planner;
  long last_good = 0;

  for (std::size_t s = 0; s < cfg.steps; ++s) {
    std::vector<PlannerSample> samples;
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      auto more = source(rng);
      samples.insert(samples.end(), more.begin(), more.end());
    }
    if (samples.empty()) throw DatasetError("train_planner: source produced no samples");
    const std::size_t B = samples.size();
    std::size_t seq = 0;
    for (const PlannerSample& p : samples) {
      if (p.label >= R) throw DatasetError("planner label outside the candidate set");
      if (p.first_step && p.label == stop) throw DatasetError("planner label STOP at the first step");
      seq = std::max(seq, p.tokens.size());
    }
    Tokens packed(B * seq, tokens::kPad);
    std::vector<std::size_t> lengths(B);
    for (std::size_t b = 0; b < B; ++b) {
      std::copy(samples[b].tokens.begin(), samples[b].tokens.end(), packed.begin() + b * seq);
      lengths[b] = samples[b].tokens.size();
    }

    const Tensor scores = detail::planner_forward(planner, backbone, packed, B, seq, lengths, &trace);
    Tensor dscores({B, R});
    double loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t eligible = samples[b].first_step ? stop : R;
      const float* z = scores.data() + b * R;
      const float mx = *std::max_element(z, z + eligible);
      double sum = 0.0;
      for (std::size_t r = 0; r < eligible; ++r) sum += std::exp(static_cast<double>(z[r] - mx));
      const double lse = mx + std::log(sum);
      loss += lse - z[samples[b].label];
      std::size_t best = 0;
      for (std::size_t r = 0; r < eligible; ++r) {
        dscores.at(b, r) = static_cast<float>(std::exp(z[r] - lse) / static_cast<double>(B));
        if (z[r] > z[best]) best = r;
      }
      dscores.at(b, samples[b].label) -= 1.0f / static_cast<float>(B);
      if (best == samples[b].label) ++correct;
    }
    loss /= static_cast<double>(B);
    if (!std::isfinite(loss)) {
      planner = snapshot;
      diverged(s, last_good);
    }
    snapshot = planner;
    last_good = static_cast<long>(s);
    log.add(s, loss, static_cast<double>(correct) / static_cast<double>(B));

    adam.zero_grad();
    detail::planner_backward(planner, backbone, trace, dscores, grads);
    adam.step(cfg.rate_at(s));
  }
  std::fill(planner.uncalibrated.begin(), planner.uncalibrated.end(), 0);
  return result;
}

std::size_t planner_decision(const PlannerExpert& planner, const BackboneModel& backbone,
                             const PlannerSample& sample) {
  const std::size_t len = sample.tokens.size();
  const Tensor scores = detail::planner_forward(planner, backbone, sample.tokens, 1, len,
                                                std::span(&len, 1), nullptr);
  require_finite(scores, "planner scores");
  const std::size_t eligible = sample.first_step ? planner.stop_index() : scores.size();
  return select_expert(scores.values().first(eligible));
}

PlannerEval evaluate_planner(const PlannerExpert& planner, const BackboneModel& backbone,
                             std::span<const CoTask> tasks,
                             const std::function<std::size_t(Domain)>& domain_to_candidate) {
  PlannerEval ev;
  ev.tasks = tasks.size();
  if (tasks.empty()) return ev;
  std::size_t first_ok = 0, path_ok = 0;
  for (const CoTask& task : tasks) {
    const auto samples = planner_samples(task, domain_to_candidate, planner.stop_index());
    bool all = true;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const bool ok = planner_decision(planner, backbone, samples[i]) == samples[i].label;
      if (i == 0 && ok) ++first_ok;
      all = all && ok;
    }
    if (all) ++path_ok;
  }
  ev.selection_accuracy = static_cast<double>(first_ok) / static_cast<double>(tasks.size());
  ev.path_accuracy = static_cast<double>(path_ok) / static_cast<double>(tasks.size());
  return ev;
}

}  // namespace ccoe
