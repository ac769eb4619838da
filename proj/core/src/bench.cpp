// SPDX-License-Identifier: Apache-2.0
#include "ccoe/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <list>
#include <map>
#include <sstream>

#include <json.hpp>

#include "ccoe/checkpoint.hpp"
#include "ccoe/errors.hpp"
#include "ccoe/kernels.hpp"

namespace ccoe {

using json = nlohmann::json;

std::string_view strategy_name(InsertionStrategy s) {
  switch (s) {
    case InsertionStrategy::GL:
      return "GL";
    case InsertionStrategy::FB:
      return "FB";
    case InsertionStrategy::FE:
      return "FE";
    case InsertionStrategy::MD:
      return "MD";
    case InsertionStrategy::BE:
      return "BE";
  }
  return "?";
}

std::optional<InsertionStrategy> parse_strategy(std::string_view name) {
  for (InsertionStrategy s : kAllStrategies)
    if (strategy_name(s) == name) return s;
  return std::nullopt;
}

std::vector<std::size_t> strategy_positions(InsertionStrategy s, std::size_t layers,
                                            std::size_t count) {
  if (count > layers) {
    throw ConfigError("cannot place " + std::to_string(count) + " expert layers in a " +
                      std::to_string(layers) + "-layer backbone");
  }
  std::vector<std::size_t> p;
  switch (s) {
    case InsertionStrategy::GL:
      for (std::size_t k = 0; k < count; ++k) p.push_back(k * layers / count);
      break;
    case InsertionStrategy::FE:
      for (std::size_t k = 0; k < count; ++k) p.push_back(k);
      break;
    case InsertionStrategy::BE:
      for (std::size_t k = 0; k < count; ++k) p.push_back(layers - count + k);
      break;
    case InsertionStrategy::MD:
      for (std::size_t k = 0; k < count; ++k) p.push_back((layers - count) / 2 + k);
      break;
    case InsertionStrategy::FB: {
      const std::size_t front = (count + 1) / 2;
      for (std::size_t k = 0; k < front; ++k) p.push_back(k);
      for (std::size_t k = 0; k < count - front; ++k) p.push_back(layers - (count - front) + k);
      break;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Workloads

std::size_t Workload::switch_count() const {
  std::size_t n = 0;
  const std::string* prev = nullptr;
  for (std::size_t r = 0; r < repetitions; ++r) {
    for (const WorkloadItem& it : items) {
      if (!prev || *prev != it.domain) ++n;
      prev = &it.domain;
    }
  }
  return n;
}

Workload round_robin_workload(std::span<const Domain> domains, std::size_t rounds,
                              std::size_t repetitions, std::uint64_t seed) {
  Rng rng(seed);
  Workload w;
  w.repetitions = repetitions;
  for (std::size_t r = 0; r < rounds; ++r)
    for (Domain d : domains)
      w.items.push_back({std::string(domain_name(d)), sample_payload_in(d, Split::eval, rng)});
  return w;
}

Workload load_workload(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw WorkloadError("cannot open workload " + path.string());
  Workload w;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      if (j.contains("repeat")) {
        w.repetitions = j.at("repeat").get<std::size_t>();
      } else if (j.contains("max_new_tokens")) {
        w.max_new_tokens = j.at("max_new_tokens").get<std::size_t>();
      } else {
        w.items.push_back({j.at("domain").get<std::string>(), j.at("prompt").get<std::string>()});
      }
    } catch (const json::exception& e) {
      throw WorkloadError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (w.items.empty()) throw WorkloadError("workload " + path.string() + " has no queries");
  return w;
}

void save_workload(const Workload& w, const std::filesystem::path& path) {
  std::ostringstream out;
  out << json{{"repeat", w.repetitions}}.dump() << '\n';
  out << json{{"max_new_tokens", w.max_new_tokens}}.dump() << '\n';
  for (const WorkloadItem& it : w.items)
    out << json{{"domain", it.domain}, {"prompt", it.prompt}}.dump() << '\n';
  const std::string s = out.str();
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

std::string BenchReport::to_jsonl() const {
  return json{{"system", system},
              {"resident_param_bytes_peak", resident_param_bytes_peak},
              {"activation_bytes_peak", activation_bytes_peak},
              {"tokens_generated", tokens_generated},
              {"switch_count", switch_count},
              {"switch_seconds", switch_seconds},
              {"per_switch_seconds", per_switch_seconds()},
              {"wall_seconds", wall_seconds},
              {"tokens_per_second", tokens_per_second}}
      .dump();
}

std::string format_reports(std::span<const BenchReport> reports) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-10s %14s %10s %9s %12s %10s %10s\n", "system", "param_bytes",
                "tokens", "switches", "switch_ms", "wall_s", "tok/s");
  out += buf;
  for (const BenchReport& r : reports) {
    std::snprintf(buf, sizeof buf, "%-10s %14zu %10zu %9zu %12.4f %10.3f %10.1f\n",
                  r.system.c_str(), r.resident_param_bytes_peak, r.tokens_generated,
                  r.switch_count, r.per_switch_seconds() * 1e3, r.wall_seconds,
                  r.tokens_per_second);
    out += buf;
  }
  return out;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::size_t kv_bytes(const ModelConfig& c) { return 2 * c.layers * c.max_seq * c.d_model * 4; }

/// Runs warmup plus timed repetitions. `select` switches to an item's domain
/// (returning the model/expert to decode with); its time is switching time.
template <class Select>
void drive(const Workload& w, BenchReport& r, Select&& select) {
  KvCache cache;
  const std::size_t total = w.warmup + w.repetitions;
  const std::string* prev = nullptr;
  Clock::time_point start = Clock::now();
  for (std::size_t rep = 0; rep < total; ++rep) {
    const bool timed = rep >= w.warmup;
    if (rep == w.warmup) {
      start = Clock::now();
      prev = nullptr;
    }
    for (const WorkloadItem& it : w.items) {
      const bool change = !prev || *prev != it.domain;
      const auto t0 = Clock::now();
      auto [model, expert] = select(it.domain, change);
      if (timed && change) {
        r.switch_seconds += seconds_since(t0);
        ++r.switch_count;
      }
      prev = &it.domain;
      const Tokens prompt = task_prompt(it.prompt);
      const Tokens out = greedy_decode(*model, expert, prompt, w.max_new_tokens, &cache, false);
      if (timed) r.tokens_generated += out.size();
    }
  }
  r.wall_seconds = seconds_since(start);
  r.tokens_per_second =
      r.wall_seconds > 0.0 ? static_cast<double>(r.tokens_generated) / r.wall_seconds : 0.0;
}

}  // namespace

BenchReport run_ccoe(const ExpertRegistry& registry, const Workload& workload) {
  BenchReport r;
  r.system = "ccoe";
  r.resident_param_bytes_peak = registry.total_bytes();
  r.activation_bytes_peak = kv_bytes(registry.backbone().config());
  for (const WorkloadItem& it : workload.items) {
    if (!registry.mapping().has_domain(it.domain)) {
      throw WorkloadError("no mapping row for domain '" + it.domain + "'");
    }
  }
  const ExpertSubnetwork* current = nullptr;
  drive(workload, r, [&](const std::string& domain, bool change) {
    if (change) {
      const GateQuery q{domain, {}};
      const ExecutionPath path = gate(registry, std::span(&q, 1)).front();
      if (path.steps.empty()) throw WorkloadError("domain '" + domain + "' has no expert");
      current = &registry.expert(path.steps.front().expert);
    }
    return std::pair{&registry.backbone(), current};
  });
  return r;
}

BenchReport run_pure_decode(const ExpertRegistry& registry, const Workload& workload) {
  BenchReport r;
  r.system = "decode";
  r.resident_param_bytes_peak = registry.total_bytes();
  r.activation_bytes_peak = kv_bytes(registry.backbone().config());
  std::map<std::string, const ExpertSubnetwork*> resolved;
  for (const WorkloadItem& it : workload.items) {
    const auto id = registry.expert_for_domain(it.domain);
    if (!id) throw WorkloadError("domain '" + it.domain + "' has no expert");
    resolved[it.domain] = &registry.expert(*id);
  }
  drive(workload, r, [&](const std::string& domain, bool) {
    return std::pair{&registry.backbone(), resolved.at(domain)};
  });
  r.switch_count = 0;
  r.switch_seconds = 0.0;
  return r;
}

BackboneModel standalone_model(const BackboneModel& backbone, const ExpertSubnetwork* expert) {
  BackboneParams p = backbone.params();
  if (expert) {
    expert->validate(backbone.config());
    const std::size_t d = backbone.config().d_model, f = backbone.config().d_ff;
    for (std::size_t i = 0; i < expert->positions.size(); ++i) {
      const FeedForward& src = expert->layers[i];
      const std::size_t w = src.inner_width();
      if (w > f) throw DimensionError("expert sublayer wider than the backbone FFN");
      FeedForward& dst = p.layers[expert->positions[i]].ffn;
      dst.norm_gain = src.norm_gain;
      dst.norm_bias = src.norm_bias;
      dst.b_out = src.b_out;
      dst.w_in.fill(0.0f);
      dst.b_in.fill(0.0f);
      dst.w_out.fill(0.0f);
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < w; ++c) dst.w_in.at(r, c) = src.w_in.at(r, c);
      for (std::size_t c = 0; c < w; ++c) {
        dst.b_in[c] = src.b_in[c];
        for (std::size_t r = 0; r < d; ++r) dst.w_out.at(c, r) = src.w_out.at(c, r);
      }
    }
  }
  return BackboneModel(backbone.config(), std::move(p), true);
}

BenchReport run_mdme_baseline(const std::vector<BackboneModel>& models,
                              const std::vector<std::string>& domains, const Workload& workload,
                              std::size_t resident_budget_bytes,
                              const std::filesystem::path& spill_dir) {
  if (models.size() != domains.size() || models.empty()) {
    throw ConfigError("MDME baseline needs one model per domain");
  }
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < domains.size(); ++i) index[domains[i]] = i;
  for (const WorkloadItem& it : workload.items) {
    if (!index.count(it.domain)) throw WorkloadError("no MDME model for domain '" + it.domain + "'");
  }

  BenchReport r;
  r.system = "mdme";
  r.activation_bytes_peak = kv_bytes(models.front().config());
  std::size_t all = 0;
  for (const BackboneModel& m : models) all += param_bytes(m);

  if (all <= resident_budget_bytes) {
    r.resident_param_bytes_peak = all;
    drive(workload, r, [&](const std::string& domain, bool) {
      return std::pair{&models[index.at(domain)], static_cast<const ExpertSubnetwork*>(nullptr)};
    });
    return r;
  }

  // Constrained: spill every model, keep an LRU set that fits the budget.
  std::filesystem::create_directories(spill_dir);
  std::vector<std::filesystem::path> files;
  for (std::size_t i = 0; i < models.size(); ++i) {
    files.push_back(spill_dir / ("mdme_" + std::to_string(i) + ".ccoe"));
    save_checkpoint(models[i], files.back());
  }
  std::list<std::pair<std::size_t, BackboneModel>> resident;  // front = most recent
  std::size_t resident_bytes = 0;
  drive(workload, r, [&](const std::string& domain, bool) {
    const std::size_t i = index.at(domain);
    auto it = std::find_if(resident.begin(), resident.end(), [&](auto& e) { return e.first == i; });
    if (it != resident.end()) {
      resident.splice(resident.begin(), resident, it);
    } else {
      const std::size_t need = param_bytes(models[i]);
      while (!resident.empty() && resident_bytes + need > resident_budget_bytes) {
        resident_bytes -= param_bytes(resident.back().second);
        resident.pop_back();
      }
      resident.emplace_front(i, load_backbone(files[i]));
      resident_bytes += need;
      r.resident_param_bytes_peak = std::max(r.resident_param_bytes_peak, resident_bytes);
    }
    return std::pair{&resident.front().second, static_cast<const ExpertSubnetwork*>(nullptr)};
  });
  return r;
}

// ---------------------------------------------------------------------------
// Adapters

namespace {

struct Adapted {
  std::size_t rows, cols;
};

std::vector<Adapted> adapted_shapes(const ModelConfig& c) {
  std::vector<Adapted> s;
  for (std::size_t l = 0; l < c.layers; ++l) {
    for (int k = 0; k < 4; ++k) s.push_back({c.d_model, c.d_model});
    s.push_back({c.d_model, c.d_ff});
    s.push_back({c.d_ff, c.d_model});
  }
  return s;
}

template <class Params, class F>
void for_adapted(Params& p, F&& f) {
  std::size_t k = 0;
  for (auto& layer : p.layers) {
    f(k++, layer.attn.w_q);
    f(k++, layer.attn.w_k);
    f(k++, layer.attn.w_v);
    f(k++, layer.attn.w_o);
    f(k++, layer.ffn.w_in);
    f(k++, layer.ffn.w_out);
  }
}

}  // namespace

LowRankAdapter LowRankAdapter::init(const ModelConfig& config, std::size_t rank,
                                    std::string domain, Rng& rng, bool zero_b) {
  if (rank == 0) throw ConfigError("adapter rank must be >= 1");
  LowRankAdapter a;
  a.domain = std::move(domain);
  a.rank = rank;
  for (const Adapted& s : adapted_shapes(config)) {
    Tensor A({s.rows, rank}), B({rank, s.cols});
    for (float& v : A.values()) v = static_cast<float>(rng.normal()) * 0.02f;
    if (!zero_b)
      for (float& v : B.values()) v = static_cast<float>(rng.normal()) * 0.02f;
    a.a.push_back(std::move(A));
    a.b.push_back(std::move(B));
  }
  return a;
}

std::size_t LowRankAdapter::param_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i].size() + b[i].size();
  return n;
}

std::size_t adapter_param_bytes(const ModelConfig& config, std::size_t rank) {
  std::size_t n = 0;
  for (const Adapted& s : adapted_shapes(config)) n += rank * (s.rows + s.cols);
  return n * sizeof(float);
}

std::size_t merged_overlay_bytes(const ModelConfig& config) {
  std::size_t n = 0;
  for (const Adapted& s : adapted_shapes(config)) n += s.rows * s.cols;
  return n * sizeof(float);
}

void materialize_adapter(const BackboneModel& base, const LowRankAdapter& adapter,
                         BackboneParams& overlay) {
  const auto shapes = adapted_shapes(base.config());
  if (adapter.a.size() != shapes.size()) throw DimensionError("adapter does not match backbone");
  std::vector<const Tensor*> src;
  for_adapted(base.params(), [&](std::size_t, const Tensor& w) { src.push_back(&w); });
  for_adapted(overlay, [&](std::size_t k, Tensor& w) {
    const Tensor& A = adapter.a[k];
    const Tensor& B = adapter.b[k];
    // delta = A * B, then overlay = base + delta
    kernels::gemm(A.data(), B.data(), w.data(), shapes[k].rows, adapter.rank, shapes[k].cols,
                  false);
    const float* s = src[k]->data();
    for (std::size_t j = 0; j < w.size(); ++j) w[j] = s[j] + w[j];
  });
}

BenchReport run_adapter_baseline(const BackboneModel& backbone,
                                 const std::vector<LowRankAdapter>& adapters,
                                 const Workload& workload) {
  std::map<std::string, const LowRankAdapter*> by_domain;
  for (const LowRankAdapter& a : adapters) by_domain[a.domain] = &a;
  for (const WorkloadItem& it : workload.items) {
    if (!by_domain.count(it.domain)) throw WorkloadError("no adapter for domain '" + it.domain + "'");
  }
  BenchReport r;
  r.system = "adapter";
  r.resident_param_bytes_peak = param_bytes(backbone) + merged_overlay_bytes(backbone.config());
  for (const LowRankAdapter& a : adapters) r.resident_param_bytes_peak += a.param_count() * 4;
  r.activation_bytes_peak = kv_bytes(backbone.config());

  BackboneModel overlay(backbone.config(), backbone.params(), false);
  drive(workload, r, [&](const std::string& domain, bool change) {
    if (change) materialize_adapter(backbone, *by_domain.at(domain), overlay.mutable_params());
    return std::pair{static_cast<const BackboneModel*>(&overlay),
                     static_cast<const ExpertSubnetwork*>(nullptr)};
  });
  return r;
}

// ---------------------------------------------------------------------------
// Ablation

std::vector<AblationRow> ablate_insertion(const BackboneModel& backbone,
                                          std::span<const InsertionStrategy> strategies,
                                          const AblationConfig& cfg) {
  const ModelConfig& mc = backbone.config();
  const std::vector<Example> eval =
      draw_examples(domain_sampler(cfg.domain, Split::eval), cfg.eval_examples, cfg.init_seed ^ 0xe7a1ULL);
  const double base = exact_match_accuracy(backbone, nullptr, eval);
  std::vector<AblationRow> rows;
  for (InsertionStrategy s : strategies) {
    AblationRow row;
    row.strategy = s;
    row.positions = strategy_positions(s, mc.layers, cfg.expert_layers);
    Rng rng(cfg.init_seed);
    ExpertSubnetwork init = ExpertSubnetwork::init(0, std::string(domain_name(cfg.domain)),
                                                   row.positions, mc, cfg.expert_inner, rng);
    ExpertTrainResult trained =
        train_expert(std::move(init), backbone, domain_sampler(cfg.domain, Split::train), cfg.train);
    row.accuracy = exact_match_accuracy(backbone, &trained.expert, eval);
    row.base_accuracy = base;
    row.gain = row.accuracy - base;
    row.final_loss = trained.curve.empty() ? 0.0 : trained.curve.back().loss;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_ablation(std::span<const AblationRow> rows) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-9s %-20s %9s %9s %9s %10s\n", "strategy", "positions",
                "accuracy", "base", "gain", "final_loss");
  out += buf;
  for (const AblationRow& r : rows) {
    std::string pos = "[";
    for (std::size_t i = 0; i < r.positions.size(); ++i)
      pos += (i ? "," : "") + std::to_string(r.positions[i]);
    pos += "]";
    std::snprintf(buf, sizeof buf, "%-9s %-20s %9.3f %9.3f %+9.3f %10.4f\n",
                  std::string(strategy_name(r.strategy)).c_str(), pos.c_str(), r.accuracy,
                  r.base_accuracy, r.gain, r.final_loss);
    out += buf;
  }
  return out;
}

}  // namespace ccoe
