// SPDX-License-Identifier: Apache-2.0
// ccoe: command-line front end for pretraining, expert lifecycle, routing,
// inference, benchmarks and the insertion ablation.

#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ccoe/bench.hpp"
#include "ccoe/checkpoint.hpp"
#include "ccoe/data.hpp"
#include "ccoe/errors.hpp"
#include "ccoe/manifest.hpp"
#include "ccoe/registry.hpp"
#include "ccoe/routing.hpp"
#include "ccoe/tokenizer.hpp"
#include "ccoe/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace ccoe;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  std::string manifest;
  bool quiet = false;

  fs::path manifest_path() const {
    return manifest.empty() ? data_dir() / "manifest.jsonl" : fs::path(manifest);
  }
};

// Training flags shared by the three training commands. Unset flags leave the
// config-file (or built-in) value alone.
struct TrainFlags {
  std::string config_file;
  std::optional<std::size_t> steps, batch, warmup, log_every;
  std::optional<float> lr, clip, weight_decay;
  bool constant_lr = false;

  void add(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "line-delimited JSON training config");
    cmd->add_option("--steps", steps, "optimizer steps");
    cmd->add_option("--batch", batch, "examples per step");
    cmd->add_option("--lr", lr, "peak learning rate");
    cmd->add_option("--warmup", warmup, "linear warmup steps");
    cmd->add_option("--clip", clip, "global gradient-norm clip (<= 0 disables)");
    cmd->add_option("--weight-decay", weight_decay, "decoupled weight decay");
    cmd->add_option("--log-every", log_every, "loss record interval (0 disables)");
    cmd->add_flag("--constant-lr", constant_lr, "disable cosine decay");
  }

  TrainConfig resolve(std::uint64_t seed, TrainConfig cfg) const {
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in) throw DatasetError("cannot open training config " + config_file);
      std::string line;
      while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
          for (const auto& [k, v] : json::parse(line).items()) {
            if (k == "learning_rate") cfg.learning_rate = v.get<float>();
            else if (k == "batch_size") cfg.batch_size = v.get<std::size_t>();
            else if (k == "steps") cfg.steps = v.get<std::size_t>();
            else if (k == "grad_clip") cfg.grad_clip = v.get<float>();
            else if (k == "seed") cfg.seed = v.get<std::uint64_t>();
            else if (k == "beta1") cfg.beta1 = v.get<float>();
            else if (k == "beta2") cfg.beta2 = v.get<float>();
            else if (k == "eps") cfg.eps = v.get<float>();
            else if (k == "weight_decay") cfg.weight_decay = v.get<float>();
            else if (k == "warmup") cfg.warmup = v.get<std::size_t>();
            else if (k == "cosine_decay") cfg.cosine_decay = v.get<bool>();
            else if (k == "log_every") cfg.log_every = v.get<std::size_t>();
            else throw ConfigError("unknown training config field '" + k + "'");
          }
        } catch (const json::exception& e) {
          throw ConfigError(config_file + ": " + e.what());
        }
      }
    }
    cfg.seed ^= seed;
    if (steps) cfg.steps = *steps;
    if (batch) cfg.batch_size = *batch;
    if (lr) cfg.learning_rate = *lr;
    if (warmup) cfg.warmup = *warmup;
    if (clip) cfg.grad_clip = *clip;
    if (weight_decay) cfg.weight_decay = *weight_decay;
    if (log_every) cfg.log_every = *log_every;
    if (constant_lr) cfg.cosine_decay = false;
    cfg.validate();
    return cfg;
  }
};

void print_curve_header() { std::printf("%8s %10s %9s\n", "step", "loss", "accuracy"); }

/// Prints each record as a table row and appends it to `curve_path`.
LossCallback curve_sink(const fs::path& curve_path, std::ofstream& out) {
  out.open(curve_path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + curve_path.string());
  print_curve_header();
  return [&out](const LossRecord& r) {
    std::printf("%8zu %10.4f %9.3f\n", r.step, r.loss, r.accuracy);
    std::fflush(stdout);
    out << r.to_jsonl() << '\n';
  };
}

Domain require_domain(const std::string& name) {
  const auto d = parse_domain(name);
  if (!d) throw DatasetError("unknown domain '" + name + "'");
  return *d;
}

InsertionStrategy require_strategy(const std::string& name) {
  const auto s = parse_strategy(name);
  if (!s) throw ConfigError("unknown insertion strategy '" + name + "' (GL, FB, FE, MD, BE)");
  return *s;
}

Manifest load_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw DatasetError("manifest " + path.string() + " not found");
  return Manifest::load(path);
}

/// Rebuilds the manifest's expert list and mapping rows from the registry.
void sync_manifest(Manifest& m, const ExpertRegistry& reg) {
  std::vector<ManifestExpert> experts;
  for (ExpertId id : reg.expert_ids()) {
    const ManifestExpert* old = m.find(id);
    experts.push_back({id, reg.expert(id).domain,
                       old ? old->path : "expert_" + std::to_string(id) + ".ccoe",
                       reg.expert(id).positions});
  }
  m.experts = std::move(experts);
  m.mapping.clear();
  for (const std::string& domain : reg.mapping().domains()) {
    std::vector<ExpertId> ids;
    for (ExpertId id : reg.mapping().experts())
      if (reg.mapping().get(domain, id)) ids.push_back(id);
    m.mapping[domain] = ids;
  }
}

void save_planner_if_any(const Manifest& m, const ExpertRegistry& reg, const fs::path& mp) {
  if (m.planner && reg.planner())
    save_checkpoint(*reg.planner(), reg.backbone().config(), resolve(mp, *m.planner));
}

std::string path_string(const ExecutionPath& p, const ExpertRegistry& reg) {
  if (p.steps.empty()) return "(base)";
  std::string s;
  for (std::size_t i = 0; i < p.steps.size(); ++i) {
    const ExpertId id = p.steps[i].expert;
    s += (i ? " -> " : "") + std::to_string(id) + ":" + reg.expert(id).domain + " [";
    for (std::size_t k = 0; k < p.steps[i].positions.size(); ++k)
      s += (k ? "," : "") + std::to_string(p.steps[i].positions[k]);
    s += "]";
  }
  return s;
}

// ---------------------------------------------------------------------------

int cmd_pretrain(const Globals& g, const TrainFlags& tf, const ModelConfig& mc, double abstain,
                 bool force) {
  const fs::path mp = g.manifest_path();
  if (fs::exists(mp) && !force)
    throw ConfigError("manifest " + mp.string() + " exists; pass --force to start over");
  mc.validate();
  TrainConfig def;
  def.steps = 6000;
  def.warmup = 100;
  def.log_every = 250;
  const TrainConfig cfg = tf.resolve(g.seed, def);
  fs::create_directories(mp.parent_path().empty() ? fs::path(".") : mp.parent_path());
  std::ofstream curve;
  const auto sink = curve_sink(resolve(mp, "backbone.curve.jsonl"), curve);
  PretrainResult r = pretrain_backbone(mc, pretraining_sampler(abstain), cfg, sink);
  const fs::path out = resolve(mp, "backbone.ccoe");
  save_checkpoint(r.backbone, out);
  ManifestLock lock(mp);
  Manifest m;
  m.seed = g.seed;
  m.backbone = "backbone.ccoe";
  m.save(mp);
  std::printf("probe loss %.4f -> %.4f\n", r.initial_loss, r.final_loss);
  std::printf("backbone %s  params %zu  digest %s\n", out.string().c_str(),
              r.backbone.param_count(), digest(r.backbone).c_str());
  return 0;
}

struct ExpertFlags {
  std::string domain;
  std::string strategy = "GL";
  std::size_t layers = 4;
  std::size_t inner = 128;
  std::string from;
  std::optional<ExpertId> id;
  std::string out;
  std::size_t eval = 200;
};

int cmd_train_expert(const Globals& g, const TrainFlags& tf, const ExpertFlags& f) {
  const fs::path mp = g.manifest_path();
  const Manifest m = load_manifest(mp);
  const BackboneModel backbone = load_backbone(resolve(mp, m.backbone));
  const ModelConfig& mc = backbone.config();

  ExpertSubnetwork expert;
  if (!f.from.empty()) {
    expert = load_expert(f.from);
    expert.validate(mc);
    if (f.id) expert.id = *f.id;
  } else {
    if (f.domain.empty()) throw ConfigError("--domain is required unless --from is given");
    require_domain(f.domain);
    ExpertId id = 1;
    for (const ManifestExpert& e : m.experts) id = std::max(id, e.id + 1);
    Rng rng(g.seed);
    expert = ExpertSubnetwork::init(f.id.value_or(id), f.domain,
                                    strategy_positions(require_strategy(f.strategy), mc.layers, f.layers),
                                    mc, f.inner, rng);
  }
  const Domain d = require_domain(expert.domain);
  if (!within_budget(param_bytes(expert), param_bytes(backbone)))
    throw BudgetError("expert holds more than 15% of the backbone's parameter bytes");

  TrainConfig def;
  def.steps = 1500;
  def.warmup = 50;
  def.log_every = 100;
  const TrainConfig cfg = tf.resolve(g.seed, def);
  const fs::path out =
      f.out.empty() ? resolve(mp, "trained_" + std::to_string(expert.id) + ".ccoe") : fs::path(f.out);
  std::ofstream curve;
  const auto sink = curve_sink(fs::path(out).replace_extension(".curve.jsonl"), curve);
  ExpertTrainResult r = train_expert(std::move(expert), backbone, domain_sampler(d, Split::train), cfg, sink);
  save_checkpoint(r.expert, mc, out);
  const auto ev = draw_examples(domain_sampler(d, Split::eval), f.eval, g.seed ^ 0xe7a1ULL);
  std::printf("expert %u (%s) positions %zu layers  params %zu  digest %s\n", r.expert.id,
              r.expert.domain.c_str(), r.expert.positions.size(), r.expert.param_count(),
              digest(r.expert).c_str());
  std::printf("held-out exact match %.3f (base %.3f) on %zu examples\n",
              exact_match_accuracy(backbone, &r.expert, ev), exact_match_accuracy(backbone, nullptr, ev),
              ev.size());
  std::printf("wrote %s\n", out.string().c_str());
  return 0;
}

struct PlannerFlags {
  std::string strategy = "GL";
  std::size_t layers = 2;
  std::size_t inner = 64;
  std::size_t eval = 200;
};

int cmd_train_planner(const Globals& g, const TrainFlags& tf, const PlannerFlags& f) {
  const fs::path mp = g.manifest_path();
  ManifestLock lock(mp);
  Manifest m = load_manifest(mp);
  ExpertRegistry reg = build_registry(m, mp);
  const ModelConfig& mc = reg.backbone().config();
  const std::vector<ExpertId> ids = reg.expert_ids();
  if (ids.empty()) throw ConfigError("the registry holds no experts to plan over");

  std::map<Domain, std::size_t> cand;
  for (Domain d : kAllDomains) {
    const auto id = reg.expert_for_domain(std::string(domain_name(d)));
    if (!id) continue;
    cand[d] = static_cast<std::size_t>(std::find(ids.begin(), ids.end(), *id) - ids.begin());
  }
  const auto to_cand = [&](Domain d) {
    const auto it = cand.find(d);
    if (it == cand.end()) throw DatasetError("no expert for domain " + std::string(domain_name(d)));
    return it->second;
  };
  const auto covered = [&](const CoTask& t) {
    for (Domain d : t.order)
      if (!cand.count(d)) return false;
    return true;
  };
  const auto draw = [&](Rng& r, Split split) {
    for (;;) {
      CoTask t = sample_cotask(r, split, true, true);
      if (covered(t)) return t;
    }
  };
  const PlannerSampleSource source = [&](Rng& r) {
    return planner_samples(draw(r, Split::train), to_cand, ids.size());
  };

  Rng rng(g.seed);
  PlannerExpert planner = PlannerExpert::init(
      strategy_positions(require_strategy(f.strategy), mc.layers, f.layers), f.inner, ids,
      reg.backbone(), rng);
  TrainConfig def;
  def.steps = 1500;
  def.learning_rate = 3e-3f;
  def.warmup = 50;
  def.log_every = 100;
  const TrainConfig cfg = tf.resolve(g.seed, def);
  const fs::path out = resolve(mp, m.planner.value_or("planner.ccoe"));
  std::ofstream curve;
  const auto sink = curve_sink(fs::path(out).replace_extension(".curve.jsonl"), curve);
  train_planner(planner, reg.backbone(), source, cfg, sink);

  Rng er(g.seed ^ 0x9e37ULL);
  std::vector<CoTask> tasks;
  for (std::size_t i = 0; i < f.eval; ++i) tasks.push_back(draw(er, Split::eval));
  const PlannerEval ev = evaluate_planner(planner, reg.backbone(), tasks, to_cand);
  reg.set_planner(planner);
  save_checkpoint(planner, mc, out);
  m.planner = fs::relative(out, mp.parent_path().empty() ? fs::path(".") : mp.parent_path()).string();
  m.save(mp);
  std::printf("planner over %zu experts  digest %s\n", ids.size(), digest(planner).c_str());
  std::printf("held-out selection %.3f  path %.3f on %zu tasks\n", ev.selection_accuracy,
              ev.path_accuracy, ev.tasks);
  return 0;
}

int cmd_push(const Globals& g, const std::string& ckpt, std::optional<ExpertId> id) {
  const fs::path mp = g.manifest_path();
  ManifestLock lock(mp);
  Manifest m = load_manifest(mp);
  ExpertRegistry reg = build_registry(m, mp);
  ExpertSubnetwork expert = load_expert(ckpt);
  if (id) expert.id = *id;
  const ExpertId eid = expert.id;
  reg.push(expert);  // validates before anything is written
  const std::string rel = "expert_" + std::to_string(eid) + ".ccoe";
  save_checkpoint(reg.expert(eid), reg.backbone().config(), resolve(mp, rel));
  if (ManifestExpert* old = const_cast<ManifestExpert*>(m.find(eid))) old->path = rel;
  sync_manifest(m, reg);
  save_planner_if_any(m, reg, mp);
  m.save(mp);
  std::printf("pushed expert %u (%s)  digest %s\n", eid, reg.expert(eid).domain.c_str(),
              digest(reg.expert(eid)).c_str());
  return 0;
}

int cmd_pop(const Globals& g, ExpertId id, bool copy, bool remove, const std::string& out) {
  if (copy == remove) throw CLI::ValidationError("pop", "exactly one of --copy or --remove");
  const fs::path mp = g.manifest_path();
  ManifestLock lock(mp);
  Manifest m = load_manifest(mp);
  ExpertRegistry reg = build_registry(m, mp);
  if (copy) {
    if (out.empty()) throw CLI::ValidationError("pop", "--copy needs --out");
    const ExpertSubnetwork e = reg.pop_copy(id);
    save_checkpoint(e, reg.backbone().config(), out);
    std::printf("copied expert %u to %s  digest %s\n", id, out.c_str(), digest(e).c_str());
    return 0;
  }
  const std::size_t bytes = param_bytes(reg.expert(id));
  reg.pop_remove(id);
  sync_manifest(m, reg);
  save_planner_if_any(m, reg, mp);
  m.save(mp);
  std::printf("removed expert %u (%zu bytes)\n", id, bytes);
  return 0;
}

int cmd_report_memory(const Globals& g, std::size_t rank, bool as_json) {
  const fs::path mp = g.manifest_path();
  const ExpertRegistry reg = build_registry(load_manifest(mp), mp);
  const MemoryReport r = reg.memory_report(rank);
  if (as_json) {
    for (const LedgerEntry& e : r.components)
      std::cout << json{{"component", e.component}, {"bytes", e.bytes}}.dump() << '\n';
    std::cout << json{{"total_bytes", r.total_bytes},
                      {"backbone_bytes", r.backbone_bytes},
                      {"expert_count", r.expert_count},
                      {"mdme_bytes", r.mdme_bytes},
                      {"reduction_vs_mdme", r.reduction_vs_mdme},
                      {"adapter_rank", r.adapter_rank},
                      {"adapter_bytes", r.adapter_bytes}}
                     .dump()
              << '\n';
    return 0;
  }
  std::printf("%-14s %14s %9s\n", "component", "bytes", "vs base");
  for (const LedgerEntry& e : r.components)
    std::printf("%-14s %14zu %8.2f%%\n", e.component.c_str(), e.bytes,
                100.0 * static_cast<double>(e.bytes) / static_cast<double>(r.backbone_bytes));
  std::printf("%-14s %14zu\n", "total", r.total_bytes);
  std::printf("\n%-24s %14s\n", "deployment", "param bytes");
  std::printf("%-24s %14zu\n", "ccoe", r.total_bytes);
  std::printf("%-24s %14zu\n", ("mdme x" + std::to_string(r.expert_count)).c_str(), r.mdme_bytes);
  std::printf("%-24s %14zu\n", ("adapters rank " + std::to_string(rank)).c_str(), r.adapter_bytes);
  std::printf("reduction vs mdme: %.2f%%\n", 100.0 * r.reduction_vs_mdme);
  return 0;
}

int cmd_infer(const Globals& g, const std::string& domain, const std::string& prompt,
              std::size_t max_new) {
  const fs::path mp = g.manifest_path();
  const ExpertRegistry reg = build_registry(load_manifest(mp), mp);
  const Tokens tokens = task_prompt(prompt);
  const GateQuery q{domain, tokens};
  const ExecutionPath path = gate(reg, std::span(&q, 1)).front();
  if (!g.quiet) std::fprintf(stderr, "path: %s\n", path_string(path, reg).c_str());
  for (const GatedAnswer& a : answer(reg, path, tokens, max_new)) {
    if (path.steps.size() > 1) std::printf("%u: ", *a.expert);
    std::printf("%s\n", decode_bytes(a.output).c_str());
  }
  return 0;
}

int cmd_route(const Globals& g, const std::string& task, std::size_t max_steps, std::size_t max_new) {
  const fs::path mp = g.manifest_path();
  const ExpertRegistry reg = build_registry(load_manifest(mp), mp);
  if (!reg.planner()) throw LookupError("the manifest names no planner");
  const auto colon = task.find(':');
  if (colon == std::string::npos)
    throw DatasetError("composite task must look like 'rev>upc:payload'");
  const PlanResult r = execute_plan(reg, task, task.substr(colon + 1), max_steps, max_new);
  std::printf("path: %s%s\n", path_string(r.path, reg).c_str(), r.path.truncated ? " (truncated)" : "");
  for (std::size_t i = 0; i < r.step_outputs.size(); ++i)
    std::printf("step %zu: %s\n", i + 1, decode_bytes(r.step_outputs[i]).c_str());
  std::printf("%s\n", decode_bytes(r.output).c_str());
  return 0;
}

struct BenchFlags {
  std::string workload;
  std::optional<std::size_t> repeat;
  std::size_t rounds = 4;
  std::optional<std::size_t> max_new;
  std::size_t rank = 4;
  std::optional<std::size_t> mdme_budget;
  std::string jsonl;
};

int cmd_bench(const Globals& g, const BenchFlags& f) {
  const fs::path mp = g.manifest_path();
  const ExpertRegistry reg = build_registry(load_manifest(mp), mp);
  Workload w;
  if (!f.workload.empty()) {
    w = load_workload(f.workload);
  } else {
    std::vector<Domain> ds;
    for (Domain d : kAllDomains)
      if (reg.expert_for_domain(std::string(domain_name(d)))) ds.push_back(d);
    if (ds.empty()) throw WorkloadError("no domain has an expert; pass --workload");
    w = round_robin_workload(ds, f.rounds, 1, g.seed);
  }
  if (f.repeat) w.repetitions = *f.repeat;
  if (f.max_new) w.max_new_tokens = *f.max_new;

  std::vector<std::string> domains;
  for (const WorkloadItem& it : w.items)
    if (std::find(domains.begin(), domains.end(), it.domain) == domains.end()) domains.push_back(it.domain);
  std::vector<BackboneModel> models;
  std::vector<LowRankAdapter> adapters;
  Rng rng(g.seed);
  for (const std::string& d : domains) {
    const auto id = reg.expert_for_domain(d);
    models.push_back(standalone_model(reg.backbone(), id ? &reg.expert(*id) : nullptr));
    adapters.push_back(LowRankAdapter::init(reg.backbone().config(), f.rank, d, rng, false));
  }
  const std::size_t budget = f.mdme_budget.value_or(reg.total_bytes());
  const fs::path spill = fs::temp_directory_path() / ("ccoe_mdme_spill_" + std::to_string(::getpid()));

  std::vector<BenchReport> reports;
  reports.push_back(run_ccoe(reg, w));
  reports.push_back(run_pure_decode(reg, w));
  reports.push_back(run_adapter_baseline(reg.backbone(), adapters, w));
  try {
    reports.push_back(run_mdme_baseline(models, domains, w, budget, spill));
  } catch (...) {
    fs::remove_all(spill);
    throw;
  }
  fs::remove_all(spill);

  std::printf("%zu queries x %zu repetitions, %zu new tokens each, %zu switches\n\n",
              w.items.size(), w.repetitions, w.max_new_tokens, w.switch_count());
  std::printf("%s", format_reports(reports).c_str());
  const MemoryReport mem = reg.memory_report(f.rank);
  std::printf("\nparam bytes ccoe/mdme (all resident): %.4f\n",
              mem.mdme_bytes ? static_cast<double>(mem.total_bytes) / static_cast<double>(mem.mdme_bytes) : 0.0);
  if (!f.jsonl.empty()) {
    std::ofstream out(f.jsonl, std::ios::trunc);
    for (const BenchReport& r : reports) out << r.to_jsonl() << '\n';
  }
  return 0;
}

int cmd_ablate(const Globals& g, const TrainFlags& tf, const std::string& domain, std::size_t layers,
               std::size_t inner, std::size_t eval) {
  const fs::path mp = g.manifest_path();
  const Manifest m = load_manifest(mp);
  const BackboneModel backbone = load_backbone(resolve(mp, m.backbone));
  AblationConfig cfg;
  cfg.domain = require_domain(domain);
  cfg.expert_layers = layers;
  cfg.expert_inner = inner;
  cfg.eval_examples = eval;
  cfg.init_seed = g.seed;
  TrainConfig def;
  def.steps = 1000;
  def.warmup = 50;
  def.log_every = 50;
  cfg.train = tf.resolve(g.seed, def);
  const auto rows = ablate_insertion(backbone, kAllStrategies, cfg);
  std::printf("%s", format_ablation(rows).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ccoe: shared-backbone expert composition"};
  app.require_subcommand(1);
  app.footer(
      "Exit codes: 0 success, 1 usage, 2 data/config, 3 numeric divergence, 4 corruption.\n"
      "The manifest defaults to $CCOE_DATA_DIR/manifest.jsonl (./ccoe-data when unset).\n"
      "Loss records: {\"step\",\"loss\",\"accuracy\"}. Bench records: {\"system\",\n"
      "\"resident_param_bytes_peak\",\"activation_bytes_peak\",\"tokens_generated\",\n"
      "\"switch_count\",\"switch_seconds\",\"per_switch_seconds\",\"wall_seconds\",\"tokens_per_second\"}.");
  Globals g;
  app.add_option("--seed", g.seed, "seed threaded to every generator")->capture_default_str();
  app.add_option("--manifest", g.manifest, "registry manifest path");
  app.add_flag("-q,--quiet", g.quiet, "suppress diagnostics on stderr");

  TrainFlags pre_tf, exp_tf, plan_tf, abl_tf;
  ModelConfig mc;
  double abstain = 0.1;
  bool force = false;
  auto* pre = app.add_subcommand("pretrain", "train a backbone and start a fresh manifest");
  pre_tf.add(pre);
  pre->add_option("--layers", mc.layers)->capture_default_str();
  pre->add_option("--d-model", mc.d_model)->capture_default_str();
  pre->add_option("--heads", mc.n_heads)->capture_default_str();
  pre->add_option("--d-ff", mc.d_ff)->capture_default_str();
  pre->add_option("--max-seq", mc.max_seq)->capture_default_str();
  pre->add_option("--abstain", abstain, "share of untagged prompts answered with '?'")->capture_default_str();
  pre->add_flag("--force", force, "overwrite an existing manifest");

  ExpertFlags ef;
  auto* te = app.add_subcommand("train-expert", "train one expert against the frozen backbone");
  exp_tf.add(te);
  te->add_option("--domain", ef.domain, "copy, reverse, sort_digits, mod_add, uppercase");
  te->add_option("--strategy", ef.strategy, "GL, FB, FE, MD, BE")->capture_default_str();
  te->add_option("--layers", ef.layers, "expert sublayers")->capture_default_str();
  te->add_option("--inner", ef.inner, "expert FFN width")->capture_default_str();
  te->add_option("--from", ef.from, "continue from an expert checkpoint");
  te->add_option("--id", ef.id, "expert id (default: next free id)");
  te->add_option("--out", ef.out, "checkpoint to write");
  te->add_option("--eval", ef.eval, "held-out examples to score")->capture_default_str();

  PlannerFlags pf;
  auto* tp = app.add_subcommand("train-planner", "train the planner over every registered expert");
  plan_tf.add(tp);
  tp->add_option("--strategy", pf.strategy)->capture_default_str();
  tp->add_option("--layers", pf.layers)->capture_default_str();
  tp->add_option("--inner", pf.inner)->capture_default_str();
  tp->add_option("--eval", pf.eval, "held-out composite tasks")->capture_default_str();

  std::string push_ckpt;
  std::optional<ExpertId> push_id;
  auto* push = app.add_subcommand("push", "add or replace an expert");
  push->add_option("checkpoint", push_ckpt)->required();
  push->add_option("--id", push_id, "register under this id");

  ExpertId pop_id = 0;
  bool pop_copy = false, pop_remove = false;
  std::string pop_out;
  auto* pop = app.add_subcommand("pop", "copy an expert out, or remove it");
  pop->add_option("id", pop_id)->required();
  pop->add_flag("--copy", pop_copy);
  pop->add_flag("--remove", pop_remove);
  pop->add_option("--out", pop_out, "checkpoint path for --copy");

  std::size_t mem_rank = 4;
  bool mem_json = false;
  auto* mem = app.add_subcommand("report-memory", "parameter-byte ledger and deployment comparison");
  mem->add_option("--rank", mem_rank, "adapter rank for the comparison")->capture_default_str();
  mem->add_flag("--jsonl", mem_json, "machine-readable records");

  std::string inf_domain, inf_prompt;
  std::size_t inf_max = 16;
  auto* inf = app.add_subcommand("infer", "answer a prompt through rule-based gating");
  inf->add_option("--domain", inf_domain)->required();
  inf->add_option("--prompt", inf_prompt)->required();
  inf->add_option("--max-new", inf_max)->capture_default_str();

  std::string route_task;
  bool route_planner = false;
  std::size_t route_steps = 3, route_max = 16;
  auto* route = app.add_subcommand("route", "plan and execute a composite task");
  route->add_flag("--planner", route_planner, "route with the planner");
  route->add_option("--task", route_task, "e.g. 'rev>upc:abcde'")->required();
  route->add_option("--max-steps", route_steps)->capture_default_str();
  route->add_option("--max-new", route_max)->capture_default_str();

  BenchFlags bf;
  auto* bench = app.add_subcommand("bench", "ccoe vs adapters vs budget-constrained MDME");
  bench->add_option("--workload", bf.workload, "line-delimited workload file");
  bench->add_option("--repeat", bf.repeat, "timed repetitions");
  bench->add_option("--rounds", bf.rounds, "rounds of the generated round-robin workload")->capture_default_str();
  bench->add_option("--max-new", bf.max_new, "tokens generated per query");
  bench->add_option("--rank", bf.rank, "adapter rank")->capture_default_str();
  bench->add_option("--mdme-budget", bf.mdme_budget, "MDME resident bytes (default: ccoe total)");
  bench->add_option("--jsonl", bf.jsonl, "also write machine records here");

  std::string abl_domain = "reverse";
  std::size_t abl_layers = 4, abl_inner = 128, abl_eval = 200;
  auto* abl = app.add_subcommand("ablate", "insertion-strategy table");
  abl_tf.add(abl);
  abl->add_option("--domain", abl_domain)->capture_default_str();
  abl->add_option("--layers", abl_layers)->capture_default_str();
  abl->add_option("--inner", abl_inner)->capture_default_str();
  abl->add_option("--eval", abl_eval)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_code(ErrorCategory::usage);
  }

  try {
    if (*pre) return cmd_pretrain(g, pre_tf, mc, abstain, force);
    if (*te) return cmd_train_expert(g, exp_tf, ef);
    if (*tp) return cmd_train_planner(g, plan_tf, pf);
    if (*push) return cmd_push(g, push_ckpt, push_id);
    if (*pop) return cmd_pop(g, pop_id, pop_copy, pop_remove, pop_out);
    if (*mem) return cmd_report_memory(g, mem_rank, mem_json);
    if (*inf) return cmd_infer(g, inf_domain, inf_prompt, inf_max);
    if (*route) {
      if (!route_planner) throw CLI::ValidationError("route", "only --planner routing is available");
      return cmd_route(g, route_task, route_steps, route_max);
    }
    if (*bench) return cmd_bench(g, bf);
    if (*abl) return cmd_ablate(g, abl_tf, abl_domain, abl_layers, abl_inner, abl_eval);
  } catch (const CLI::ValidationError& e) {
    std::fprintf(stderr, "ccoe: %s\n", e.what());
    return exit_code(ErrorCategory::usage);
  } catch (const Error& e) {
    std::fprintf(stderr, "ccoe: %s\n", e.what());
    return exit_code(e.category());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "ccoe: %s\n", e.what());
    return exit_code(ErrorCategory::config);
  }
  return exit_code(ErrorCategory::usage);
}
