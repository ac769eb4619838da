// SPDX-License-Identifier: Apache-2.0
// Microbenchmarks for the hot paths: gemm, one decode step, gating, and
// adapter materialization (the cost a LoRA-style switch pays).

#include <benchmark/benchmark.h>

#include <map>
#include <vector>

#include "ccoe/bench.hpp"
#include "ccoe/kernels.hpp"
#include "ccoe/model.hpp"
#include "ccoe/registry.hpp"
#include "ccoe/routing.hpp"

namespace {

using namespace ccoe;

void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  std::vector<float> a(n * n), b(n * n), c(n * n);
  for (float& v : a) v = static_cast<float>(rng.normal());
  for (float& v : b) v = static_cast<float>(rng.normal());
  for (auto _ : state) {
    kernels::gemm(a.data(), b.data(), c.data(), n, n, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Gemm)->Arg(64)->Arg(128)->Arg(256);

struct Fixture {
  BackboneModel model;
  ExpertSubnetwork expert;
  static Fixture make() {
    Rng rng(2);
    ModelConfig c;
    auto m = BackboneModel::init(c, rng);
    auto e = ExpertSubnetwork::init(1, "reverse", {0, 2, 4, 6}, c, 128, rng);
    return {std::move(m), std::move(e)};
  }
};

// Decodes `range(0)` tokens after a 16-token prompt with a KV cache.
void BM_DecodeWithExpert(benchmark::State& state) {
  static const Fixture f = Fixture::make();
  const Tokens prompt(16, 'a');
  const auto n = static_cast<std::size_t>(state.range(0));
  KvCache cache;
  for (auto _ : state) {
    auto out = greedy_decode(f.model, &f.expert, prompt, n, &cache, false);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DecodeWithExpert)->Arg(8)->Arg(32)->Unit(benchmark::kMicrosecond);

void BM_ForwardBase(benchmark::State& state) {
  static const Fixture f = Fixture::make();
  const Tokens t(static_cast<std::size_t>(state.range(0)), 'a');
  for (auto _ : state) {
    auto z = forward_base(f.model, t);
    benchmark::DoNotOptimize(z.data());
  }
}
BENCHMARK(BM_ForwardBase)->Arg(16)->Arg(64)->Unit(benchmark::kMicrosecond);

// One gate() call over a batch of 64 queries against a 16 x 32 mapping.
void BM_Gate(benchmark::State& state) {
  Rng rng(3);
  MappingMatrix m;
  std::map<ExpertId, std::vector<std::size_t>> pos;
  for (int t = 0; t < 16; ++t) m.add_domain("t" + std::to_string(t));
  for (ExpertId id = 0; id < 32; ++id) {
    m.add_expert(id);
    pos[id] = {0, 2, 4, 6};
  }
  for (int t = 0; t < 16; ++t)
    for (ExpertId id = 0; id < 32; ++id) m.set("t" + std::to_string(t), id, rng.uniform() < 0.1);
  std::vector<GateQuery> q;
  for (int i = 0; i < 64; ++i) q.push_back({"t" + std::to_string(i % 16), {}});
  for (auto _ : state) {
    auto paths = gate(m, pos, q);
    benchmark::DoNotOptimize(paths.data());
  }
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_Gate);

void BM_MaterializeAdapter(benchmark::State& state) {
  static const Fixture f = Fixture::make();
  Rng rng(4);
  const auto adapter =
      LowRankAdapter::init(f.model.config(), static_cast<std::size_t>(state.range(0)), "reverse", rng, false);
  BackboneParams overlay = f.model.params();
  for (auto _ : state) {
    materialize_adapter(f.model, adapter, overlay);
    benchmark::ClobberMemory();
  }
}
BENCHMARK(BM_MaterializeAdapter)->Arg(4)->Arg(16)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
