// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>

#include "ccoe/data.hpp"
#include "ccoe/errors.hpp"
#include "ccoe/registry.hpp"
#include "ccoe/routing.hpp"
#include "oracle/reference.hpp"

namespace ccoe {
namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.layers = 3;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 12;
  c.max_seq = 48;
  return c;
}

BackboneModel noisy_backbone(const ModelConfig& c, Rng& rng) {
  auto m = BackboneModel::init(c, rng);
  BackboneParams::visit(m.mutable_params(), [&](const std::string&, Tensor& t) {
    for (float& v : t.values()) v += static_cast<float>(rng.normal() * 0.3);
  });
  return m;
}

template <class T>
void jitter(T& obj, Rng& rng, double scale) {
  T::visit(obj, [&](const std::string&, Tensor& t) {
    for (float& v : t.values()) v += static_cast<float>(rng.normal() * scale);
  });
}

TEST(MappingMatrix, ColumnsStaySortedAndRowsAligned) {
  MappingMatrix m;
  m.add_domain("a");
  m.add_expert(7);
  m.add_expert(2);
  m.add_domain("b");
  m.add_expert(5);
  EXPECT_EQ(m.experts(), (std::vector<ExpertId>{2, 5, 7}));
  m.set("a", 5, true);
  m.set("b", 7, true);
  EXPECT_EQ(m.row("a"), (std::vector<std::uint8_t>{0, 1, 0}));
  EXPECT_EQ(m.row("b"), (std::vector<std::uint8_t>{0, 0, 1}));
  m.remove_expert(5);
  EXPECT_EQ(m.row("a"), (std::vector<std::uint8_t>{0, 0}));
  EXPECT_FALSE(m.has_expert(5));
  m.remove_expert(99);  // ignored
  EXPECT_EQ(m.domains(), (std::vector<std::string>{"a", "b"}));
}

TEST(MappingMatrix, UnknownNamesRaise) {
  MappingMatrix m;
  m.add_domain("a");
  m.add_expert(1);
  EXPECT_THROW(m.set("zzz", 1, true), GatingError);
  EXPECT_THROW(m.set("a", 2, true), LookupError);
  EXPECT_THROW(m.row("zzz"), GatingError);
}

// Brute force: scan every id in range and keep the mapped ones in order.
std::vector<ExecutionPath> scan(const MappingMatrix& m, const std::map<ExpertId, std::vector<std::size_t>>& pos,
                                const std::vector<GateQuery>& queries, ExpertId max_id) {
  std::vector<ExecutionPath> out;
  for (const auto& q : queries) {
    ExecutionPath p;
    for (ExpertId id = 0; id <= max_id; ++id)
      if (m.has_expert(id) && m.get(q.domain, id)) p.steps.push_back({id, pos.at(id)});
    out.push_back(p);
  }
  return out;
}

TEST(Gating, MatchesBruteForceScanOnRandomMatrices) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    MappingMatrix m;
    std::map<ExpertId, std::vector<std::size_t>> pos;
    const std::vector<std::string> tags{"t0", "t1", "t2", "t3"};
    for (const auto& t : tags) m.add_domain(t);
    const auto n = rng.range(0, 6);
    for (std::int64_t i = 0; i < n; ++i) {
      const auto id = static_cast<ExpertId>(rng.below(20));
      if (m.has_expert(id)) continue;
      m.add_expert(id);
      pos[id] = {static_cast<std::size_t>(rng.below(8))};
    }
    for (const auto& t : tags)
      for (ExpertId id : m.experts()) m.set(t, id, rng.below(3) == 0);
    std::vector<GateQuery> queries;
    for (int i = 0; i < 6; ++i) queries.push_back({tags[rng.below(tags.size())], {}});
    ASSERT_EQ(gate(m, pos, queries), scan(m, pos, queries, 20)) << "seed " << seed;
  }
}

TEST(Gating, EmptyRowMeansBaseModelAndBadInputsRaise) {
  MappingMatrix m;
  m.add_domain("x");
  m.add_expert(3);
  const std::map<ExpertId, std::vector<std::size_t>> pos{{3, {1}}};
  const std::vector<GateQuery> ok{{"x", {}}};
  const auto paths = gate(m, pos, ok);
  ASSERT_EQ(paths.size(), 1u);
  EXPECT_TRUE(paths[0].steps.empty());
  EXPECT_EQ(paths[0].origin, ExecutionPath::Origin::gating);
  const std::vector<GateQuery> bad{{"nope", {}}};
  EXPECT_THROW(gate(m, pos, bad), GatingError);
  m.set("x", 3, true);
  EXPECT_THROW(gate(m, {}, ok), LookupError);
}

TEST(SelectExpert, ArgmaxWithLowestIndexOnTies) {
  EXPECT_EQ(select_expert(std::vector<float>{0.1f, 0.9f, 0.9f}), 1u);
  EXPECT_EQ(select_expert(std::vector<float>{-1.0f}), 0u);
  EXPECT_THROW(select_expert(std::vector<float>{}), RoutingError);
}

TEST(SelectExpert, PicksAMaximumOnRandomScores) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    std::vector<float> s(1 + rng.below(10));
    for (float& v : s) v = static_cast<float>(rng.below(4));  // many ties
    const std::size_t k = select_expert(s);
    const float best = *std::max_element(s.begin(), s.end());
    ASSERT_EQ(s[k], best);
    for (std::size_t i = 0; i < k; ++i) ASSERT_LT(s[i], best);
  }
}

TEST(Planner, InputLayout) {
  Subtask st{2, encode_bytes("rev>upc:ab"), encode_bytes("ba")};
  const Tokens t = planner_input(st);
  EXPECT_EQ(t.front(), tokens::kBos);
  EXPECT_EQ(decode_bytes(t), "2ba|rev>upc:ab");
  st.index = 0;
  EXPECT_THROW(planner_input(st), RoutingError);
}

TEST(Planner, InitShapesAndIndicatorRows) {
  const ModelConfig c = tiny_config();
  Rng rng(3);
  const BackboneModel m = noisy_backbone(c, rng);
  const auto p = PlannerExpert::init({0, 2}, 6, {4, 9}, m, rng);
  EXPECT_EQ(p.indicators.dim(0), 3u);
  EXPECT_EQ(p.stop_index(), 2u);
  EXPECT_EQ(p.candidate_index(9), 1u);
  EXPECT_FALSE(p.candidate_index(5).has_value());
  // Rows sit near the indicator-token embedding.
  const float* emb = m.params().token_embedding.data() + tokens::kIndicator * c.d_model;
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < c.d_model; ++j) EXPECT_NEAR(p.indicators.at(r, j), emb[j], 0.15);
  EXPECT_EQ(p.scorer.f_b[0], 0.0f);
  EXPECT_EQ(p.uncalibrated, (std::vector<std::uint8_t>{1, 1}));
}

TEST(Planner, AddAndRemoveCandidateKeepStopLast) {
  const ModelConfig c = tiny_config();
  Rng rng(4);
  const BackboneModel m = noisy_backbone(c, rng);
  auto p = PlannerExpert::init({1}, 6, {4}, m, rng);
  const Tensor stop_row({c.d_model}, std::vector<float>(p.indicators.row(1).begin(), p.indicators.row(1).end()));
  const Tensor row4({c.d_model}, std::vector<float>(p.indicators.row(0).begin(), p.indicators.row(0).end()));
  p.uncalibrated[0] = 0;
  p.add_candidate(8, m, rng);
  EXPECT_EQ(p.candidates, (std::vector<ExpertId>{4, 8}));
  EXPECT_EQ(p.uncalibrated, (std::vector<std::uint8_t>{0, 1}));
  for (std::size_t j = 0; j < c.d_model; ++j) {
    EXPECT_EQ(p.indicators.at(2, j), stop_row[j]);
    EXPECT_EQ(p.indicators.at(0, j), row4[j]);
  }
  p.remove_candidate(4);
  EXPECT_EQ(p.candidates, (std::vector<ExpertId>{8}));
  for (std::size_t j = 0; j < c.d_model; ++j) EXPECT_EQ(p.indicators.at(1, j), stop_row[j]);
  EXPECT_THROW(p.remove_candidate(4), LookupError);
}

TEST(Planner, ScoresMatchCrossAttentionOracle) {
  const ModelConfig c = tiny_config();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed + 10);
    const BackboneModel m = noisy_backbone(c, rng);
    auto p = PlannerExpert::init({0, 2}, 6, {1, 2, 3}, m, rng);
    jitter(p, rng, 0.3);
    const Subtask st{1 + rng.below(3), encode_bytes("cpy>rev:abc"), encode_bytes("xy")};
    const auto got = plan_scores(p, m, st);
    const auto params = oracle::collect(m, nullptr, &p);
    const auto ref = oracle::planner_scores(params, c, oracle::ffn_sources(c, {0, 2}, "pl.expert."),
                                            planner_input(st));
    ASSERT_EQ(got.size(), 4u);
    for (std::size_t r = 0; r < 4; ++r) ASSERT_NEAR(got[r], ref[r], 1e-5) << "seed " << seed;
  }
}

// Builds a registry with three random experts and a random planner over them.
ExpertRegistry planned_registry(std::uint64_t seed, const ModelConfig& c) {
  Rng rng(seed);
  ExpertRegistry reg(noisy_backbone(c, rng), seed);
  for (ExpertId id : {1, 2, 3}) {
    auto e = ExpertSubnetwork::init(id, "d" + std::to_string(id), {static_cast<std::size_t>(id - 1)}, c, 4, rng);
    jitter(e, rng, 0.5);
    reg.push(std::move(e));
  }
  auto p = PlannerExpert::init({1}, 4, {1, 2, 3}, reg.backbone(), rng);
  jitter(p, rng, 1.0);
  reg.set_planner(std::move(p));
  return reg;
}

TEST(ExecutePlan, FollowsPlannerDecisionsStepByStep) {
  const ModelConfig c = tiny_config();
  std::size_t stopped_early = 0, multi_step = 0;
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const ExpertRegistry reg = planned_registry(seed, c);
    const PlannerExpert& p = *reg.planner();
    const std::string instr = "rev>cpy:abc", payload = "abc";
    const std::size_t max_steps = 3, max_new = 4;
    const PlanResult got = execute_plan(reg, instr, payload, max_steps, max_new);

    // Replay with the public pieces.
    ExecutionPath path;
    path.origin = ExecutionPath::Origin::planning;
    std::vector<Tokens> outs;
    Tokens carried;
    for (std::size_t t = 1; t <= max_steps; ++t) {
      const auto h = plan_scores(p, reg.backbone(), {t, encode_bytes(instr), carried});
      const std::size_t k = select_expert(std::span(h).first(t == 1 ? p.stop_index() : h.size()));
      if (k == p.stop_index()) break;
      const ExpertId id = p.candidates[k];
      Tokens prompt{tokens::kBos, kNoTag};
      prompt.insert(prompt.end(), carried.begin(), carried.end());
      if (t == 1)
        for (char ch : payload) prompt.push_back(static_cast<unsigned char>(ch));
      prompt.push_back('=');
      carried = greedy_decode(reg.backbone(), &reg.expert(id), prompt, max_new, nullptr);
      path.steps.push_back({id, reg.expert(id).positions});
      outs.push_back(carried);
    }
    ASSERT_EQ(got.path, path) << "seed " << seed;
    ASSERT_EQ(got.step_outputs, outs) << "seed " << seed;
    ASSERT_EQ(got.output, outs.empty() ? Tokens{} : outs.back());
    ASSERT_GE(got.path.steps.size(), 1u);
    ASSERT_FALSE(got.path.truncated);
    stopped_early += got.path.steps.size() < max_steps;
    multi_step += got.path.steps.size() > 1;
  }
  // The seeds exercise both the STOP branch and multi-step chains.
  EXPECT_GT(stopped_early, 0u);
  EXPECT_GT(multi_step, 0u);
}

TEST(ExecutePlan, OverlongContextIsTrimmedAndFlagged) {
  ModelConfig c = tiny_config();
  c.max_seq = 24;
  std::size_t flagged = 0;
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const ExpertRegistry reg = planned_registry(seed, c);
    const PlanResult r = execute_plan(reg, "cpy>cpy:abcde", "abcde", 2, 16);
    if (r.path.steps.size() > 1 && r.step_outputs[0].size() > 1) {
      EXPECT_TRUE(r.path.truncated) << "seed " << seed;
    }
    flagged += r.path.truncated;
  }
  EXPECT_GT(flagged, 0u);
}

TEST(ExecutePlan, Errors) {
  const ModelConfig c = tiny_config();
  Rng rng(5);
  ExpertRegistry reg(noisy_backbone(c, rng));
  EXPECT_THROW(execute_plan(reg, "x", "y", 2), RoutingError);
  const ExpertRegistry full = planned_registry(6, c);
  EXPECT_THROW(execute_plan(full, "x", "y", 0), ConfigError);
}

TEST(GateRegistry, UsesRegistryMappingAndPositions) {
  const ModelConfig c = tiny_config();
  const ExpertRegistry reg = planned_registry(7, c);
  const std::vector<GateQuery> q{{"d2", {}}, {"d3", {}}};
  const auto paths = gate(reg, q);
  ASSERT_EQ(paths.size(), 2u);
  ASSERT_EQ(paths[0].steps.size(), 1u);
  EXPECT_EQ(paths[0].steps[0].expert, 2);
  EXPECT_EQ(paths[0].steps[0].positions, (std::vector<std::size_t>{1}));
  EXPECT_EQ(paths[1].steps[0].expert, 3);
}

}  // namespace
}  // namespace ccoe
