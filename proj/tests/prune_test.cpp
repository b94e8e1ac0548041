#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "hap/implant.hpp"
#include "hap/oracle.hpp"
#include "hap/prune.hpp"
#include "hap/random.hpp"
#include "test_support.hpp"

namespace hap {
namespace {

ModelSpec conv_chain() {
  return {{4, 8, 8},
          {Conv3x3{4, 8, 8, 8}, Relu{}, Conv3x3{8, 8, 8, 8}, Relu{}, AvgPool{2}, Flatten{}, Dense{8 * 16, 3}},
          LossKind::kCrossEntropy};
}

ModelSpec two_block_attention() {
  return {{8, 4, 1}, {AttentionBlock{8, 4}, AttentionBlock{8, 4}, Flatten{}, Dense{32, 2}}, LossKind::kCrossEntropy};
}

// Records with a chosen score per group; trace = score so the stored formula
// is not exercised here.
std::vector<SensitivityRecord> records_with(const ModelInstance& m, const std::vector<double>& scores) {
  std::vector<SensitivityRecord> out;
  for (const auto& g : m.groups) {
    SensitivityRecord r;
    r.group = g.id;
    r.layer = g.layer;
    r.index = g.index;
    r.kind = g.kind;
    r.p = g.p();
    r.weight_sq_norm = group_sq_norm(m, g);
    r.raw_trace = r.trace = r.score = scores.at(static_cast<std::size_t>(g.id));
    out.push_back(r);
  }
  return out;
}

TEST(Score, DiagonalExample) {
  // Dense{1,2}: unit j owns W[j] and b[j]; all ones gives |w_p|^2 = 2, p = 2.
  ModelInstance m = assemble({{1, 1, 1}, {Dense{1, 2}}, LossKind::kMse},
                             {Tensor(Shape{2, 1}, {1.0, 1.0}), Tensor(Shape{2}, {1.0, 1.0})});
  const std::vector<double> traces{3.0, 7.0};
  const auto r = score_groups(m, std::span<const double>(traces));
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].score, 1.5);
  EXPECT_EQ(r[1].score, 3.5);
  EXPECT_EQ(r[0].p, 2);
  EXPECT_EQ(r[0].weight_sq_norm, 2.0);
}

TEST(Score, ZeroNormAndNegativeTrace) {
  ModelInstance m = assemble({{1, 1, 1}, {Dense{1, 2}}, LossKind::kMse},
                             {Tensor(Shape{2, 1}, {0.0, 2.0}), Tensor(Shape{2}, {0.0, 1.0})});
  const std::vector<double> traces{1e6, -0.25};
  const auto r = score_groups(m, std::span<const double>(traces));
  EXPECT_EQ(r[0].score, 0.0);
  EXPECT_EQ(r[1].raw_trace, -0.25);
  EXPECT_EQ(r[1].trace, 0.0);
  EXPECT_EQ(r[1].score, 0.0);
  for (const auto& x : r) EXPECT_EQ(x.score, x.trace * x.weight_sq_norm / (2.0 * static_cast<double>(x.p)));
}

TEST(Score, MissingTraceIsAnError) {
  ModelInstance m = build(testing::mlp_spec(3, 4, 2), 1);
  std::vector<TraceEstimate> est(3);
  for (std::size_t i = 0; i < est.size(); ++i) est[i].group = static_cast<GroupId>(i);
  EXPECT_THROW(score_groups(m, std::span<const TraceEstimate>(est)), Error);
  const std::vector<double> short_list{1.0};
  EXPECT_THROW(score_groups(m, std::span<const double>(short_list)), Error);
}

TEST(Score, ToyMlpMatchesExactScores) {
  ModelInstance m = build(testing::mlp_spec(4, 6, 3), 2);
  const Batch batch = testing::random_batch(48, 4, 3, 3);
  TraceOptions opt;
  opt.n_iters = 1000;
  opt.seed = 4;
  const auto est = all_group_traces(m, batch, opt);
  const auto records = score_groups(m, std::span<const TraceEstimate>(est));
  const auto exact = hap_score_exact(exact_hessian(m, batch), flatten(m.params), member_lists(m));
  int within = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const double scale = records[i].weight_sq_norm / (2.0 * static_cast<double>(records[i].p));
    within += std::abs(records[i].score - exact[i]) <= 3.0 * est[i].std_error() * scale + 1e-12;
  }
  EXPECT_GE(within, static_cast<int>(records.size()) - 1);
}

TEST(Rank, HapAndReverse) {
  ModelInstance m = assemble({{1, 1, 1}, {Dense{1, 2}}, LossKind::kMse},
                             {Tensor(Shape{2, 1}, {1.0, 1.0}), Tensor(Shape{2}, {1.0, 1.0})});
  const auto r = records_with(m, {1.5, 3.5});
  EXPECT_EQ(rank(r, Ordering::kHap), (std::vector<GroupId>{0, 1}));
  EXPECT_EQ(rank(r, Ordering::kReverse), (std::vector<GroupId>{1, 0}));
}

TEST(Rank, TiesAreLexicographic) {
  ModelInstance m = build(conv_chain(), 1);
  const auto r = records_with(m, std::vector<double>(m.groups.size(), 2.0));
  std::vector<GroupId> lex(m.groups.size());
  for (std::size_t i = 0; i < lex.size(); ++i) lex[i] = static_cast<GroupId>(i);
  EXPECT_EQ(rank(r, Ordering::kHap), lex);
  EXPECT_EQ(rank(r, Ordering::kReverse), lex);
}

TEST(Rank, MagnitudeIgnoresTraces) {
  // Equal norms, unequal traces: a small-weight group can still be sensitive.
  ModelInstance m = assemble({{1, 1, 1}, {Dense{1, 3}}, LossKind::kMse},
                             {Tensor(Shape{3, 1}, {1.0, 1.0, 1.0}), Tensor(Shape{3}, {1.0, 1.0, 1.0})});
  const std::vector<double> traces{9.0, 1.0, 4.0};
  const auto r = score_groups(m, std::span<const double>(traces));
  EXPECT_EQ(rank(r, Ordering::kMagnitude), (std::vector<GroupId>{0, 1, 2}));
  EXPECT_EQ(rank(r, Ordering::kHap), (std::vector<GroupId>{1, 2, 0}));
}

TEST(Rank, RandomIsSeededPermutation) {
  ModelInstance m = build(conv_chain(), 1);
  std::vector<double> s(m.groups.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<double>(i);
  const auto r = records_with(m, s);
  const auto a = rank(r, Ordering::kRandom, 5);
  EXPECT_EQ(a, rank(r, Ordering::kRandom, 5));
  EXPECT_NE(a, rank(r, Ordering::kRandom, 6));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, rank(r, Ordering::kHap));
}

TEST(Rank, ScaleInvarianceAndExactReverse) {
  ModelInstance m = build(conv_chain(), 2);
  Rng rng(3);
  std::vector<double> s(m.groups.size());
  for (auto& x : s) x = uniform01(rng);
  std::vector<double> scaled = s;
  for (auto& x : scaled) x *= 37.5;
  const auto hap = rank(records_with(m, s), Ordering::kHap);
  EXPECT_EQ(hap, rank(records_with(m, scaled), Ordering::kHap));
  auto rev = rank(records_with(m, s), Ordering::kReverse);
  std::reverse(rev.begin(), rev.end());
  EXPECT_EQ(hap, rev);
}

TEST(Select, ChannelBudgetPrunesLowestHalf) {
  ModelInstance m = build({{3, 1, 1}, {Dense{3, 8}, Relu{}, Dense{8, 2}}, LossKind::kCrossEntropy}, 4);
  const auto r = records_with(m, {5, 1, 7, 3, 8, 2, 6, 4, 100, 100});
  SelectOptions opt;
  opt.budget = {BudgetKind::kChannelFraction, 0.5};
  const PrunePlan plan = select(m, r, rank(r, Ordering::kHap), opt);
  std::vector<GroupId> pruned;
  for (std::size_t i = 0; i < plan.decisions.size(); ++i)
    if (plan.decisions[i] == Decision::kPrune) pruned.push_back(static_cast<GroupId>(i));
  EXPECT_EQ(pruned, (std::vector<GroupId>{1, 3, 5, 7}));
  EXPECT_EQ(plan.achieved, 0.5);
}

TEST(Select, ImplantRatioMarksMostSensitivePruned) {
  ModelInstance m = build(conv_chain(), 5);
  std::vector<double> s(m.groups.size(), 1000.0);
  for (GroupId g = 0; g < 16; ++g) s[static_cast<std::size_t>(g)] = 1.0 + g;
  const auto r = records_with(m, s);
  SelectOptions opt;
  opt.budget = {BudgetKind::kChannelFraction, 6.0 / 16.0};
  opt.implant_ratio = 0.2;
  const PrunePlan plan = select(m, r, rank(r, Ordering::kHap), opt);
  EXPECT_EQ(plan.count(Decision::kPrune) + plan.count(Decision::kImplant), 10);
  EXPECT_EQ(plan.count(Decision::kImplant), 2);
  // Lowest ten with at most six per layer: 0..5 and 8..11; top two by score are 11 and 10.
  EXPECT_EQ(plan.decisions[11], Decision::kImplant);
  EXPECT_EQ(plan.decisions[10], Decision::kImplant);
  EXPECT_EQ(plan.decisions[6], Decision::kKeep);
}

TEST(Select, PerLayerLimitDefersToNextRanked) {
  ModelInstance m = build({{3, 1, 1}, {Dense{3, 4}, Relu{}, Dense{4, 4}, Relu{}, Dense{4, 2}}, LossKind::kCrossEntropy}, 6);
  const auto r = records_with(m, {1, 2, 3, 4, 5, 6, 7, 8, 100, 100});
  SelectOptions opt;
  opt.budget = {BudgetKind::kChannelFraction, 0.5};
  opt.per_layer_limit = 0.5;
  const PrunePlan plan = select(m, r, rank(r, Ordering::kHap), opt);
  const std::vector<Decision> expect{Decision::kPrune, Decision::kPrune, Decision::kKeep,  Decision::kKeep, Decision::kPrune,
                                     Decision::kPrune, Decision::kKeep,  Decision::kKeep,  Decision::kKeep, Decision::kKeep};
  EXPECT_EQ(plan.decisions, expect);
  ASSERT_EQ(plan.per_layer.size(), 3u);
  EXPECT_EQ(plan.per_layer[0].pruned, 2);
  EXPECT_EQ(plan.per_layer[1].pruned, 2);
}

TEST(Select, InfeasibleBudgetNamesConstraint) {
  ModelInstance m = build(conv_chain(), 7);
  const auto r = records_with(m, std::vector<double>(m.groups.size(), 1.0));
  SelectOptions opt;
  opt.budget = {BudgetKind::kChannelFraction, 0.1};
  try {
    select(m, r, rank(r, Ordering::kHap), opt);
    FAIL() << "expected InfeasibleError";
  } catch (const InfeasibleError& e) {
    EXPECT_EQ(e.constraint(), "per-layer-limit");
  }
  opt.per_layer_limit = 1.0;
  try {
    select(m, r, rank(r, Ordering::kHap), opt);
    FAIL() << "expected InfeasibleError";
  } catch (const InfeasibleError& e) {
    EXPECT_EQ(e.constraint(), "min-one-per-layer");
  }
  opt.budget.value = 0.0;
  EXPECT_THROW(select(m, r, rank(r, Ordering::kHap), opt), ConfigError);
}

TEST(Select, FullBudgetIsNoOp) {
  ModelInstance m = build(conv_chain(), 8);
  const auto r = records_with(m, std::vector<double>(m.groups.size(), 1.0));
  SelectOptions opt;
  opt.budget = {BudgetKind::kParamFraction, 1.0};
  opt.implant_ratio = 0.2;
  const PrunePlan plan = select(m, r, rank(r, Ordering::kHap), opt);
  EXPECT_EQ(plan.count(Decision::kKeep), static_cast<Index>(m.groups.size()));
  EXPECT_EQ(plan.after.total_params, plan.before.total_params);
}

TEST(Select, BudgetsAreMetAndPlansDeterministic) {
  ModelInstance m = build(conv_chain(), 9);
  Rng rng(10);
  std::vector<double> s(m.groups.size());
  for (auto& x : s) x = uniform01(rng);
  const auto r = records_with(m, s);
  for (BudgetKind kind : {BudgetKind::kParamFraction, BudgetKind::kFlopFraction, BudgetKind::kChannelFraction}) {
    for (double budget : {0.9, 0.7, 0.5, 0.4}) {
      for (double ratio : {0.0, 0.2, 0.5}) {
        SelectOptions opt;
        opt.budget = {kind, budget};
        opt.implant_ratio = ratio;
        const PrunePlan a = select(m, r, rank(r, Ordering::kHap), opt);
        EXPECT_LE(a.achieved, budget + 1e-12);
        EXPECT_EQ(a.achieved, remaining_fraction(m, a.decisions, kind));
        EXPECT_EQ(plan_report(a), plan_report(select(m, r, rank(r, Ordering::kHap), opt)));
        for (const auto& g : m.groups)
          if (!g.prunable) EXPECT_EQ(a.decisions[static_cast<std::size_t>(g.id)], Decision::kKeep);
        for (const auto& lc : a.per_layer) EXPECT_LT(lc.pruned + lc.implanted, lc.groups);
      }
    }
  }
}

TEST(HeadPlan, HalfOfTwoByFour) {
  ModelInstance m = build(two_block_attention(), 11);
  Rng rng(12);
  std::vector<double> s(m.groups.size());
  for (auto& x : s) x = uniform01(rng);
  const PrunePlan plan = head_prune_plan(m, records_with(m, s), 0.5);
  EXPECT_EQ(plan.count(Decision::kPrune), 4);
  for (const auto& lc : plan.per_layer)
    if (lc.layer < 2) EXPECT_LT(lc.pruned, lc.groups);
  EXPECT_NO_THROW(rebuild(m, plan.decisions));
}

TEST(HeadPlan, KeepAllIsNoOp) {
  ModelInstance m = build(two_block_attention(), 13);
  const PrunePlan plan = head_prune_plan(m, records_with(m, std::vector<double>(m.groups.size(), 1.0)), 1.0);
  EXPECT_EQ(plan.count(Decision::kPrune), 0);
  EXPECT_TRUE(rebuild(m, plan.decisions) == m);
}

TEST(HeadPlan, FloorMovesFourthPruneElsewhere) {
  ModelInstance m = build(two_block_attention(), 14);
  // Layer 0 heads lowest; layer 1 head 2 next.
  std::vector<double> s(m.groups.size(), 50.0);
  s[0] = 1;
  s[1] = 2;
  s[2] = 3;
  s[3] = 4;
  s[4] = 9;
  s[5] = 8;
  s[6] = 5;
  s[7] = 7;
  const PrunePlan plan = head_prune_plan(m, records_with(m, s), 0.5);
  const std::vector<Decision> heads(plan.decisions.begin(), plan.decisions.begin() + 8);
  const std::vector<Decision> expect{Decision::kPrune, Decision::kPrune, Decision::kPrune, Decision::kKeep,
                                     Decision::kKeep,  Decision::kKeep,  Decision::kPrune, Decision::kKeep};
  EXPECT_EQ(heads, expect);
}

TEST(HeadPlan, FloorViolationIsInfeasible) {
  ModelInstance m = build(two_block_attention(), 15);
  const auto r = records_with(m, std::vector<double>(m.groups.size(), 1.0));
  EXPECT_THROW(head_prune_plan(m, r, 0.1), InfeasibleError);
  ModelInstance mlp = build(testing::mlp_spec(3, 4, 2), 1);
  EXPECT_THROW(head_prune_plan(mlp, records_with(mlp, std::vector<double>(mlp.groups.size(), 1.0)), 0.5), Error);
}

TEST(Report, DecisionsRoundTrip) {
  ModelInstance m = build(conv_chain(), 16);
  Rng rng(17);
  std::vector<double> s(m.groups.size());
  for (auto& x : s) x = uniform01(rng);
  const auto r = records_with(m, s);
  SelectOptions opt;
  opt.budget = {BudgetKind::kParamFraction, 0.5};
  opt.implant_ratio = 0.2;
  const PrunePlan plan = select(m, r, rank(r, Ordering::kReverse), opt, Ordering::kReverse);
  const std::string text = plan_report(plan);
  EXPECT_EQ(parse_plan_decisions(text), plan.decisions);
  EXPECT_NE(text.find("ordering reverse\n"), std::string::npos);
  EXPECT_NE(text.find("params_after " + std::to_string(plan.after.total_params) + "\n"), std::string::npos);
  EXPECT_THROW(parse_plan_decisions("nothing here"), FormatError);
}

}  // namespace
}  // namespace hap
