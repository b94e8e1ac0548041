#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "hap/hessian_probe.hpp"
#include "hap/oracle.hpp"
#include "test_support.hpp"

namespace hap {
namespace {

using testing::dummy_batch;
using testing::quadratic_fn;

Tape quadratic_tape(const Eigen::MatrixXd& a) {
  Tensor w(Shape{a.rows()});
  w.data().setOnes();
  return forward(quadratic_fn(a), {w}, dummy_batch()).tape;
}

Eigen::MatrixXd diag1234() { return Eigen::Vector4d(1, 2, 3, 4).asDiagonal(); }

TEST(Probe, PlusMinusOneOnMembersOnly) {
  const TensorList like{Tensor(Shape{2, 3}), Tensor(Shape{4})};
  const std::vector<Index> members{1, 4, 8};
  const Eigen::VectorXd v = flatten(rademacher_probe(like, members, 7, 42, 3));
  Index nonzero = 0;
  for (Index i = 0; i < v.size(); ++i) {
    const bool member = std::find(members.begin(), members.end(), i) != members.end();
    if (member) EXPECT_EQ(std::abs(v[i]), 1.0);
    else EXPECT_EQ(v[i], 0.0);
    nonzero += v[i] != 0.0;
  }
  EXPECT_EQ(nonzero, 3);
}

TEST(Probe, DeterministicInSeedIterGroup) {
  const TensorList like{Tensor(Shape{200})};
  std::vector<Index> members(200);
  for (Index i = 0; i < 200; ++i) members[static_cast<std::size_t>(i)] = i;
  const auto a = flatten(rademacher_probe(like, members, 3, 9, 5));
  EXPECT_EQ(a, flatten(rademacher_probe(like, members, 3, 9, 5)));
  EXPECT_NE(a, flatten(rademacher_probe(like, members, 3, 9, 6)));
  EXPECT_NE(a, flatten(rademacher_probe(like, members, 4, 9, 5)));
  EXPECT_NE(a, flatten(rademacher_probe(like, members, 3, 10, 5)));
}

TEST(Probe, CoordinatesAreCentered) {
  const TensorList like{Tensor(Shape{70})};
  std::vector<Index> members(70);
  for (Index i = 0; i < 70; ++i) members[static_cast<std::size_t>(i)] = i;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(70);
  const int draws = 10000;
  for (int it = 0; it < draws; ++it) sum += flatten(rademacher_probe(like, members, 0, 1, static_cast<std::uint64_t>(it)));
  EXPECT_LT((sum / draws).cwiseAbs().maxCoeff(), 0.05);
}

TEST(GroupTrace, DiagonalBlockHasZeroVariance) {
  const Tape tape = quadratic_tape(diag1234());
  const std::vector<Index> members{0, 1};
  TraceOptions opt;
  opt.n_iters = 50;
  const auto est = group_trace(tape, members, 0, opt);
  EXPECT_EQ(est.mean, 3.0);
  EXPECT_EQ(est.variance, 0.0);
  EXPECT_EQ(est.n_samples, 50u);
  for (double s : est.series) EXPECT_EQ(s, 3.0);
}

TEST(GroupTrace, CoupledTwoByTwoWithinThreeSigma) {
  Eigen::Matrix2d a;
  a << 2, 1, 1, 2;
  const Tape tape = quadratic_tape(a);
  const std::vector<Index> members{0, 1};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TraceOptions opt;
    opt.seed = seed;
    const auto est = group_trace(tape, members, 0, opt);
    EXPECT_EQ(est.n_samples, kDefaultHutchinsonIters);
    EXPECT_GT(est.variance, 0.0);
    EXPECT_LE(std::abs(est.mean - 4.0), 3.0 * est.std_error());
  }
}

TEST(GroupTrace, RejectsZeroIterations) {
  const Tape tape = quadratic_tape(diag1234());
  TraceOptions opt;
  opt.n_iters = 0;
  EXPECT_THROW(group_trace(tape, std::vector<Index>{0}, 0, opt), Error);
}

TEST(AllGroupTraces, DiagonalTwoGroups) {
  const Tape tape = quadratic_tape(diag1234());
  TraceOptions opt;
  opt.n_iters = 10;
  const auto est = all_group_traces(tape, {{0, 1}, {2, 3}}, opt);
  ASSERT_EQ(est.size(), 2u);
  EXPECT_EQ(est[0].mean, 3.0);
  EXPECT_EQ(est[1].mean, 7.0);
}

TEST(AllGroupTraces, IndependentOfOrderAndThreads) {
  ModelInstance m = build(testing::mlp_spec(4, 5, 3), 3);
  const Batch batch = testing::random_batch(32, 4, 3, 4);
  TraceOptions opt;
  opt.n_iters = 40;
  opt.seed = 17;
  const auto forward_order = all_group_traces(m, batch, opt);
  std::vector<GroupId> reversed;
  for (auto it = m.groups.rbegin(); it != m.groups.rend(); ++it) reversed.push_back(it->id);
  const auto backward_order = all_group_traces(m, batch, opt, reversed);
  opt.threads = 3;
  const auto threaded = all_group_traces(m, batch, opt);
  ASSERT_EQ(forward_order.size(), m.groups.size());
  for (std::size_t i = 0; i < forward_order.size(); ++i) {
    const auto& b = backward_order[forward_order.size() - 1 - i];
    EXPECT_EQ(b.group, forward_order[i].group);
    EXPECT_NEAR(b.mean, forward_order[i].mean, 1e-12);
    EXPECT_EQ(threaded[i].mean, forward_order[i].mean);
  }
}

TEST(AllGroupTraces, ToyMlpNearExactBlockTrace) {
  ModelInstance m = build(testing::mlp_spec(4, 6, 3), 5);
  const Batch batch = testing::random_batch(48, 4, 3, 6);
  const Eigen::MatrixXd h = exact_hessian(m, batch);
  int close = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    TraceOptions opt;
    opt.n_iters = 1000;
    opt.seed = seed;
    opt.record_series = false;
    const auto est = all_group_traces(m, batch, opt);
    for (const auto& e : est) {
      const double exact = block_trace(h, std::span<const Index>(m.groups[static_cast<std::size_t>(e.group)].members));
      close += std::abs(e.mean - exact) <= 0.05 * std::abs(exact);
      ++total;
    }
  }
  EXPECT_GE(close, static_cast<int>(std::ceil(0.95 * total))) << close << " of " << total;
}

TEST(Convergence, SeriesShapeAndCsv) {
  const Tape tape = quadratic_tape(diag1234());
  TraceOptions opt;
  opt.n_iters = 25;
  const auto est = group_trace(tape, std::vector<Index>{2, 3}, 1, opt);
  const auto rows = convergence_series(est);
  ASSERT_EQ(rows.size(), 25u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].iter, i + 1);
    EXPECT_EQ(rows[i].partial_mean, 7.0);
  }
  EXPECT_EQ(rows.back().partial_mean, est.mean);
  const std::string csv = convergence_csv(est);
  EXPECT_EQ(csv.rfind("iter,partial_mean\n1,7\n2,7\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 26);
}

TEST(Convergence, MissingSeriesIsAnError) {
  TraceEstimate est;
  est.n_samples = 3;
  EXPECT_THROW(convergence_series(est), Error);
}

TEST(Convergence, ThreeHundredAgreesWithThousand) {
  ModelInstance m = build(testing::mlp_spec(4, 6, 3), 8);
  const Batch batch = testing::random_batch(48, 4, 3, 9);
  const Tape tape = record(m, batch).tape;
  // First-layer unit 0.
  const auto& g = m.groups[0];
  std::vector<double> gaps;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    TraceOptions opt;
    opt.n_iters = 1000;
    opt.seed = seed;
    const auto est = group_trace(tape, g.members, g.id, opt);
    gaps.push_back(std::abs(est.series[299] - est.series[999]) / std::abs(est.series[999]));
  }
  std::sort(gaps.begin(), gaps.end());
  EXPECT_LT(gaps[gaps.size() / 2], 0.1);
}

TEST(EvaluationSet, TakesLeadingExamples) {
  const Batch data = testing::random_batch(20, 3, 2, 1);
  const Batch small = evaluation_set(data, 8);
  EXPECT_EQ(small.inputs.shape(), (Shape{8, 3}));
  EXPECT_EQ(small.inputs.matrix(), data.inputs.matrix().topRows(8));
  EXPECT_EQ(small.targets.matrix(), data.targets.matrix().topRows(8));
  EXPECT_EQ(evaluation_set(data, 512).inputs.shape(), (Shape{20, 3}));
}

}  // namespace
}  // namespace hap
