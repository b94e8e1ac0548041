#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "hap/oracle.hpp"
#include "hap/random.hpp"
#include "test_support.hpp"

namespace hap {
namespace {

using testing::dummy_batch;
using testing::quadratic_fn;
using testing::random_psd;

Tape quadratic_tape(const Eigen::MatrixXd& a, const Eigen::VectorXd& w) {
  Tensor t(Shape{w.size()});
  t.data() = w;
  return forward(quadratic_fn(a), {t}, dummy_batch()).tape;
}

TEST(ExactHessian, QuadraticReturnsA) {
  const Eigen::MatrixXd a = random_psd(6, 1);
  const Eigen::MatrixXd h = exact_hessian(quadratic_tape(a, Eigen::VectorXd::Random(6)));
  EXPECT_LT((h - a).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ExactHessian, LinearMseIsScaledGram) {
  const Index n = 9, f = 4;
  ModelInstance m = build({{f, 1, 1}, {Dense{f, 1}}, LossKind::kMse}, 3);
  Batch batch = testing::random_batch(n, f, 1, 5);
  Rng rng(6);
  for (Index k = 0; k < batch.targets.size(); ++k) batch.targets[k] = normal(rng);
  // Parameters are (W row, bias): design matrix [X 1].
  Eigen::MatrixXd design(n, f + 1);
  design.leftCols(f) = batch.inputs.matrix();
  design.col(f).setOnes();
  const Eigen::MatrixXd expect = design.transpose() * design / static_cast<double>(n);
  EXPECT_LT((exact_hessian(m, batch) - expect).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(ExactHessian, MlpColumnsAreSymmetric) {
  ModelInstance m = build(testing::mlp_spec(4, 6, 3), 7);
  const Batch batch = testing::random_batch(16, 4, 3, 8);
  const Tape tape = record(m, batch).tape;
  const Index n = total_size(m.params);
  Eigen::MatrixXd raw(n, n);
  Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
  for (Index i = 0; i < n; ++i) {
    e[i] = 1.0;
    raw.col(i) = flatten(hvp(tape, unflatten(e, m.params)));
    e[i] = 0.0;
  }
  EXPECT_LT((raw - raw.transpose()).cwiseAbs().maxCoeff(), 1e-8);
  const Eigen::MatrixXd h = exact_hessian(tape);
  EXPECT_EQ((h - h.transpose()).cwiseAbs().maxCoeff(), 0.0);
}

TEST(ExactHessian, CapIsEnforced) {
  ModelInstance m = build(testing::mlp_spec(4, 6, 3), 7);
  EXPECT_THROW(exact_hessian(m, testing::random_batch(4, 4, 3, 1), 10), CapacityError);
}

TEST(Obs, TwoByTwoExample) {
  Eigen::Matrix2d h;
  h << 2, 1, 1, 2;
  const Eigen::Vector2d w(1.0, -7.0);
  const std::vector<Index> prune{0};
  const auto r = obs_perturbation(h, w, prune);
  ASSERT_EQ(r.delta_w_l.size(), 1);
  EXPECT_NEAR(r.delta_w_l[0], 0.5, 1e-15);
  EXPECT_NEAR(r.delta_loss, 0.75, 1e-15);
  const Eigen::Vector2d dw(-1.0, 0.5);
  EXPECT_LT((r.delta_w - dw).norm(), 1e-15);
  EXPECT_NEAR(0.5 * dw.dot(h * dw), r.delta_loss, 1e-15);
}

TEST(Obs, DiagonalHasNoCompensation) {
  const Eigen::Vector4d d(1, 2, 3, 4);
  const Eigen::MatrixXd h = d.asDiagonal();
  const Eigen::Vector4d w(0.5, -1.0, 2.0, 3.0);
  const std::vector<Index> prune{1, 3};
  const auto r = obs_perturbation(h, w, prune);
  EXPECT_EQ(r.delta_w_l.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_DOUBLE_EQ(r.delta_loss, 0.5 * (2.0 * 1.0 + 4.0 * 9.0));
  EXPECT_EQ(r.delta_loss, obd_perturbation(h, w, prune));
}

TEST(Obs, MatchesDirectReevaluationOnRandomQuadratics) {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = 2 + static_cast<Index>(below(rng, 19));
    const Eigen::MatrixXd h = random_psd(n, 100 + static_cast<std::uint64_t>(trial));
    Eigen::VectorXd w(n);
    for (Index i = 0; i < n; ++i) w[i] = normal(rng);
    std::vector<Index> prune;
    for (Index i = 0; i < n; ++i)
      if (uniform01(rng) < 0.4) prune.push_back(i);
    if (prune.empty()) prune.push_back(0);
    const auto r = obs_perturbation(h, w, prune);
    // Loss centered at the current point: L(u) = 1/2 (u - w)^T H (u - w).
    auto loss = [&](const Eigen::VectorXd& u) { return 0.5 * (u - w).dot(h * (u - w)); };
    const Eigen::VectorXd moved = w + r.delta_w;
    EXPECT_NEAR(loss(moved) - loss(w), r.delta_loss, 1e-9);
    for (Index i : prune) EXPECT_NEAR(moved[i], 0.0, 1e-15);
    double naive = 0.0;
    for (Index i : prune)
      for (Index j : prune) naive += 0.5 * w[i] * h(i, j) * w[j];
    EXPECT_LE(r.delta_loss, naive + 1e-12);
    EXPECT_GE(r.delta_loss, -1e-12);
    // Any other compensation does no better.
    Eigen::VectorXd other = r.delta_w;
    for (Index i : r.retained) other[i] += 0.01 * normal(rng);
    EXPECT_GE(loss(w + other) - loss(w), r.delta_loss - 1e-12);
  }
}

TEST(Obs, SingularRetainedBlockIsAnError) {
  Eigen::Matrix3d h;
  h << 1, 1, 0, 1, 1, 0, 0, 0, 2;
  const Eigen::Vector3d w(1, 1, 1);
  const std::vector<Index> prune{2};
  EXPECT_THROW(obs_perturbation(h, w, prune), SingularError);
  Eigen::Matrix2d indefinite;
  indefinite << 1, 0, 0, -1;
  const std::vector<Index> first{0};
  EXPECT_THROW(obs_perturbation(indefinite, Eigen::Vector2d(1, 1), first), SingularError);
  const std::vector<Index> bad{3};
  EXPECT_THROW(obs_perturbation(h, w, bad), ShapeError);
}

TEST(Obd, IgnoresCrossTerms) {
  Eigen::Matrix2d h;
  h << 2, 1, 1, 2;
  const Eigen::Vector2d w(0.7, -1.3);
  const std::vector<Index> both{0, 1};
  const double obd = obd_perturbation(h, w, both);
  EXPECT_NEAR(obd, 0.5 * (2 * 0.49 + 2 * 1.69), 1e-15);
  EXPECT_NEAR(0.5 * w.dot(h * w) - obd, w[0] * w[1], 1e-15);
  EXPECT_NEAR(obs_perturbation(h, w, both).delta_loss, 0.5 * w.dot(h * w), 1e-15);
}

TEST(Obd, NonNegativeForNonNegativeDiagonal) {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    Eigen::MatrixXd h = Eigen::MatrixXd::Random(5, 5);
    h.diagonal() = h.diagonal().cwiseAbs();
    Eigen::VectorXd w = Eigen::VectorXd::Random(5);
    const std::vector<Index> s{0, 2, 4};
    EXPECT_GE(obd_perturbation(h, w, s), 0.0);
  }
}

TEST(HapScoreExact, DiagonalExample) {
  const Eigen::MatrixXd h = Eigen::Vector4d(1, 2, 3, 4).asDiagonal();
  const auto s = hap_score_exact(h, Eigen::Vector4d::Ones(), {{0, 1}, {2, 3}});
  ASSERT_EQ(s.size(), 2u);
  EXPECT_DOUBLE_EQ(s[0], 1.5);
  EXPECT_DOUBLE_EQ(s[1], 3.5);
}

TEST(HapScoreExact, SingletonGroupsReduceToObd) {
  const Eigen::MatrixXd h = Eigen::Vector3d(0.5, 2, 7).asDiagonal();
  const Eigen::Vector3d w(1.5, -0.25, 0.1);
  const auto s = hap_score_exact(h, w, {{0}, {1}, {2}});
  for (Index i = 0; i < 3; ++i) {
    const std::vector<Index> one{i};
    EXPECT_DOUBLE_EQ(s[static_cast<std::size_t>(i)], obd_perturbation(h, w, one));
  }
}

TEST(BruteForce, DiagonalQuadraticPicksLowestScore) {
  const Eigen::MatrixXd h = Eigen::Vector4d(1, 2, 3, 4).asDiagonal();
  const Eigen::VectorXd w = Eigen::Vector4d::Ones();
  // Quadratic with its minimum at the current weights.
  auto loss = [&](const Eigen::VectorXd& u) { return 0.5 * (u - w).dot(h * (u - w)); };
  const std::vector<std::vector<Index>> groups{{0, 1}, {2, 3}};
  const auto one = brute_force_best_groups(loss, w, groups, 1);
  EXPECT_EQ(one.best, (std::vector<std::size_t>{0}));
  EXPECT_DOUBLE_EQ(one.best_increase, 1.5);
  const auto scores = hap_score_exact(h, w, groups);
  EXPECT_LT(scores[0], scores[1]);
  const auto all = brute_force_best_groups(loss, w, groups, 2);
  EXPECT_EQ(all.best, (std::vector<std::size_t>{0, 1}));
  EXPECT_DOUBLE_EQ(all.best_increase, 5.0);
}

TEST(BruteForce, EnforcesCap) {
  std::vector<std::vector<Index>> groups(20, std::vector<Index>{0});
  auto loss = [](const Eigen::VectorXd&) { return 0.0; };
  EXPECT_THROW(brute_force_best_groups(loss, Eigen::VectorXd::Zero(1), groups, 8), CapacityError);
  EXPECT_NO_THROW(brute_force_best_groups(loss, Eigen::VectorXd::Zero(1), groups, 3));
  EXPECT_THROW(brute_force_best_groups(loss, Eigen::VectorXd::Zero(1), groups, 0), Error);
}

TEST(BruteForce, ModelFormAgreesWithSingleGroupIncreases) {
  ModelInstance m = build(testing::mlp_spec(3, 6, 2), 31);
  const Batch batch = testing::random_batch(20, 3, 2, 32);
  const auto inc = single_group_loss_increase(m, batch, {});
  ASSERT_EQ(inc.size(), 6u);
  const auto best = brute_force_best_groups(m, batch, {}, 1);
  const auto argmin = static_cast<std::size_t>(std::min_element(inc.begin(), inc.end()) - inc.begin());
  EXPECT_EQ(best.best, (std::vector<std::size_t>{argmin}));
  EXPECT_DOUBLE_EQ(best.best_increase, inc[argmin]);
}

TEST(Spearman, KnownValues) {
  const std::vector<double> a{1, 2, 3, 4, 5};
  const std::vector<double> up{10, 20, 30, 40, 50};
  const std::vector<double> down{5, 4, 3, 2, 1};
  EXPECT_NEAR(spearman(a, up), 1.0, 1e-15);
  EXPECT_NEAR(spearman(a, down), -1.0, 1e-15);
  // Ties get average ranks: (1, 2.5, 2.5, 4) against (1, 2, 3, 4).
  const std::vector<double> tied{1, 2, 2, 3};
  const std::vector<double> plain{1, 2, 3, 4};
  EXPECT_NEAR(spearman(tied, plain), 4.5 / std::sqrt(4.5 * 5.0), 1e-15);
  EXPECT_THROW(spearman(std::vector<double>{1}, std::vector<double>{1}), Error);
}

}  // namespace
}  // namespace hap
