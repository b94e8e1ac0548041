#include <gtest/gtest.h>

#include "hap/errors.hpp"
#include "hap/pipeline.hpp"
#include "hap/train.hpp"

namespace hap {
namespace {

// Perceptron on the raw features; convergence certifies linear separability.
bool perceptron_separates(const Dataset& d, int max_epochs = 1000) {
  const Eigen::MatrixXd x = d.inputs.matrix();
  Eigen::VectorXd w = Eigen::VectorXd::Zero(x.cols() + 1);
  for (int e = 0; e < max_epochs; ++e) {
    int mistakes = 0;
    for (Index i = 0; i < x.rows(); ++i) {
      Eigen::VectorXd xi(x.cols() + 1);
      xi << x.row(i).transpose(), 1.0;
      const double y = d.labels[static_cast<std::size_t>(i)] == 1 ? 1.0 : -1.0;
      if (y * w.dot(xi) <= 0) {
        w += y * xi;
        ++mistakes;
      }
    }
    if (mistakes == 0) return true;
  }
  return false;
}

struct Fixture {
  Split data;
  ModelInstance model;
};

Fixture blobs(std::uint64_t seed) {
  Fixture f{split(gaussian_blobs(400, 2, 2, 0.3, seed), 0.25, seed), {}};
  f.model = build(parse_architecture("dense:8 relu", f.data.train.shape, 2), seed);
  return f;
}

TEST(Train, SeparableBlobsReachNinetyNinePercent) {
  const Fixture f = blobs(4);
  ASSERT_TRUE(perceptron_separates(f.data.train));
  ASSERT_TRUE(perceptron_separates(f.data.validation));
  TrainConfig c;
  c.epochs = 50;
  const TrainResult r = train(f.model, f.data.train, f.data.validation, c);
  EXPECT_GE(r.accuracy, 0.99);
  EXPECT_LE(r.best_epoch, 50);
  EXPECT_EQ(r.history.size(), 51u);
}

TEST(Train, ZeroLearningRateLeavesParameters) {
  const Fixture f = blobs(5);
  TrainConfig c;
  c.lr = 0.0;
  c.epochs = 3;
  const TrainResult r = train(f.model, f.data.train, f.data.validation, c);
  EXPECT_EQ(r.model.params, f.model.params);
  EXPECT_DOUBLE_EQ(r.accuracy, accuracy(f.model, f.data.validation));
  EXPECT_EQ(r.best_epoch, 0);
}

TEST(Train, SameSeedIsBitwiseIdentical) {
  const Fixture f = blobs(6);
  TrainConfig c;
  c.epochs = 4;
  const TrainResult a = train(f.model, f.data.train, f.data.validation, c);
  const TrainResult b = train(f.model, f.data.train, f.data.validation, c);
  EXPECT_EQ(a.model, b.model);
  c.seed = 2;
  const TrainResult other = train(f.model, f.data.train, f.data.validation, c);
  EXPECT_FALSE(other.model == a.model);
}

TEST(Train, ScheduleDropsAtHalfAndThreeQuarters) {
  TrainConfig c;
  c.lr = 1.0;
  c.epochs = 8;
  EXPECT_DOUBLE_EQ(c.lr_at(3), 1.0);
  EXPECT_DOUBLE_EQ(c.lr_at(4), 0.1);
  EXPECT_DOUBLE_EQ(c.lr_at(5), 0.1);
  EXPECT_DOUBLE_EQ(c.lr_at(6), 0.01);
}

TEST(Train, DivergenceNamesEpochAndStep) {
  const Fixture f = blobs(7);
  TrainConfig c;
  c.lr = 1e200;
  c.momentum = 0.0;
  try {
    train(f.model, f.data.train, f.data.validation, c);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("step"), std::string::npos) << msg;
  }
}

TEST(Train, RejectsBadConfig) {
  const Fixture f = blobs(8);
  TrainConfig c;
  c.momentum = 1.0;
  EXPECT_THROW(train(f.model, f.data.train, f.data.validation, c), ConfigError);
  c = TrainConfig{};
  c.epochs = 0;
  EXPECT_THROW(train(f.model, f.data.train, f.data.validation, c), ConfigError);
}

// finetune mirrors train on a pruned model.
TEST(Finetune, PrunedModelProperties) {
  const Fixture f = blobs(4);
  ASSERT_TRUE(perceptron_separates(f.data.validation));
  std::vector<Decision> d(f.model.groups.size(), Decision::kKeep);
  d[0] = d[1] = Decision::kPrune;
  const ModelInstance pruned = rebuild(f.model, d);
  TrainConfig c;
  c.epochs = 50;
  EXPECT_GE(finetune(pruned, f.data.train, f.data.validation, c).accuracy, 0.99);
  c.epochs = 3;
  c.lr = 0.0;
  EXPECT_EQ(finetune(pruned, f.data.train, f.data.validation, c).model.params, pruned.params);
  c.lr = 0.05;
  EXPECT_EQ(finetune(pruned, f.data.train, f.data.validation, c).model,
            finetune(pruned, f.data.train, f.data.validation, c).model);
}

}  // namespace
}  // namespace hap
