#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mola/harness/data.hpp"
#include "mola/nn.hpp"
#include "oracles.hpp"

using namespace mola;

namespace {

Mlp random_net(std::size_t d, std::vector<std::size_t> hidden, std::size_t c, bool bias, std::uint64_t seed) {
  MlpConfig cfg{d, std::move(hidden), c, bias, seed};
  Mlp net = init_mlp(cfg);
  // Nonzero biases and head so every parameter is exercised.
  Rng rng(seed + 1000);
  for (auto& l : net.hidden)
    for (double& b : l.bias) b = 0.3 * rng.normal();
  for (double& w : net.head.data()) w = rng.normal();
  return net;
}

Dataset random_batch(std::size_t n, std::size_t d, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Dataset data{Matrix(n, d), std::vector<std::size_t>(n), c};
  for (double& v : data.x.data()) v = rng.normal();
  for (auto& y : data.y) y = rng.below(c);
  return data;
}

Dataset separable_blobs(std::size_t n, std::uint64_t seed) {
  harness::BlobSpec spec{2, n, 2, 0.5, 4.0};
  return harness::make_blobs(spec, seed);
}

}  // namespace

TEST(Forward, ZeroWeightsGiveZeroLogits) {
  Mlp net = init_mlp({3, {4}, 3, true, 0});
  for (auto& l : net.hidden) std::fill(l.weight.data().begin(), l.weight.data().end(), 0.0);
  std::fill(net.head.data().begin(), net.head.data().end(), 0.0);
  for (double v : forward(net, Vector{1.0, -2.0, 0.5})) EXPECT_EQ(v, 0.0);
}

TEST(Forward, NegativePreactivationsKillFeatures) {
  Mlp net = init_mlp({2, {2}, 2, false, 0});
  net.hidden[0].weight = Matrix::identity(2);
  net.head = Matrix{{1, 2}, {3, 4}};
  const Vector x{-1.0, -3.0};
  EXPECT_EQ(features(net, x), (Vector{0.0, 0.0}));
  EXPECT_EQ(forward(net, x), (Vector{0.0, 0.0}));

  Mlp biased = init_mlp({2, {2}, 2, true, 0});
  biased.hidden[0].weight = Matrix::identity(2);
  EXPECT_EQ(features(biased, x), (Vector{0.0, 0.0, 1.0}));
}

TEST(Forward, MatchesIndependentReimplementation) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Mlp net = random_net(3, {5, 4}, 4, s % 2 == 0, s);
    Rng rng(s + 50);
    Vector x(3);
    for (double& v : x) v = rng.normal();
    const Vector got = forward(net, x);
    const Vector ref = oracle::reference_logits(net, x);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-12);
  }
}

TEST(Forward, EqualsHeadTimesFeaturesExactly) {
  const Mlp net = random_net(2, {8, 8}, 3, true, 4);
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const Vector x{rng.normal(), rng.normal()};
    EXPECT_EQ(forward(net, x), matvec(net.head, features(net, x)));
  }
}

TEST(Forward, WrongInputDimThrows) {
  const Mlp net = init_mlp({2, {4}, 3, true, 0});
  EXPECT_THROW(forward(net, Vector{1, 2, 3}), DimensionMismatch);
}

TEST(Softmax, StableAndNormalized) {
  for (const Vector& z : {Vector{1000, 1001, 999}, Vector{-1e4, 0, 3}, Vector{0, 0}}) {
    const Vector p = softmax(z);
    double s = 0.0;
    for (double v : p) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Loss, TwoClassZeroLogitsIsLn2) {
  Mlp net = init_mlp({1, {}, 2, false, 0});
  std::fill(net.head.data().begin(), net.head.data().end(), 0.0);
  const Dataset d{Matrix{{1.0}}, {0}, 2};
  EXPECT_NEAR(loss_and_grad(net, d, 0.0).loss, std::numbers::ln2, 1e-15);
}

TEST(Loss, DuplicatedPointHasSameGradient) {
  const Mlp net = random_net(2, {6}, 3, true, 2);
  const Dataset one{Matrix{{0.4, -1.2}}, {1}, 3};
  const Dataset two{Matrix{{0.4, -1.2}, {0.4, -1.2}}, {1, 1}, 3};
  const auto a = loss_and_grad(net, one, 0.0);
  const auto b = loss_and_grad(net, two, 0.0);
  EXPECT_NEAR(a.loss, b.loss, 1e-15);
  for (std::size_t i = 0; i < a.grad.head.data().size(); ++i)
    EXPECT_NEAR(a.grad.head.data()[i], b.grad.head.data()[i], 1e-15);
  for (std::size_t i = 0; i < a.grad.hidden[0].weight.data().size(); ++i)
    EXPECT_NEAR(a.grad.hidden[0].weight.data()[i], b.grad.hidden[0].weight.data()[i], 1e-15);
}

TEST(Loss, EmptyBatchThrows) {
  const Mlp net = init_mlp({2, {3}, 2, true, 0});
  const Dataset empty{Matrix(0, 2), {}, 2};
  EXPECT_THROW(loss_and_grad(net, empty, 0.0), EmptyInput);
}

TEST(Loss, ValueMatchesReferenceWithWeightDecay) {
  const Mlp net = random_net(3, {4, 4}, 3, true, 6);
  const Dataset d = random_batch(7, 3, 3, 6);
  EXPECT_NEAR(loss_and_grad(net, d, 0.3).loss, oracle::reference_loss(net, d, 0.3), 1e-12);
}

// Central differences of the independent reference loss.
TEST(Loss, GradientMatchesFiniteDifferences) {
  const double h = 1e-5;
  for (std::uint64_t s = 0; s < 6; ++s) {
    std::vector<std::size_t> hidden;
    for (std::uint64_t l = 0; l < s % 4; ++l) hidden.push_back(3 + l);
    Mlp net = random_net(3, hidden, 3, s % 2 == 0, s);
    const Dataset d = random_batch(5, 3, 3, s + 7);
    const double wd = 0.1;
    const auto lg = loss_and_grad(net, d, wd);
    MlpGrad grad = lg.grad;
    Mlp probe = net;
    for_each_parameter(probe, grad, [&](double& p, double& g) {
      const double keep = p;
      p = keep + h;
      const double up = oracle::reference_loss(probe, d, wd);
      p = keep - h;
      const double dn = oracle::reference_loss(probe, d, wd);
      p = keep;
      const double fd = (up - dn) / (2.0 * h);
      EXPECT_LE(std::abs(g - fd), std::max(1e-6, 1e-4 * std::abs(fd))) << "seed " << s;
    });
  }
}

TEST(Train, SeparableBlobsReachHighAccuracy) {
  const Dataset d = separable_blobs(200, 1);
  const Mlp net = train_map({2, {16, 16}, 2, true, 3}, {100, 32, 1e-2, 5e-4, OptimizerKind::adam, 4}, d);
  EXPECT_GE(accuracy(net, d), 0.99);
}

TEST(Train, SgdNesterovAlsoFits) {
  const Dataset d = separable_blobs(200, 2);
  const Mlp net = train_map({2, {16}, 2, true, 3}, {100, 32, 1e-2, 5e-4, OptimizerKind::sgd_nesterov, 4}, d);
  EXPECT_GE(accuracy(net, d), 0.99);
}

TEST(Train, ZeroEpochsReturnsInitialization) {
  const MlpConfig cfg{2, {8}, 2, true, 5};
  const Dataset d = separable_blobs(20, 3);
  TrainConfig t;
  t.epochs = 0;
  const Mlp net = train_map(cfg, t, d);
  const Mlp init = init_mlp(cfg);
  EXPECT_EQ(net.head, init.head);
  EXPECT_EQ(net.hidden[0].weight, init.hidden[0].weight);
}

TEST(Train, DeterministicGivenSeeds) {
  const Dataset d = separable_blobs(100, 4);
  const MlpConfig cfg{2, {8, 8}, 2, true, 9};
  const TrainConfig t{20, 16, 1e-2, 5e-4, OptimizerKind::adam, 2};
  const Mlp a = train_map(cfg, t, d);
  const Mlp b = train_map(cfg, t, d);
  EXPECT_EQ(a.head, b.head);
  for (std::size_t l = 0; l < a.hidden.size(); ++l) {
    EXPECT_EQ(a.hidden[l].weight, b.hidden[l].weight);
    EXPECT_EQ(a.hidden[l].bias, b.hidden[l].bias);
  }
}

TEST(Train, ClassCountMismatchThrows) {
  const Dataset d = separable_blobs(20, 4);
  EXPECT_THROW(train_map({2, {4}, 3, true, 0}, {}, d), ConfigMismatch);
}

TEST(Ensemble, SingletonEqualsTrainMap) {
  const Dataset d = separable_blobs(60, 5);
  const MlpConfig cfg{2, {8}, 2, true, 1};
  const TrainConfig t{10, 16, 1e-2, 5e-4, OptimizerKind::adam, 1};
  const auto nets = train_ensemble(cfg, t, d, 1);
  ASSERT_EQ(nets.size(), 1u);
  EXPECT_EQ(nets[0].head, train_map(cfg, t, d).head);
}

TEST(Ensemble, MembersFitAndDiffer) {
  const Dataset d = separable_blobs(200, 6);
  const auto nets = train_ensemble({2, {16, 16}, 2, true, 1}, {100, 32, 1e-2, 5e-4, OptimizerKind::adam, 1}, d, 5);
  ASSERT_EQ(nets.size(), 5u);
  for (std::size_t i = 0; i < nets.size(); ++i) {
    EXPECT_GE(accuracy(nets[i], d), 0.99);
    for (std::size_t j = 0; j < i; ++j) EXPECT_NE(nets[i].head, nets[j].head);
  }
}
