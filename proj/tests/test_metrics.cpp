#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "mola/metrics.hpp"
#include "mola/rng.hpp"
#include "oracles.hpp"

using namespace mola;

namespace {

PredictionBatch batch(Matrix probs, std::vector<std::size_t> labels) { return {std::move(probs), std::move(labels)}; }

PredictionBatch uniform(std::size_t n, std::size_t c) {
  Matrix p(n, c);
  for (double& v : p.data()) v = 1.0 / static_cast<double>(c);
  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = i % c;
  return batch(std::move(p), std::move(y));
}

PredictionBatch random_batch(std::size_t n, std::size_t c, Rng& rng) {
  Matrix p(n, c);
  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += (p(i, k) = std::exp(3.0 * rng.normal()));
    for (std::size_t k = 0; k < c; ++k) p(i, k) /= s;
    y[i] = rng.below(c);
  }
  return batch(std::move(p), std::move(y));
}

/// Two-class rows whose max-class confidence is `conf`.
PredictionBatch with_confidences(const Vector& conf, const std::vector<bool>& correct) {
  Matrix p(conf.size(), 2);
  std::vector<std::size_t> y(conf.size());
  for (std::size_t i = 0; i < conf.size(); ++i) {
    p(i, 0) = conf[i];
    p(i, 1) = 1.0 - conf[i];
    y[i] = correct[i] ? 0 : 1;
  }
  return batch(std::move(p), std::move(y));
}

}  // namespace

TEST(Nll, HandCases) {
  EXPECT_EQ(nll(batch(Matrix{{1, 0}, {0, 1}}, {0, 1})), 0.0);
  EXPECT_NEAR(nll(uniform(7, 10)), std::log(10.0), 1e-12);
  EXPECT_NEAR(nll(batch(Matrix{{0.5, 0.5}, {0.75, 0.25}}, {0, 1})), (std::log(2.0) + std::log(4.0)) / 2.0, 1e-15);
  EXPECT_NEAR(nll(batch(Matrix{{0.5, 0.5}, {0.75, 0.25}}, {0, 1})), 1.0397, 1e-4);
}

TEST(Nll, ClampsZeroProbability) {
  EXPECT_NEAR(nll(batch(Matrix{{1, 0}}, {1})), -std::log(1e-12), 1e-9);
}

TEST(Nll, StrictlyDecreasingInCorrectProbability) {
  double prev = std::numeric_limits<double>::infinity();
  for (double p = 0.05; p <= 1.0; p += 0.05) {
    const double v = nll(batch(Matrix{{p, 1 - p}, {0.3, 0.7}}, {0, 1}));
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(Brier, HandCases) {
  EXPECT_EQ(brier(batch(Matrix{{1, 0}, {0, 1}}, {0, 1})), 0.0);
  EXPECT_NEAR(brier(uniform(5, 2)), 0.5, 1e-12);
  EXPECT_NEAR(brier(batch(Matrix{{0.8, 0.2}}, {0})), 0.08, 1e-15);
  EXPECT_EQ(brier(batch(Matrix{{0, 1}}, {0})), 2.0);
}

TEST(Ece, HandCases) {
  EXPECT_EQ(ece(batch(Matrix{{1, 0}, {0, 1}}, {0, 1})), 0.0);
  const auto half = with_confidences(Vector(10, 0.9), {true, false, true, false, true, false, true, false, true, false});
  EXPECT_NEAR(ece(half), 0.4, 1e-12);
  EXPECT_NEAR(mce(half), 0.4, 1e-12);
}

TEST(Ece, ConfidenceOneFallsInTopBin) {
  const auto b = with_confidences(Vector{1.0, 1.0}, {true, true});
  const auto bins = reliability_bins(b, 15);
  EXPECT_EQ(bins.back().count, 2u);
}

TEST(Ece, SingleBinIsAccuracyMinusMmc) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto b = random_batch(50, 4, rng);
    EXPECT_NEAR(ece(b, 1), std::abs(accuracy(b) - mmc(b)), 1e-12);
  }
}

TEST(Mce, TwoBinsHandCase) {
  // Ten bins: conf 0.6 all correct (gap 0.4) and conf 0.9 all correct (gap 0.1).
  const auto b = with_confidences(Vector{0.6, 0.6, 0.6, 0.6, 0.9, 0.9}, {true, true, true, true, true, true});
  EXPECT_NEAR(mce(b, 10), 0.4, 1e-12);
  EXPECT_NEAR(ece(b, 10), (4 * 0.4 + 2 * 0.1) / 6.0, 1e-12);
}

TEST(Mce, AtLeastEce) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto b = random_batch(30 + 10 * trial, 3, rng);
    for (std::size_t bins : {1u, 5u, 15u, 40u}) EXPECT_GE(mce(b, bins), ece(b, bins));
  }
}

TEST(Mmc, HandCases) {
  EXPECT_NEAR(mmc(uniform(3, 4)), 0.25, 1e-15);
  EXPECT_EQ(mmc(batch(Matrix{{0, 1, 0}}, {1})), 1.0);
  EXPECT_NEAR(mmc(PredictionBatch{Matrix{{0.9, 0.1}, {0.6, 0.4}}, std::nullopt}), 0.75, 1e-15);
}

TEST(Auroc, HandCases) {
  EXPECT_EQ(auroc(Vector{0.9, 0.8}, Vector{0.1, 0.2}), 1.0);
  EXPECT_EQ(auroc(Vector{0.1, 0.2}, Vector{0.9, 0.8}), 0.0);
  EXPECT_EQ(auroc(Vector{0.3, 0.5, 0.5}, Vector{0.5, 0.3, 0.5}), 0.5);
  EXPECT_EQ(auroc(Vector{0.9, 0.4}, Vector{0.5, 0.3}), 0.75);
  EXPECT_EQ(auroc(Vector{0.5}, Vector{0.5}), 0.5);
}

TEST(Auroc, EqualsBruteForceExactly) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(1000);
    const std::size_t m = 1 + rng.below(1000);
    Vector in(n), out(m);
    // Coarse grid forces many ties.
    const double grid = trial % 2 == 0 ? 20.0 : 1e6;
    for (double& v : in) v = std::round(rng.uniform() * grid) / grid;
    for (double& v : out) v = std::round(rng.uniform() * 0.8 * grid) / grid;
    EXPECT_EQ(auroc(in, out), oracle::brute_auroc(in, out)) << "trial " << trial;
  }
}

TEST(Auroc, Errors) {
  EXPECT_THROW(auroc(Vector{}, Vector{0.1}), EmptyInput);
  EXPECT_THROW(auroc(Vector{0.1}, Vector{}), EmptyInput);
}

TEST(Metrics, PermutationInvariant) {
  Rng rng(4);
  const auto b = random_batch(200, 5, rng);
  std::vector<std::size_t> perm(200);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(std::span<std::size_t>(perm));
  PredictionBatch p{Matrix(200, 5), std::vector<std::size_t>(200)};
  for (std::size_t i = 0; i < 200; ++i) {
    for (std::size_t c = 0; c < 5; ++c) p.probs(i, c) = b.probs(perm[i], c);
    (*p.labels)[i] = (*b.labels)[perm[i]];
  }
  const auto a = evaluate(b);
  const auto q = evaluate(p);
  EXPECT_EQ(a.accuracy, q.accuracy);
  EXPECT_NEAR(a.nll, q.nll, 1e-12);
  EXPECT_NEAR(a.brier, q.brier, 1e-12);
  EXPECT_NEAR(a.ece, q.ece, 1e-12);
  EXPECT_NEAR(a.mce, q.mce, 1e-12);
  EXPECT_NEAR(a.mmc, q.mmc, 1e-12);
}

TEST(Metrics, ReportWithinRanges) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto r = evaluate(random_batch(100, 3, rng));
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);
    EXPECT_GE(r.nll, 0.0);
    EXPECT_GE(r.brier, 0.0);
    EXPECT_LE(r.brier, 2.0);
    EXPECT_LE(r.ece, 1.0);
    EXPECT_LE(r.mce, 1.0);
    EXPECT_GE(r.mmc, 1.0 / 3.0);
    EXPECT_LE(r.mmc, 1.0);
  }
}

TEST(Metrics, MissingLabelsAndEmpty) {
  const PredictionBatch unlabeled{Matrix{{0.5, 0.5}}, std::nullopt};
  EXPECT_THROW(nll(unlabeled), MissingLabels);
  EXPECT_THROW(brier(unlabeled), MissingLabels);
  EXPECT_THROW(ece(unlabeled), MissingLabels);
  EXPECT_THROW(accuracy(unlabeled), MissingLabels);
  EXPECT_NO_THROW(mmc(unlabeled));
  EXPECT_THROW(mmc(PredictionBatch{Matrix(0, 2), std::nullopt}), EmptyInput);
  EXPECT_THROW(nll(PredictionBatch{Matrix(0, 2), std::vector<std::size_t>{}}), EmptyInput);
  EXPECT_THROW(ece(uniform(2, 2), 0), InvalidConfig);
}

TEST(MetricsCsv, RowLayout) {
  std::ostringstream os;
  write_metrics_row(os, make_row("MoLA", "blobs", 3, 7, evaluate(uniform(4, 2))));
  EXPECT_EQ(os.str(), "MoLA,blobs,3,7,0.5,0.6931471805599453,0.5,0,0,0.5,\n");
  MetricsRow ood{"DE", "far_box", 0, 1, std::nullopt, 0.75, 0.5};
  std::ostringstream o2;
  write_metrics_row(o2, ood);
  EXPECT_EQ(o2.str(), "DE,far_box,0,1,,,,,,0.75,0.5\n");
}

TEST(MetricsCsv, FormatRoundTrips) {
  Rng rng(6);
  for (int i = 0; i < 1000; ++i) {
    const double v = std::exp(20.0 * rng.normal());
    EXPECT_EQ(std::stod(format_real(v)), v);
  }
}
