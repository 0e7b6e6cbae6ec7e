#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>

#include "mola/harness/config.hpp"
#include "mola/harness/experiments.hpp"

using namespace mola;
using namespace mola::harness;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig cfg;
  cfg.train_data.n = 300;
  cfg.n_holdout = 300;
  cfg.n_ood = 100;
  cfg.train.epochs = 20;
  cfg.ensemble_size = 3;
  cfg.tune.grid_steps = 20;
  cfg.seeds = {0, 1};
  return cfg;
}

/// Linear head on raw inputs with H = 0, so Σ = I/λ.
LaplaceComponent isotropic_component(std::uint64_t seed) {
  Mlp net = init_mlp({2, {}, 3, false, seed});
  Rng rng(seed);
  for (double& w : net.head.data()) w = rng.normal();
  return fit_from_hessian(std::move(net), FullHessian{Matrix(6, 6)}, 1, 0.0, 1.0);
}

double mean_accuracy(const Mlp& net, const Dataset& d) { return accuracy(net, d); }

}  // namespace

TEST(Blobs, DeterministicAndBalanced) {
  const BlobSpec spec{4, 103, 3, 1.0, 6.0};
  const Dataset a = make_blobs(spec, 5);
  const Dataset b = make_blobs(spec, 5);
  EXPECT_EQ(a.x, b.x);
  EXPECT_EQ(a.y, b.y);
  EXPECT_NE(a.x, make_blobs(spec, 6).x);
  std::vector<std::size_t> counts(4, 0);
  for (auto y : a.y) ++counts[y];
  for (auto c : counts) EXPECT_LE(std::max(c, counts[0]) - std::min(c, counts[0]), 1u);
  EXPECT_EQ(a.dim(), 3u);
}

TEST(Blobs, ZeroSpreadIsLinearlySeparable) {
  const Dataset d = make_blobs({3, 90, 2, 0.0, 6.0}, 1);
  const auto nets = train_ensemble({2, {16}, 3, true, 0}, {200, 32, 1e-2, 0.0, OptimizerKind::adam, 0}, d, 1);
  EXPECT_EQ(mean_accuracy(nets[0], d), 1.0);
}

TEST(Blobs, InvalidSpecsThrow) {
  EXPECT_THROW(make_blobs({1, 10, 2, 1.0, 6.0}, 0), InvalidConfig);
  EXPECT_THROW(make_blobs({3, 10, 1, 1.0, 6.0}, 0), InvalidConfig);
  EXPECT_THROW(make_blobs({3, 0, 2, 1.0, 6.0}, 0), InvalidConfig);
}

TEST(Shift, SeverityZeroIsIdentity) {
  const Dataset d = make_blobs({3, 50, 2, 1.0, 6.0}, 2);
  for (ShiftKind k : {ShiftKind::rotate, ShiftKind::gaussian_noise, ShiftKind::scale})
    EXPECT_EQ(apply_shift(d, {k, 0, std::nullopt}, 9).x, d.x);
}

TEST(Shift, HalfTurnTwiceReturnsOriginal) {
  const Dataset d = make_blobs({3, 50, 3, 1.0, 6.0}, 2);
  const ShiftSpec half{ShiftKind::rotate, 0, 180.0};
  const Dataset back = apply_shift(apply_shift(d, half, 0), half, 0);
  for (std::size_t i = 0; i < d.x.data().size(); ++i) EXPECT_NEAR(back.x.data()[i], d.x.data()[i], 1e-12);
  EXPECT_EQ(back.y, d.y);
}

TEST(Shift, RotationPreservesNorms) {
  const Dataset d = make_blobs({3, 40, 2, 1.0, 6.0}, 3);
  const Dataset r = apply_shift(d, {ShiftKind::rotate, 4, std::nullopt}, 0);
  for (std::size_t n = 0; n < d.size(); ++n) EXPECT_NEAR(norm2(r.input(n)), norm2(d.input(n)), 1e-12);
}

TEST(Shift, NoiseIsSeededAndScaleMultiplies) {
  const Dataset d = make_blobs({3, 40, 2, 1.0, 6.0}, 3);
  const ShiftSpec noise{ShiftKind::gaussian_noise, 3, std::nullopt};
  EXPECT_EQ(apply_shift(d, noise, 4).x, apply_shift(d, noise, 4).x);
  EXPECT_NE(apply_shift(d, noise, 4).x, apply_shift(d, noise, 5).x);
  const Dataset s = apply_shift(d, {ShiftKind::scale, 2, std::nullopt}, 0);
  EXPECT_EQ(s.x, d.x * 2.0);
}

TEST(Shift, ErrorsAndSeverityMapping) {
  Dataset one_d{Matrix(3, 1), {0, 1, 0}, 2};
  EXPECT_THROW(apply_shift(one_d, {ShiftKind::rotate, 1, std::nullopt}, 0), UnsupportedDim);
  EXPECT_THROW(apply_shift(one_d, {ShiftKind::rotate, 6, std::nullopt}, 0), InvalidConfig);
  EXPECT_EQ((ShiftSpec{ShiftKind::rotate, 5, std::nullopt}).parameter(), 150.0);
  EXPECT_EQ((ShiftSpec{ShiftKind::scale, 2, std::nullopt}).parameter(), 2.0);
}

TEST(Ood, FarBoxIsFarAndSeeded) {
  const Dataset d = make_blobs({3, 100, 2, 1.0, 6.0}, 1);
  const Dataset o = make_ood(d, OodKind::far_box, 77, 3);
  EXPECT_EQ(o.size(), 77u);
  const double r = max_row_norm(d.x);
  for (std::size_t n = 0; n < o.size(); ++n) {
    EXPECT_GE(norm2(o.input(n)), 10.0 * r * (1.0 - 1e-12));
    EXPECT_LE(norm2(o.input(n)), 20.0 * r * (1.0 + 1e-12));
  }
  EXPECT_EQ(o.x, make_ood(d, OodKind::far_box, 77, 3).x);
}

TEST(Ood, ExtraBlobSitsNearCentroid) {
  const Dataset d = make_blobs({3, 300, 2, 1.0, 6.0}, 1);
  const Dataset o = make_ood(d, OodKind::extra_blob, 300, 4);
  Vector mean(2, 0.0);
  for (std::size_t n = 0; n < o.size(); ++n)
    for (std::size_t j = 0; j < 2; ++j) mean[j] += o.x(n, j) / 300.0;
  EXPECT_LT(norm2(mean), 0.5);
}

TEST(Split, DisjointAndCapped) {
  const Dataset d = make_blobs({3, 100, 2, 1.0, 6.0}, 1);
  const HeldOut h = split_validation(d, 0.2, 1000, 7);
  EXPECT_EQ(h.validation.size(), 20u);
  EXPECT_EQ(h.test.size(), 80u);
  EXPECT_EQ(split_validation(d, 0.5, 10, 7).validation.size(), 10u);
  EXPECT_THROW(split_validation(d, 0.0, 10, 7), InvalidConfig);
}

TEST(Tuning, GridEndpointsAndSpacing) {
  const TuneConfig cfg;
  const auto g = cfg.grid();
  ASSERT_EQ(g.size(), 100u);
  EXPECT_EQ(g.front(), 1e-4);
  EXPECT_EQ(g.back(), 1e3);
  for (std::size_t i = 2; i < g.size(); ++i) EXPECT_NEAR(g[i] / g[i - 1], g[1] / g[0], 1e-9);
}

TEST(Tuning, ThresholdZeroReturnsGridStart) {
  const std::vector<LaplaceComponent> comps{isotropic_component(1)};
  const Dataset val = make_blobs({3, 30, 2, 1.0, 6.0}, 2);
  const auto r = tune_prior_precision(comps, weights_uniform(1), val, TuneConfig{}, 0.0);
  EXPECT_TRUE(r.qualified);
  EXPECT_EQ(r.lambda, 1e-4);
}

TEST(Tuning, UnreachableThresholdFlagsRun) {
  const std::vector<LaplaceComponent> comps{isotropic_component(1)};
  const Dataset val = make_blobs({3, 30, 2, 1.0, 6.0}, 2);
  TuneConfig cfg;
  cfg.grid_steps = 10;
  const auto r = tune_prior_precision(comps, weights_uniform(1), val, cfg, 1.01);
  EXPECT_FALSE(r.qualified);
  EXPECT_EQ(r.lambda, 1e3);
}

TEST(Tuning, ChosenLambdaIsFirstQualifyingGridPoint) {
  const std::vector<LaplaceComponent> comps{isotropic_component(3), isotropic_component(4)};
  const Dataset val = make_blobs({3, 60, 2, 1.0, 6.0}, 2);
  TuneConfig cfg;
  cfg.grid_steps = 30;
  const auto w = weights_uniform(2);
  const auto r = tune_prior_precision(comps, w, val, cfg, 0.6);
  ASSERT_TRUE(r.qualified);
  const auto g = cfg.grid();
  const auto it = std::find(g.begin(), g.end(), r.lambda);
  ASSERT_NE(it, g.end());
  EXPECT_GE(r.val_mmc, 0.6);
  if (it != g.begin()) {
    const MolaModel below = make_mola(refit_all(comps, *(it - 1)), w);
    const Predictor p = mola_predictor(below, {});
    EXPECT_LT(mmc(PredictionBatch{p(val), val.y}), 0.6);
  }
}

TEST(Tuning, MmcNonDecreasingInLambdaForIsotropicComponents) {
  const std::vector<LaplaceComponent> comps{isotropic_component(5)};
  const Dataset val = make_blobs({3, 60, 2, 1.0, 6.0}, 2);
  double prev = 0.0;
  for (double lambda : TuneConfig{}.grid()) {
    const MolaModel model = make_mola(refit_all(comps, lambda), weights_uniform(1));
    const Predictor p = mola_predictor(model, {});
    const double m = mmc(PredictionBatch{p(val), std::nullopt});
    EXPECT_GE(m, prev - 1e-15);
    prev = m;
  }
}

TEST(Tuning, Errors) {
  const std::vector<LaplaceComponent> comps{isotropic_component(1)};
  const Dataset empty{Matrix(0, 2), {}, 3};
  EXPECT_THROW(tune_prior_precision(comps, weights_uniform(1), empty, TuneConfig{}, 0.5), EmptyValidation);
  TuneConfig bad;
  bad.grid_end = bad.grid_start;
  EXPECT_THROW(bad.validate(), InvalidConfig);
}

TEST(Config, DefaultsAndStrictKeys) {
  const auto cfg = config_from_json(nlohmann::json::object());
  EXPECT_EQ(cfg.ensemble_size, 5u);
  EXPECT_EQ(cfg.seeds.size(), 5u);
  EXPECT_EQ(cfg.tune.grid_steps, 100u);
  EXPECT_EQ(cfg.ece_bins, 15u);
  EXPECT_FALSE(cfg.tune.brier_threshold.has_value());
  EXPECT_THROW(config_from_json({{"ensemble_sise", 3}}), InvalidConfig);
  EXPECT_THROW(config_from_json({{"laplace", {{"structure", "banana"}}}}), InvalidConfig);
  EXPECT_THROW(config_from_json({{"ensemble_size", "three"}}), InvalidConfig);
  EXPECT_THROW(config_from_json({{"laplace", {{"kfac_beta", 1.0}}}}), InvalidConfig);
  const auto c2 = config_from_json({{"tune", {{"conf_threshold", 0.9}}}, {"seeds", {7}}});
  EXPECT_EQ(*c2.tune.conf_threshold, 0.9);
  EXPECT_EQ(c2.seeds, (std::vector<std::uint64_t>{7}));
}

TEST(Config, MissingFileNamesPath) {
  try {
    load_config("/nonexistent/cfg.json");
    FAIL() << "expected InvalidConfig";
  } catch (const InvalidConfig& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/cfg.json"), std::string::npos);
  }
}

TEST(Config, ShippedConfigsLoad) {
  for (const char* name : {"default.json", "smoke.json"}) {
    const auto path = std::filesystem::path(MOLA_SOURCE_DIR) / "configs" / name;
    EXPECT_NO_THROW(load_config(path)) << path;
  }
  const auto d = load_config(std::filesystem::path(MOLA_SOURCE_DIR) / "configs" / "default.json");
  const ExperimentConfig built_in;
  EXPECT_EQ(d.train_data.radius, built_in.train_data.radius);
  EXPECT_EQ(d.ensemble_size, built_in.ensemble_size);
}

TEST(Seeds, DerivedStreamsDiffer) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 10; ++s)
    for (std::uint64_t t = 0; t < 30; ++t) seen.insert(derive_seed(s, t));
  EXPECT_EQ(seen.size(), 300u);
}

class Experiments : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { shift_ = new std::vector<MetricsRow>(run_shift_experiment(small_config())); }
  static void TearDownTestSuite() { delete shift_; }
  static std::vector<MetricsRow>* shift_;
};
std::vector<MetricsRow>* Experiments::shift_ = nullptr;

TEST_F(Experiments, ShiftRowCountAndOrder) {
  ASSERT_EQ(shift_->size(), 2u * 6u * 4u);
  std::set<std::string> methods;
  for (const auto& r : *shift_) {
    methods.insert(r.method);
    EXPECT_EQ(r.dataset, "blobs-rotate");
    ASSERT_TRUE(r.labeled.has_value());
    EXPECT_FALSE(r.auroc.has_value());
  }
  EXPECT_EQ(methods, (std::set<std::string>{"MAP", "DE", "LLLA", "MoLA"}));
  EXPECT_EQ(shift_->front().seed, 0u);
  EXPECT_EQ(shift_->back().seed, 1u);
}

TEST_F(Experiments, DeterministicAcrossRunsAndThreadCounts) {
  const std::string first = metrics_csv(*shift_);
  ::setenv("MOLA_KIT_THREADS", "2", 1);
  const std::string threaded = metrics_csv(run_shift_experiment(small_config()));
  ::unsetenv("MOLA_KIT_THREADS");
  EXPECT_EQ(first, threaded);
}

TEST_F(Experiments, SinkSeesRowsInSeedOrder) {
  ::setenv("MOLA_KIT_THREADS", "2", 1);
  std::vector<std::uint64_t> order;
  run_shift_experiment(small_config(), [&](const std::vector<MetricsRow>& rows) { order.push_back(rows.front().seed); });
  ::unsetenv("MOLA_KIT_THREADS");
  EXPECT_EQ(order, (std::vector<std::uint64_t>{0, 1}));
}

TEST_F(Experiments, MapAndDeIgnoreTuningGrid) {
  ExperimentConfig cfg = small_config();
  cfg.tune.grid_start = 1e-2;
  cfg.tune.grid_end = 1e2;
  const auto other = run_shift_experiment(cfg);
  ASSERT_EQ(other.size(), shift_->size());
  for (std::size_t i = 0; i < other.size(); ++i) {
    if (other[i].method != "MAP" && other[i].method != "DE") continue;
    EXPECT_EQ(other[i].labeled->nll, (*shift_)[i].labeled->nll);
    EXPECT_EQ(other[i].mmc, (*shift_)[i].mmc);
  }
}

TEST(OodExperiment, FarMoLaLessConfidentThanInDistribution) {
  ExperimentConfig cfg = small_config();
  cfg.seeds = {0};
  const auto rows = run_ood_experiment(cfg);
  double in_mmc = -1.0, far_mmc = -1.0;
  for (const auto& r : rows) {
    if (r.method != "MoLA") continue;
    if (r.dataset == "blobs") in_mmc = r.mmc;
    if (r.dataset == "far_box") {
      far_mmc = r.mmc;
      ASSERT_TRUE(r.auroc.has_value());
      EXPECT_GE(*r.auroc, 0.5);
      EXPECT_FALSE(r.labeled.has_value());
    }
  }
  ASSERT_GE(in_mmc, 1.0 / 3.0);
  ASSERT_GE(far_mmc, 0.0);
  EXPECT_LT(far_mmc, in_mmc);
}

TEST(VariationStudy, SixVariantsAndMcNearProbitInDistribution) {
  ExperimentConfig cfg = small_config();
  cfg.seeds = {0};
  cfg.laplace.mc_samples = 1000;
  const auto rows = run_variation_study(cfg);
  ASSERT_EQ(rows.size(), 6u * 6u);
  double mc = -1.0, mpa = -1.0;
  for (const auto& r : rows) {
    if (r.severity != 0) continue;
    if (r.method == "LLLA[full,MC]") mc = r.labeled->nll;
    if (r.method == "LLLA[full,MPA]") mpa = r.labeled->nll;
  }
  ASSERT_GE(mc, 0.0);
  ASSERT_GE(mpa, 0.0);
  EXPECT_NEAR(mc, mpa, 0.05);
}

TEST(EnsembleSweep, RowsPerK) {
  ExperimentConfig cfg = small_config();
  cfg.seeds = {0};
  const auto rows = run_ensemble_sweep(cfg, 3);
  ASSERT_EQ(rows.size(), 3u * 2u * 6u);
  EXPECT_EQ(rows.front().method, "DE-K1");
  EXPECT_EQ(rows.back().method, "MoLA-K3");
}

TEST(SummaryCsv, MeanAndStderr) {
  MetricsReport a{1.0, 0.5, 0.1, 0.0, 0.0, 0.9, 10};
  MetricsReport b{0.5, 1.5, 0.3, 0.0, 0.0, 0.7, 10};
  std::ostringstream os;
  write_summary_csv(os, {make_row("M", "d", 0, 0, a), make_row("M", "d", 0, 1, b)});
  const std::string s = os.str();
  const std::string line = s.substr(s.find('\n') + 1);
  EXPECT_EQ(line.substr(0, line.find(',', line.find(',', line.find(',', 5) + 1) + 1)), "M,d,0,2,0.75");
}
