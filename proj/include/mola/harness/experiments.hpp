#pragma once

// Desk-scale experiment pipelines: dataset shift, OOD detection, the
// Hessian × predictive variation study, the ensemble-size sweep and the
// far-away bound check. All randomness derives from the configured seeds.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mola/bounds.hpp"
#include "mola/harness/config.hpp"
#include "mola/harness/data.hpp"
#include "mola/harness/tuning.hpp"
#include "mola/laplace.hpp"
#include "mola/metrics.hpp"
#include "mola/mixture.hpp"
#include "mola/nn.hpp"

namespace mola::harness {

/// Derive an independent stream seed from a run seed and a purpose tag.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed * 0x9e3779b97f4a7c15ULL + tag * 0xd1b54a32d192ed03ULL + 0x632be59bd9b4e019ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

enum SeedTag : std::uint64_t {
  kTagTrainData = 1,
  kTagHoldout = 2,
  kTagSplit = 3,
  kTagInit = 4,
  kTagShuffle = 5,
  kTagKfac = 6,
  kTagPredict = 7,
  kTagOod = 10,
  kTagShift = 20,
};

/// Everything that depends only on (config, seed): data, trained members and
/// their Hessians.
struct SeedRun {
  std::uint64_t seed = 0;
  Dataset train;
  Dataset validation;
  Dataset test;
  std::vector<Mlp> nets;
  std::vector<LaplaceComponent> components;  // fitted at λ = 1; retuned later
  double map_val_accuracy = 0.0;
  double conf_threshold = 0.0;
};

inline SeedRun prepare_seed(const ExperimentConfig& cfg, std::uint64_t seed, std::size_t members,
                            std::optional<bool> use_bias = std::nullopt) {
  SeedRun run;
  run.seed = seed;
  run.train = make_blobs(cfg.train_data, derive_seed(seed, kTagTrainData));
  BlobSpec holdout_spec = cfg.train_data;
  holdout_spec.n = cfg.n_holdout;
  auto held = split_validation(make_blobs(holdout_spec, derive_seed(seed, kTagHoldout)), cfg.tune.val_fraction,
                               cfg.tune.val_size, derive_seed(seed, kTagSplit));
  run.validation = std::move(held.validation);
  run.test = std::move(held.test);

  MlpConfig mc = cfg.model;
  if (use_bias) mc.use_bias = *use_bias;
  mc.seed = derive_seed(seed, kTagInit);
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(seed, kTagShuffle);
  run.nets = train_ensemble(mc, tc, run.train, members);

  for (std::size_t k = 0; k < run.nets.size(); ++k)
    run.components.push_back(fit(run.nets[k], run.train, cfg.laplace.structure, 1.0,
                                 cfg.fit_options(derive_seed(seed, kTagKfac) + k)));

  run.map_val_accuracy = accuracy(run.nets.front(), run.validation);
  run.conf_threshold = cfg.tune.conf_threshold.value_or(run.map_val_accuracy - 0.01);
  return run;
}

// Predictors hold references; the networks and models must outlive them.
using Predictor = std::function<Matrix(const Dataset&)>;

inline Matrix predict_rows(const Dataset& data, const std::function<Vector(std::span<const double>, std::size_t)>& f) {
  Matrix probs;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Vector p = f(data.input(i), i);
    if (i == 0) probs = Matrix(data.size(), p.size());
    std::copy(p.begin(), p.end(), probs.row(i).begin());
  }
  return probs;
}

inline Predictor map_predictor(const Mlp& net) {
  return [&net](const Dataset& d) {
    return predict_rows(d, [&](std::span<const double> x, std::size_t) { return map_predict(net, x); });
  };
}

inline Predictor de_predictor(std::span<const Mlp> nets) {
  return [nets](const Dataset& d) {
    return predict_rows(d, [&](std::span<const double> x, std::size_t) { return de_predict(nets, x); });
  };
}

/// Mixture predictions; MC seeds vary per test row.
inline Predictor mola_predictor(const MolaModel& model, PredictiveMethod method) {
  return [&model, method](const Dataset& d) {
    return predict_rows(d, [&](std::span<const double> x, std::size_t i) {
      PredictiveMethod m = method;
      m.seed = method.seed + i;
      return mola_predict(model, x, m);
    });
  };
}

inline MixtureWeights choose_weights(const ExperimentConfig& cfg, std::span<const LaplaceComponent> comps) {
  return cfg.laplace.weighting == Weighting::evidence ? weights_evidence(comps) : weights_uniform(comps.size());
}

/// Tune one λ for the given components and return the refitted mixture.
inline MolaModel tuned_mixture(const ExperimentConfig& cfg, const SeedRun& run, std::span<const LaplaceComponent> comps,
                               const PredictiveMethod& method, TuneResult* result = nullptr) {
  const MixtureWeights w0 = choose_weights(cfg, comps);
  const TuneResult tr = tune_prior_precision(comps, w0, run.validation, cfg.tune, run.conf_threshold, method);
  if (result) *result = tr;
  auto refit = refit_all(comps, tr.lambda);
  MixtureWeights w = choose_weights(cfg, refit);
  return make_mola(std::move(refit), std::move(w));
}

/// Run fn for each seed index, at most MOLA_KIT_THREADS at a time, handing
/// results to sink strictly in seed order.
template <typename Result>
void for_each_seed(std::size_t n, const std::function<Result(std::size_t)>& fn,
                   const std::function<void(std::size_t, Result&)>& sink) {
  std::size_t threads = 1;
  if (const char* env = std::getenv("MOLA_KIT_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 1) threads = static_cast<std::size_t>(v);
  }
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      Result r = fn(i);
      sink(i, r);
    }
    return;
  }

  std::vector<std::optional<Result>> done(n);
  std::size_t next_out = 0;
  std::atomic<std::size_t> next_in{0};
  std::mutex mu;
  std::exception_ptr failure;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next_in++; i < n; i = next_in++) {
        try {
          Result r = fn(i);
          std::lock_guard lock(mu);
          done[i] = std::move(r);
          while (next_out < n && done[next_out]) {
            sink(next_out, *done[next_out]);
            done[next_out].reset();
            ++next_out;
          }
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

using RowSink = std::function<void(const std::vector<MetricsRow>&)>;

inline std::string dataset_label(const ExperimentConfig& cfg) { return std::string("blobs-") + to_string(cfg.shift); }

inline Dataset shifted_test(const ExperimentConfig& cfg, const SeedRun& run, int severity) {
  return apply_shift(run.test, ShiftSpec{cfg.shift, severity, std::nullopt},
                     derive_seed(run.seed, kTagShift + static_cast<std::uint64_t>(severity)));
}

inline std::vector<MetricsRow> evaluate_over_severities(const ExperimentConfig& cfg, const SeedRun& run,
                                                        const std::vector<std::pair<std::string, Predictor>>& methods) {
  std::vector<MetricsRow> rows;
  for (int s = 0; s <= 5; ++s) {
    const Dataset shifted = shifted_test(cfg, run, s);
    for (const auto& [name, predictor] : methods) {
      const PredictionBatch batch{predictor(shifted), shifted.y};
      rows.push_back(make_row(name, dataset_label(cfg), s, run.seed, evaluate(batch, cfg.ece_bins)));
    }
  }
  return rows;
}

struct SeedOutcome {
  std::vector<MetricsRow> rows;
};

/// MAP, DE, LLLA (first member only) and MoLA on the shifted test set,
/// severities 0..5. Returns all rows in (seed, severity, method) order.
inline std::vector<MetricsRow> run_shift_experiment(const ExperimentConfig& cfg, const RowSink& sink = {}) {
  cfg.validate();
  std::vector<MetricsRow> all;
  for_each_seed<SeedOutcome>(
      cfg.seeds.size(),
      [&](std::size_t i) {
        const std::uint64_t seed = cfg.seeds[i];
        const SeedRun run = prepare_seed(cfg, seed, cfg.ensemble_size);
        const PredictiveMethod method = cfg.predictive(derive_seed(seed, kTagPredict));
        const MolaModel llla = tuned_mixture(cfg, run, std::span(run.components).first(1), method);
        const MolaModel mola = tuned_mixture(cfg, run, run.components, method);
        const std::vector<std::pair<std::string, Predictor>> methods{
            {"MAP", map_predictor(run.nets.front())},
            {"DE", de_predictor(run.nets)},
            {"LLLA", mola_predictor(llla, method)},
            {"MoLA", mola_predictor(mola, method)}};
        return SeedOutcome{evaluate_over_severities(cfg, run, methods)};
      },
      [&](std::size_t, SeedOutcome& out) {
        if (sink) sink(out.rows);
        all.insert(all.end(), out.rows.begin(), out.rows.end());
      });
  return all;
}

/// In-distribution MMC plus per-OOD-set MMC and AUROC (in-distribution
/// confidence as the positive score).
inline std::vector<MetricsRow> run_ood_experiment(const ExperimentConfig& cfg, const RowSink& sink = {}) {
  cfg.validate();
  std::vector<MetricsRow> all;
  for_each_seed<SeedOutcome>(
      cfg.seeds.size(),
      [&](std::size_t i) {
        const std::uint64_t seed = cfg.seeds[i];
        const SeedRun run = prepare_seed(cfg, seed, cfg.ensemble_size);
        const PredictiveMethod method = cfg.predictive(derive_seed(seed, kTagPredict));
        const MolaModel llla = tuned_mixture(cfg, run, std::span(run.components).first(1), method);
        const MolaModel mola = tuned_mixture(cfg, run, run.components, method);
        const std::vector<std::pair<std::string, Predictor>> methods{
            {"MAP", map_predictor(run.nets.front())},
            {"DE", de_predictor(run.nets)},
            {"LLLA", mola_predictor(llla, method)},
            {"MoLA", mola_predictor(mola, method)}};

        std::vector<Dataset> ood;
        for (std::size_t o = 0; o < cfg.ood_sets.size(); ++o)
          ood.push_back(make_ood(run.train, cfg.ood_sets[o], cfg.n_ood, derive_seed(seed, kTagOod + o)));

        SeedOutcome out;
        for (const auto& [name, predictor] : methods) {
          const PredictionBatch in_batch{predictor(run.test), run.test.y};
          const Vector in_conf = confidences(in_batch);
          out.rows.push_back(make_row(name, "blobs", 0, seed, evaluate(in_batch, cfg.ece_bins)));
          for (std::size_t o = 0; o < ood.size(); ++o) {
            const PredictionBatch out_batch{predictor(ood[o]), std::nullopt};
            const Vector out_conf = confidences(out_batch);
            out.rows.push_back(
                {name, to_string(cfg.ood_sets[o]), 0, seed, std::nullopt, mmc(out_batch), auroc(in_conf, out_conf)});
          }
        }
        return out;
      },
      [&](std::size_t, SeedOutcome& out) {
        if (sink) sink(out.rows);
        all.insert(all.end(), out.rows.begin(), out.rows.end());
      });
  return all;
}

/// The six single-component variants {diag, kfac, full} × {MC, MPA}, each
/// with its own tuned λ.
inline std::vector<MetricsRow> run_variation_study(const ExperimentConfig& cfg, const RowSink& sink = {}) {
  cfg.validate();
  std::vector<MetricsRow> all;
  for_each_seed<SeedOutcome>(
      cfg.seeds.size(),
      [&](std::size_t i) {
        const std::uint64_t seed = cfg.seeds[i];
        ExperimentConfig one = cfg;
        one.laplace.weighting = Weighting::uniform;
        SeedRun run = prepare_seed(one, seed, 1);
        SeedOutcome out;
        for (HessianKind kind : {HessianKind::diag, HessianKind::kfac, HessianKind::full}) {
          run.components = {fit(run.nets.front(), run.train, kind, 1.0, one.fit_options(derive_seed(seed, kTagKfac)))};
          for (PredictiveKind pk : {PredictiveKind::mc, PredictiveKind::probit}) {
            const PredictiveMethod method{pk, cfg.laplace.mc_samples, derive_seed(seed, kTagPredict)};
            const MolaModel model = tuned_mixture(one, run, run.components, method);
            const std::string name = std::string("LLLA[") + io::to_string(kind) + "," +
                                     (pk == PredictiveKind::mc ? "MC" : "MPA") + "]";
            const auto rows = evaluate_over_severities(one, run, {{name, mola_predictor(model, method)}});
            out.rows.insert(out.rows.end(), rows.begin(), rows.end());
          }
        }
        std::stable_sort(out.rows.begin(), out.rows.end(),
                         [](const MetricsRow& a, const MetricsRow& b) { return a.severity < b.severity; });
        return out;
      },
      [&](std::size_t, SeedOutcome& out) {
        if (sink) sink(out.rows);
        all.insert(all.end(), out.rows.begin(), out.rows.end());
      });
  return all;
}

/// DE and MoLA with 1..max_k members drawn from one trained pool per seed.
inline std::vector<MetricsRow> run_ensemble_sweep(const ExperimentConfig& cfg, std::size_t max_k = 10,
                                                  const RowSink& sink = {}) {
  cfg.validate();
  std::vector<MetricsRow> all;
  for_each_seed<SeedOutcome>(
      cfg.seeds.size(),
      [&](std::size_t i) {
        const std::uint64_t seed = cfg.seeds[i];
        const SeedRun run = prepare_seed(cfg, seed, max_k);
        const PredictiveMethod method = cfg.predictive(derive_seed(seed, kTagPredict));
        SeedOutcome out;
        for (std::size_t k = 1; k <= max_k; ++k) {
          const auto nets = std::span(run.nets).first(k);
          const MolaModel mola = tuned_mixture(cfg, run, std::span(run.components).first(k), method);
          const auto rows = evaluate_over_severities(
              cfg, run,
              {{"DE-K" + std::to_string(k), de_predictor(nets)}, {"MoLA-K" + std::to_string(k), mola_predictor(mola, method)}});
          out.rows.insert(out.rows.end(), rows.begin(), rows.end());
        }
        return out;
      },
      [&](std::size_t, SeedOutcome& out) {
        if (sink) sink(out.rows);
        all.insert(all.end(), out.rows.begin(), out.rows.end());
      });
  return all;
}

struct BoundCheckResult {
  FarAwayReport report;
  MolaModel model;
  Mlp map_net;
  Vector x_star;
  TuneResult tune;
};

/// Train bias-free members, fit and tune MoLA, then sweep δ·x* with x* a
/// training input.
inline BoundCheckResult run_bound_check(const ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const SeedRun run = prepare_seed(cfg, seed, cfg.ensemble_size, /*use_bias=*/false);
  TuneResult tr;
  MolaModel model = tuned_mixture(cfg, run, run.components, {PredictiveKind::probit, 1, 0}, &tr);
  const std::size_t idx = std::min(cfg.bound_check.point_index, run.train.size() - 1);
  const auto x = run.train.input(idx);
  Vector x_star(x.begin(), x.end());
  FarAwayReport rep = verify_far_away(model, run.nets.front(), x_star, cfg.bound_check.deltas);
  return {std::move(rep), std::move(model), run.nets.front(), std::move(x_star), tr};
}

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows, bool header = true) {
  if (header) os << kMetricsCsvHeader << '\n';
  for (const auto& r : rows) write_metrics_row(os, r);
}

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  write_metrics_csv(os, rows);
  return os.str();
}

/// Mean and standard error over seeds for each (method, dataset, severity).
inline void write_summary_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
  static constexpr const char* names[] = {"accuracy", "nll", "brier", "ece", "mce", "mmc", "auroc"};
  std::vector<std::tuple<std::string, std::string, int>> order;
  std::map<std::tuple<std::string, std::string, int>, std::vector<std::vector<double>>> groups;
  for (const auto& r : rows) {
    const auto key = std::make_tuple(r.method, r.dataset, r.severity);
    auto [it, inserted] = groups.try_emplace(key, std::vector<std::vector<double>>(7));
    if (inserted) order.push_back(key);
    auto& cols = it->second;
    if (r.labeled) {
      cols[0].push_back(r.labeled->accuracy);
      cols[1].push_back(r.labeled->nll);
      cols[2].push_back(r.labeled->brier);
      cols[3].push_back(r.labeled->ece);
      cols[4].push_back(r.labeled->mce);
    }
    cols[5].push_back(r.mmc);
    if (r.auroc) cols[6].push_back(*r.auroc);
  }
  os << "method,dataset,severity,n_seeds";
  for (const char* n : names) os << ',' << n << "_mean," << n << "_stderr";
  os << '\n';
  for (const auto& key : order) {
    const auto& cols = groups[key];
    os << std::get<0>(key) << ',' << std::get<1>(key) << ',' << std::get<2>(key) << ',' << cols[5].size();
    for (const auto& c : cols) {
      if (c.empty()) {
        os << ",,";
        continue;
      }
      const double n = static_cast<double>(c.size());
      double mean = 0.0;
      for (double v : c) mean += v;
      mean /= n;
      double var = 0.0;
      for (double v : c) var += (v - mean) * (v - mean);
      const double se = c.size() > 1 ? std::sqrt(var / (n - 1.0) / n) : 0.0;
      os << ',' << format_real(mean) << ',' << format_real(se);
    }
    os << '\n';
  }
}

}  // namespace mola::harness
