#pragma once

// Post-hoc prior-precision search: walk a log-spaced grid upwards and keep
// the first λ whose validation predictions are confident enough.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "mola/dataset.hpp"
#include "mola/error.hpp"
#include "mola/laplace.hpp"
#include "mola/metrics.hpp"
#include "mola/mixture.hpp"

namespace mola::harness {

struct TuneConfig {
  double grid_start = 1e-4;
  double grid_end = 1e3;
  std::size_t grid_steps = 100;
  /// Minimum validation MMC; unset means "MAP validation accuracy − 0.01".
  std::optional<double> conf_threshold;
  std::optional<double> brier_threshold;
  double val_fraction = 0.2;
  std::size_t val_size = 2000;

  void validate() const {
    if (!(grid_start > 0.0) || !(grid_start < grid_end)) throw InvalidConfig("tuning grid needs 0 < start < end");
    if (grid_steps < 2) throw InvalidConfig("tuning grid needs at least two steps");
    if (conf_threshold && !(*conf_threshold >= 0.0 && *conf_threshold < 1.0))
      throw InvalidConfig("conf_threshold must lie in [0, 1)");
  }

  [[nodiscard]] std::vector<double> grid() const {
    std::vector<double> g(grid_steps);
    const double lo = std::log(grid_start);
    const double hi = std::log(grid_end);
    for (std::size_t i = 0; i < grid_steps; ++i)
      g[i] = std::exp(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(grid_steps - 1));
    g.front() = grid_start;
    g.back() = grid_end;
    return g;
  }
};

struct TuneResult {
  double lambda = 0.0;
  bool qualified = false;  // false: no grid point met the thresholds, λ = grid_end
  double val_mmc = 0.0;
  double val_brier = 0.0;
};

inline std::vector<LaplaceComponent> refit_all(std::span<const LaplaceComponent> comps, double lambda) {
  std::vector<LaplaceComponent> out;
  out.reserve(comps.size());
  for (const auto& c : comps) out.push_back(with_prior_precision(c, lambda));
  return out;
}

/// Mixture predictions for precomputed per-component features.
inline Matrix predict_from_features(std::span<const LaplaceComponent> comps, const MixtureWeights& weights,
                                    std::span<const Matrix> feats, const PredictiveMethod& method) {
  const std::size_t n = feats.front().rows();
  const std::size_t c = comps.front().num_classes();
  Matrix probs(n, c);
  std::vector<Vector> per(comps.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < comps.size(); ++k) {
      const OutputGaussian g = output_gaussian_from_features(comps[k], feats[k].row(i));
      PredictiveMethod m = method;
      m.seed = detail::component_seed(method.seed + i, k);
      per[k] = m.kind == PredictiveKind::probit ? probit_predict(g) : mc_predict(g, m.samples, m.seed);
    }
    const Vector p = detail::weighted_average(per, weights.pi);
    std::copy(p.begin(), p.end(), probs.row(i).begin());
  }
  return probs;
}

/// Smallest grid λ with validation MMC ≥ threshold (and Brier ≤ its
/// threshold when set). Hessians are reused across the sweep.
inline TuneResult tune_prior_precision(std::span<const LaplaceComponent> comps, const MixtureWeights& weights,
                                       const Dataset& val, const TuneConfig& cfg, double conf_threshold,
                                       const PredictiveMethod& method = {}) {
  cfg.validate();
  if (val.size() == 0) throw EmptyValidation("validation set is empty");
  if (comps.empty()) throw InvalidConfig("no components to tune");

  std::vector<Matrix> feats;
  feats.reserve(comps.size());
  for (const auto& c : comps) feats.push_back(feature_matrix(c.net, val));

  TuneResult last;
  for (double lambda : cfg.grid()) {
    const auto fitted = refit_all(comps, lambda);
    const PredictionBatch batch{predict_from_features(fitted, weights, feats, method), val.y};
    const double m = mmc(batch);
    const double b = brier(batch);
    last = {lambda, false, m, b};
    const bool brier_ok = !cfg.brier_threshold || b <= *cfg.brier_threshold;
    if (m >= conf_threshold && brier_ok) {
      last.qualified = true;
      return last;
    }
  }
  last.lambda = cfg.grid_end;
  return last;
}

inline TuneResult tune_prior_precision(std::span<const LaplaceComponent> comps, const MixtureWeights& weights,
                                       const Dataset& val, const TuneConfig& cfg, const PredictiveMethod& method = {}) {
  if (!cfg.conf_threshold) throw InvalidConfig("conf_threshold unset; pass it explicitly");
  return tune_prior_precision(comps, weights, val, cfg, *cfg.conf_threshold, method);
}

}  // namespace mola::harness
