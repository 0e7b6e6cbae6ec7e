#pragma once

// Asymptotic confidence bounds for last-layer Gaussian and mixture posteriors
// on bias-free ReLU networks, plus an empirical far-away verifier.
//
// Only the diagonal output variances enter the probit approximation, so the
// per-row marginals N(w_i | μ_i, Σ_i) of the last-layer posterior suffice.
// For Kronecker posteriors the row marginal is exact for the approximation
// in use (U_ii·V for the split damping), not for the underlying GGN.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mola/error.hpp"
#include "mola/laplace.hpp"
#include "mola/linalg.hpp"
#include "mola/metrics.hpp"
#include "mola/mixture.hpp"
#include "mola/nn.hpp"

namespace mola {

struct RowPosterior {
  Vector mean;  // P
  Matrix cov;   // P × P
};

inline constexpr double kSingularEigenvalue = 1e-12;

/// Per-class marginal posteriors over the rows of W.
inline std::vector<RowPosterior> extract_row_posteriors(const LaplaceComponent& comp) {
  const std::size_t c = comp.num_classes();
  const std::size_t p = comp.feature_dim();
  std::vector<RowPosterior> rows;
  rows.reserve(c);
  for (std::size_t i = 0; i < c; ++i) {
    const auto mu = comp.w_map().row(i);
    RowPosterior row{Vector(mu.begin(), mu.end()), Matrix(p, p)};
    std::visit(
        [&](const auto& post) {
          using T = std::decay_t<decltype(post)>;
          if constexpr (std::is_same_v<T, FullPosterior>) {
            for (std::size_t j = 0; j < p; ++j)
              for (std::size_t l = 0; l < p; ++l) row.cov(j, l) = post.covariance(i * p + j, i * p + l);
          } else if constexpr (std::is_same_v<T, KfacSplitPosterior>) {
            row.cov = post.u(i, i) * post.v;
          } else if constexpr (std::is_same_v<T, KfacEigenPosterior>) {
            const Matrix& qb = post.b.vectors;
            for (std::size_t r = 0; r < post.a.values.size(); ++r) {
              const double weight = post.a.vectors(i, r) * post.a.vectors(i, r);
              if (weight == 0.0) continue;
              for (std::size_t s = 0; s < p; ++s) {
                const double v =
                    weight / (post.n_scale * post.a.values[r] * post.b.values[s] + comp.prior_precision);
                for (std::size_t j = 0; j < p; ++j)
                  for (std::size_t l = 0; l < p; ++l) row.cov(j, l) += v * qb(j, s) * qb(l, s);
              }
            }
            row.cov = symmetrized(row.cov);
          } else {
            for (std::size_t j = 0; j < p; ++j) row.cov(j, j) = post.variance[i * p + j];
          }
        },
        comp.posterior);
    rows.push_back(std::move(row));
  }
  return rows;
}

/// b = ‖μ‖₂ / sqrt((π/8)·λ_min(Σ)).
inline double bound_b(const RowPosterior& row) {
  const double lmin = min_eigenvalue_sym(row.cov);
  if (lmin <= kSingularEigenvalue)
    throw SingularCovariance("row covariance has smallest eigenvalue " + std::to_string(lmin));
  return norm2(row.mean) / std::sqrt((std::numbers::pi / 8.0) * lmin);
}

/// 1 / (1 + Σ_{i≠c} exp(−(b_i + b_c))).
inline double lemma_bound_from_b(std::span<const double> b, std::size_t predicted) {
  if (predicted >= b.size()) throw InvalidConfig("predicted class out of range");
  double s = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i)
    if (i != predicted) s += std::exp(-(b[i] + b[predicted]));
  return 1.0 / (1.0 + s);
}

inline Vector row_bounds(std::span<const RowPosterior> rows) {
  Vector b;
  b.reserve(rows.size());
  for (const auto& r : rows) b.push_back(bound_b(r));
  return b;
}

inline double lemma_bound(std::span<const RowPosterior> rows, std::size_t predicted) {
  const Vector b = row_bounds(rows);
  return lemma_bound_from_b(b, predicted);
}

/// Σ_k π_k / (1 + Σ_{i≠c_k} exp(−(b_ki + b_kc_k))), with b given as a K × C matrix.
inline double theorem_bound_from_b(const Matrix& b, std::span<const double> weights,
                                   std::span<const std::size_t> predicted) {
  if (b.rows() != weights.size() || predicted.size() != weights.size())
    throw DimensionMismatch("theorem bound: K mismatch between b, weights and classes");
  Vector terms(weights.size());
  for (std::size_t k = 0; k < weights.size(); ++k) terms[k] = weights[k] * lemma_bound_from_b(b.row(k), predicted[k]);
  return compensated_sum(terms);
}

struct BoundReport {
  Matrix b;                                // K × C
  Vector lemma_bound;                      // per component
  double theorem_bound = 0.0;
  std::vector<std::size_t> predicted;      // per component, under the probit predictive
  std::size_t mixture_predicted = 0;
};

/// b values of every component (independent of the input).
inline Matrix bound_matrix(const MolaModel& model) {
  Matrix b(model.size(), model.num_classes());
  for (std::size_t k = 0; k < model.size(); ++k) {
    const Vector bk = row_bounds(extract_row_posteriors(model.components[k]));
    std::copy(bk.begin(), bk.end(), b.row(k).begin());
  }
  return b;
}

/// Mixture bound at input x; each component uses its own probit-predicted class.
inline BoundReport theorem_bound(const MolaModel& model, std::span<const double> x, const Matrix& b) {
  BoundReport rep{b, Vector(model.size()), 0.0, std::vector<std::size_t>(model.size()), 0};
  for (std::size_t k = 0; k < model.size(); ++k) {
    rep.predicted[k] = argmax(probit_predict(output_gaussian(model.components[k], x)));
    rep.lemma_bound[k] = lemma_bound_from_b(b.row(k), rep.predicted[k]);
  }
  rep.theorem_bound = theorem_bound_from_b(b, model.weights.pi, rep.predicted);
  rep.mixture_predicted = argmax(mola_predict(model, x, {}));
  return rep;
}

inline BoundReport theorem_bound(const MolaModel& model, std::span<const double> x) {
  return theorem_bound(model, x, bound_matrix(model));
}

struct FarAwayRow {
  double delta = 0.0;
  double map_conf = 0.0;
  double mola_conf = 0.0;
  double mola_mc_conf = 0.0;  // Monte Carlo predictive; reported, never asserted
  double theorem_bound = 0.0;
  bool region_stable = false;
};

struct FarAwayReport {
  std::vector<FarAwayRow> rows;
  std::size_t onset = 0;        // first row index inside the final linear region
  bool bound_holds = true;      // mola_conf ≤ theorem_bound + 1e-6 on stable rows
  bool z_monotone = true;       // |z_i| non-decreasing in δ on stable rows
  bool z_within_b = true;       // |z_i| ≤ b_i + 1e-6 at the largest δ
  bool map_monotone = true;     // MAP confidence non-decreasing on stable rows
};

inline constexpr double kBoundSlack = 1e-6;
inline constexpr std::size_t kVerifierMcSamples = 1000;

/// Scale x* by each δ (ascending) and compare MAP confidence, MoLA probit
/// confidence and the mixture bound. The linear-region onset is the first δ
/// from which the ReLU pattern of every network no longer changes on the grid.
inline FarAwayReport verify_far_away(const MolaModel& model, const Mlp& map_net, std::span<const double> x_star,
                                     std::vector<double> deltas) {
  model.validate();
  if (map_net.has_bias()) throw BiasedNetwork("MAP network uses biases");
  for (const auto& c : model.components)
    if (c.net.has_bias()) throw BiasedNetwork("mixture component uses biases");
  if (norm2(x_star) == 0.0) throw InvalidConfig("x* must be nonzero");
  if (deltas.empty()) throw InvalidConfig("delta grid is empty");
  std::sort(deltas.begin(), deltas.end());

  const Matrix b = bound_matrix(model);
  const std::size_t k_count = model.size();
  const std::size_t c = model.num_classes();
  FarAwayReport rep;
  std::vector<std::vector<std::vector<bool>>> patterns;
  std::vector<Matrix> abs_z;  // per δ: K × C

  for (double delta : deltas) {
    Vector x(x_star.begin(), x_star.end());
    for (double& v : x) v *= delta;
    const BoundReport br = theorem_bound(model, x, b);
    FarAwayRow row;
    row.delta = delta;
    row.map_conf = confidence(map_predict(map_net, x));
    row.mola_conf = confidence(mola_predict(model, x, {}));
    row.mola_mc_conf = confidence(mola_predict(model, x, {PredictiveKind::mc, kVerifierMcSamples, 0}));
    row.theorem_bound = br.theorem_bound;
    rep.rows.push_back(row);

    std::vector<std::vector<bool>> pat;
    pat.push_back(activation_pattern(map_net, x));
    Matrix z(k_count, c);
    for (std::size_t k = 0; k < k_count; ++k) {
      pat.push_back(activation_pattern(model.components[k].net, x));
      const Vector zk = probit_logits(output_gaussian(model.components[k], x));
      for (std::size_t i = 0; i < c; ++i) z(k, i) = std::abs(zk[i]);
    }
    patterns.push_back(std::move(pat));
    abs_z.push_back(std::move(z));
  }

  std::size_t onset = deltas.size() - 1;
  while (onset > 0 && patterns[onset - 1] == patterns.back()) --onset;
  rep.onset = onset;

  for (std::size_t j = 0; j < rep.rows.size(); ++j) {
    auto& row = rep.rows[j];
    row.region_stable = j >= onset;
    if (!row.region_stable) continue;
    if (row.mola_conf > row.theorem_bound + kBoundSlack) rep.bound_holds = false;
    if (j > onset) {
      if (row.map_conf < rep.rows[j - 1].map_conf) rep.map_monotone = false;
      for (std::size_t k = 0; k < k_count; ++k)
        for (std::size_t i = 0; i < c; ++i)
          if (abs_z[j](k, i) < abs_z[j - 1](k, i) * (1.0 - 1e-12)) rep.z_monotone = false;
    }
  }
  const Matrix& z_last = abs_z.back();
  for (std::size_t k = 0; k < k_count; ++k)
    for (std::size_t i = 0; i < c; ++i)
      if (z_last(k, i) > b(k, i) + kBoundSlack) rep.z_within_b = false;
  return rep;
}

inline constexpr const char* kBoundCsvHeader = "delta,map_conf,mola_conf,theorem_bound,region_stable";

inline void write_bound_csv(std::ostream& os, const FarAwayReport& rep) {
  os << kBoundCsvHeader << '\n';
  for (const auto& r : rep.rows)
    os << format_real(r.delta) << ',' << format_real(r.map_conf) << ',' << format_real(r.mola_conf) << ','
       << format_real(r.theorem_bound) << ',' << (r.region_stable ? "true" : "false") << '\n';
}

}  // namespace mola
