#pragma once

// Last-layer Laplace approximation for a trained Mlp.
//
// Conventions:
//  * vec(W) is row-major (class-major): parameter index i*P + j is W(i, j).
//    Under this ordering the last-layer GGN is Σ_n Λ_n ⊗ φ_n φ_nᵀ and a
//    Kronecker posterior covariance reads U ⊗ V with U over classes and V
//    over features.
//  * Λ_n = diag(p_n) − p_n p_nᵀ uses the model's softmax probabilities (GGN),
//    not the labels (empirical Fisher).
//  * log_marglik drops the 2π constants: the prior normalizer contributes
//    −(CP/2)·log 2π and the Gaussian integral +(CP/2)·log 2π, which cancel.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mola/dataset.hpp"
#include "mola/error.hpp"
#include "mola/linalg.hpp"
#include "mola/nn.hpp"
#include "mola/rng.hpp"

namespace mola {

enum class HessianKind { full, kfac, diag };

/// How the prior precision enters a Kronecker-factored posterior.
enum class KfacDamping {
  /// U = (√N·A + √λ·I)⁻¹, V = (√N·B + √λ·I)⁻¹; the factored damping of the
  /// reference K-FAC Laplace algorithm. Precision is (√N·A+√λI)⊗(√N·B+√λI).
  sqrt_split,
  /// Precision N·A⊗B + λI, applied exactly in the joint eigenbasis of A and B.
  eigen_exact,
};

struct FullHessian {
  Matrix h;  // CP × CP
};
struct KfacHessian {
  Matrix a;  // C × C, running average of Λ_n
  Matrix b;  // P × P, running average of φ_n φ_nᵀ
};
struct DiagHessian {
  Vector d;  // CP
};
using HessianStructure = std::variant<FullHessian, KfacHessian, DiagHessian>;

inline HessianKind kind_of(const HessianStructure& h) {
  return static_cast<HessianKind>(h.index());
}

struct FullPosterior {
  SpdMatrix precision_factor;  // chol(H + λI)
  Matrix covariance;           // (H + λI)⁻¹
};
struct KfacSplitPosterior {
  Matrix u;  // C × C
  Matrix v;  // P × P
  double logdet_precision = 0.0;
};
struct KfacEigenPosterior {
  SymmetricEigen a;  // eigenvalues clamped at 0
  SymmetricEigen b;
  double n_scale = 0.0;  // N
};
struct DiagPosterior {
  Vector variance;  // (d + λ)⁻¹
};
using PosteriorFactors = std::variant<FullPosterior, KfacSplitPosterior, KfacEigenPosterior, DiagPosterior>;

struct KfacOptions {
  double beta = 0.99;
  std::size_t batch_size = 32;  // 0: one full-data batch
  std::uint64_t seed = 0;
};

struct FitOptions {
  KfacOptions kfac{};
  KfacDamping damping = KfacDamping::sqrt_split;
};

struct LaplaceComponent {
  Mlp net;  // frozen feature map; net.head is W_MAP
  HessianStructure hessian;
  double prior_precision = 1.0;
  std::size_t n_train = 0;
  double log_likelihood = 0.0;  // log p(D | W_MAP) on the fitting data
  KfacDamping damping = KfacDamping::sqrt_split;
  PosteriorFactors posterior;
  double log_marglik = 0.0;

  [[nodiscard]] const Matrix& w_map() const noexcept { return net.head; }
  [[nodiscard]] std::size_t num_classes() const noexcept { return net.head.rows(); }
  [[nodiscard]] std::size_t feature_dim() const noexcept { return net.head.cols(); }
  [[nodiscard]] HessianKind kind() const { return kind_of(hessian); }
};

/// Output distribution N(m, C) of the logits at one input.
struct OutputGaussian {
  Vector mean;
  std::variant<Matrix, Vector> cov;  // full C×C, or per-class variances

  [[nodiscard]] Vector variances() const {
    if (const auto* v = std::get_if<Vector>(&cov)) return *v;
    const auto& m = std::get<Matrix>(cov);
    Vector d(m.rows());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = m(i, i);
    return d;
  }
};

/// Penultimate features of every row, N × P.
inline Matrix feature_matrix(const Mlp& net, const Dataset& data) {
  Matrix phi(data.size(), net.feature_dim());
  for (std::size_t n = 0; n < data.size(); ++n) {
    const Vector f = features(net, data.input(n));
    std::copy(f.begin(), f.end(), phi.row(n).begin());
  }
  return phi;
}

/// Λ = diag(p) − p pᵀ.
inline Matrix softmax_hessian(std::span<const double> p) {
  Matrix lam(p.size(), p.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t k = 0; k < p.size(); ++k) lam(i, k) = (i == k ? p[i] : 0.0) - p[i] * p[k];
  return lam;
}

namespace detail {

inline void check_fit_inputs(const Mlp& net, const Dataset& data) {
  data.validate();
  if (data.dim() != net.config.input_dim) throw DimensionMismatch("dataset dim != network input_dim");
  if (data.num_classes != net.num_classes()) throw DimensionMismatch("dataset classes != network classes");
}

}  // namespace detail

/// Exact last-layer GGN (equal to the Hessian of the negative log-likelihood).
inline Matrix ggn_full(const Mlp& net, const Dataset& data) {
  detail::check_fit_inputs(net, data);
  const std::size_t c = net.num_classes();
  const std::size_t p = net.feature_dim();
  Matrix h(c * p, c * p);
  for (std::size_t n = 0; n < data.size(); ++n) {
    const Vector phi = features(net, data.input(n));
    const Matrix lam = softmax_hessian(softmax(matvec(net.head, phi)));
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t k = 0; k < c; ++k) {
        const double l = lam(i, k);
        if (l == 0.0) continue;
        for (std::size_t j = 0; j < p; ++j) {
          const double lj = l * phi[j];
          if (lj == 0.0) continue;
          auto hrow = h.row(i * p + j);
          for (std::size_t m = 0; m < p; ++m) hrow[k * p + m] += lj * phi[m];
        }
      }
  }
  return symmetrized(h);
}

/// Diagonal of ggn_full without forming the matrix: Σ_n Λ_n(i,i)·φ_nj².
inline Vector ggn_diag(const Mlp& net, const Dataset& data) {
  detail::check_fit_inputs(net, data);
  const std::size_t c = net.num_classes();
  const std::size_t p = net.feature_dim();
  Vector d(c * p, 0.0);
  for (std::size_t n = 0; n < data.size(); ++n) {
    const Vector phi = features(net, data.input(n));
    const Vector prob = softmax(matvec(net.head, phi));
    for (std::size_t i = 0; i < c; ++i) {
      const double lii = prob[i] - prob[i] * prob[i];
      for (std::size_t j = 0; j < p; ++j) d[i * p + j] += lii * phi[j] * phi[j];
    }
  }
  return d;
}

/// Kronecker factors as exponential running averages over shuffled
/// mini-batches, bias-corrected by 1/(1 − β^batches).
inline KfacHessian ggn_kfac(const Mlp& net, const Dataset& data, const KfacOptions& opts = {}) {
  detail::check_fit_inputs(net, data);
  if (!(opts.beta >= 0.0 && opts.beta < 1.0)) throw InvalidConfig("kfac beta must lie in [0, 1)");
  const std::size_t c = net.num_classes();
  const std::size_t p = net.feature_dim();
  const std::size_t n_total = data.size();
  const std::size_t bs = opts.batch_size == 0 ? n_total : std::min(opts.batch_size, n_total);

  std::vector<std::size_t> order(n_total);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(opts.seed);
  rng.shuffle(std::span<std::size_t>(order));

  KfacHessian out{Matrix(c, c), Matrix(p, p)};
  std::size_t batches = 0;
  for (std::size_t start = 0; start < n_total; start += bs) {
    const std::size_t end = std::min(start + bs, n_total);
    Matrix a_hat(c, c);
    Matrix b_hat(p, p);
    for (std::size_t idx = start; idx < end; ++idx) {
      const Vector phi = features(net, data.input(order[idx]));
      a_hat += softmax_hessian(softmax(matvec(net.head, phi)));
      b_hat += outer(phi, phi);
    }
    const double inv = 1.0 / static_cast<double>(end - start);
    a_hat *= inv;
    b_hat *= inv;
    out.a = opts.beta * out.a + (1.0 - opts.beta) * a_hat;
    out.b = opts.beta * out.b + (1.0 - opts.beta) * b_hat;
    ++batches;
  }
  const double debias = 1.0 - std::pow(opts.beta, static_cast<double>(batches));
  out.a *= 1.0 / debias;
  out.b *= 1.0 / debias;
  out.a = symmetrized(out.a);
  out.b = symmetrized(out.b);
  return out;
}

inline HessianStructure compute_hessian(const Mlp& net, const Dataset& data, HessianKind kind,
                                        const KfacOptions& kfac = {}) {
  switch (kind) {
    case HessianKind::full: return FullHessian{ggn_full(net, data)};
    case HessianKind::kfac: return ggn_kfac(net, data, kfac);
    case HessianKind::diag: return DiagHessian{ggn_diag(net, data)};
  }
  throw InvalidConfig("unknown Hessian kind");
}

/// Σ_n log softmax(W φ_n)[y_n].
inline double log_likelihood(const Mlp& net, const Dataset& data) {
  double ll = 0.0;
  for (std::size_t n = 0; n < data.size(); ++n) {
    const Vector logits = forward(net, data.input(n));
    ll += logits[data.y[n]] - log_sum_exp(logits);
  }
  return ll;
}

namespace detail {

inline Matrix damped(const Matrix& m, double scale, double shift) {
  Matrix out = m * scale;
  for (std::size_t i = 0; i < out.rows(); ++i) out(i, i) += shift;
  return out;
}

inline SymmetricEigen clamped_eigen(const Matrix& m) {
  SymmetricEigen e = eigen_sym(m);
  for (double& v : e.values) v = std::max(v, 0.0);
  return e;
}

struct FactorBuild {
  PosteriorFactors posterior;
  double logdet_precision;
};

inline FactorBuild build_factors(const HessianStructure& hess, double lambda, std::size_t n_train,
                                 KfacDamping damping) {
  return std::visit(
      [&](const auto& h) -> FactorBuild {
        using T = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<T, FullHessian>) {
          SpdMatrix f = cholesky(damped(h.h, 1.0, lambda));
          const double ld = logdet_spd(f);
          Matrix cov = inverse_spd(f);
          return {FullPosterior{std::move(f), std::move(cov)}, ld};
        } else if constexpr (std::is_same_v<T, KfacHessian>) {
          const double sqrt_n = std::sqrt(static_cast<double>(n_train));
          const double c = static_cast<double>(h.a.rows());
          const double p = static_cast<double>(h.b.rows());
          if (damping == KfacDamping::sqrt_split) {
            const SpdMatrix fa = cholesky(damped(h.a, sqrt_n, std::sqrt(lambda)));
            const SpdMatrix fb = cholesky(damped(h.b, sqrt_n, std::sqrt(lambda)));
            const double ld = p * logdet_spd(fa) + c * logdet_spd(fb);
            return {KfacSplitPosterior{inverse_spd(fa), inverse_spd(fb), ld}, ld};
          }
          KfacEigenPosterior post{clamped_eigen(h.a), clamped_eigen(h.b), static_cast<double>(n_train)};
          double ld = 0.0;
          for (double ar : post.a.values)
            for (double bs : post.b.values) ld += std::log(post.n_scale * ar * bs + lambda);
          return {std::move(post), ld};
        } else {
          DiagPosterior post{Vector(h.d.size())};
          double ld = 0.0;
          for (std::size_t i = 0; i < h.d.size(); ++i) {
            if (h.d[i] < 0.0) throw NegativeVariance("diagonal GGN entry is negative");
            post.variance[i] = 1.0 / (h.d[i] + lambda);
            ld += std::log(h.d[i] + lambda);
          }
          return {std::move(post), ld};
        }
      },
      hess);
}

inline double squared_norm(const Matrix& m) { return dot(m.data(), m.data()); }

}  // namespace detail

/// Laplace evidence of the last layer:
/// log p(D|W) − (λ/2)‖W‖² + (CP/2)·log λ − ½·logdet(posterior precision).
inline double laplace_evidence(double log_lik, const Matrix& w_map, double lambda, double logdet_precision) {
  const double cp = static_cast<double>(w_map.rows() * w_map.cols());
  return log_lik - 0.5 * lambda * detail::squared_norm(w_map) + 0.5 * cp * std::log(lambda) -
         0.5 * logdet_precision;
}

/// Build a component from an already computed Hessian. Tuning uses this to
/// sweep λ without touching the data again.
inline LaplaceComponent fit_from_hessian(Mlp net, HessianStructure hess, std::size_t n_train, double log_lik,
                                         double lambda, KfacDamping damping = KfacDamping::sqrt_split) {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw InvalidPrior("prior precision must be > 0");
  auto built = detail::build_factors(hess, lambda, n_train, damping);
  const double lml = laplace_evidence(log_lik, net.head, lambda, built.logdet_precision);
  return LaplaceComponent{std::move(net), std::move(hess), lambda,   n_train,
                          log_lik,        damping,         std::move(built.posterior), lml};
}

inline LaplaceComponent fit(const Mlp& net, const Dataset& data, HessianKind kind, double lambda,
                            const FitOptions& opts = {}) {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw InvalidPrior("prior precision must be > 0");
  HessianStructure hess = compute_hessian(net, data, kind, opts.kfac);
  return fit_from_hessian(net, std::move(hess), data.size(), log_likelihood(net, data), lambda, opts.damping);
}

/// Same component with a different prior precision; the Hessian is reused.
inline LaplaceComponent with_prior_precision(const LaplaceComponent& comp, double lambda) {
  return fit_from_hessian(comp.net, comp.hessian, comp.n_train, comp.log_likelihood, lambda, comp.damping);
}

inline double log_marginal_likelihood(const LaplaceComponent& comp) { return comp.log_marglik; }

/// Logit distribution at features φ.
inline OutputGaussian output_gaussian_from_features(const LaplaceComponent& comp, std::span<const double> phi) {
  const std::size_t c = comp.num_classes();
  const std::size_t p = comp.feature_dim();
  if (phi.size() != p) throw DimensionMismatch("feature length != component feature_dim");
  OutputGaussian g{matvec(comp.w_map(), phi), Vector{}};

  std::visit(
      [&](const auto& post) {
        using T = std::decay_t<decltype(post)>;
        if constexpr (std::is_same_v<T, FullPosterior>) {
          // C*(i,k) = Σ_{j,l} φ_j φ_l Σ(iP+j, kP+l)
          Matrix cov(c, c);
          Vector tmp(p);
          for (std::size_t i = 0; i < c; ++i) {
            for (std::size_t k = i; k < c; ++k) {
              double acc = 0.0;
              for (std::size_t j = 0; j < p; ++j) {
                if (phi[j] == 0.0) continue;
                const auto row = post.covariance.row(i * p + j);
                double inner = 0.0;
                for (std::size_t l = 0; l < p; ++l) inner += row[k * p + l] * phi[l];
                acc += phi[j] * inner;
              }
              cov(i, k) = acc;
              cov(k, i) = acc;
            }
          }
          g.cov = std::move(cov);
        } else if constexpr (std::is_same_v<T, KfacSplitPosterior>) {
          g.cov = quad_form(phi, post.v) * post.u;
        } else if constexpr (std::is_same_v<T, KfacEigenPosterior>) {
          const Vector psi = matvec(post.b.vectors.transposed(), phi);
          const std::size_t ca = post.a.values.size();
          Vector scale(ca, 0.0);
          for (std::size_t r = 0; r < ca; ++r)
            for (std::size_t s = 0; s < psi.size(); ++s)
              scale[r] += psi[s] * psi[s] /
                          (post.n_scale * post.a.values[r] * post.b.values[s] + comp.prior_precision);
          Matrix cov(c, c);
          for (std::size_t i = 0; i < c; ++i)
            for (std::size_t k = 0; k < c; ++k) {
              double acc = 0.0;
              for (std::size_t r = 0; r < ca; ++r) acc += post.a.vectors(i, r) * scale[r] * post.a.vectors(k, r);
              cov(i, k) = acc;
            }
          g.cov = symmetrized(cov);
        } else {
          Vector var(c, 0.0);
          for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = 0; j < p; ++j) var[i] += post.variance[i * p + j] * phi[j] * phi[j];
          g.cov = std::move(var);
        }
      },
      comp.posterior);
  return g;
}

inline OutputGaussian output_gaussian(const LaplaceComponent& comp, std::span<const double> x) {
  return output_gaussian_from_features(comp, features(comp.net, x));
}

/// Probit-scaled logits z_i = m_i / sqrt(1 + (π/8)·var_i).
inline Vector probit_logits(const OutputGaussian& g) {
  const Vector var = g.variances();
  Vector z(g.mean.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (var[i] < 0.0) throw NegativeVariance("output variance " + std::to_string(var[i]) + " < 0");
    z[i] = g.mean[i] / std::sqrt(1.0 + (std::numbers::pi / 8.0) * var[i]);
  }
  return z;
}

/// Multi-class probit approximation of E[softmax(f)], f ~ N(m, C); only the
/// diagonal of C is used.
inline Vector probit_predict(const OutputGaussian& g) { return softmax(probit_logits(g)); }

/// Monte Carlo estimate of E[softmax(f)] from S draws.
inline Vector mc_predict(const OutputGaussian& g, std::size_t samples, std::uint64_t seed) {
  if (samples < 1) throw InvalidConfig("mc_predict needs at least one sample");
  const std::size_t c = g.mean.size();
  Rng rng(seed);
  Vector acc(c, 0.0);
  Vector f(c);
  Vector eps(c);

  if (const auto* var = std::get_if<Vector>(&g.cov)) {
    Vector sd(c);
    for (std::size_t i = 0; i < c; ++i) {
      if ((*var)[i] < 0.0) throw NegativeVariance("output variance < 0");
      sd[i] = std::sqrt((*var)[i]);
    }
    if (std::all_of(sd.begin(), sd.end(), [](double s) { return s == 0.0; })) return softmax(g.mean);
    for (std::size_t s = 0; s < samples; ++s) {
      for (std::size_t i = 0; i < c; ++i) f[i] = g.mean[i] + sd[i] * rng.normal();
      const Vector p = softmax(f);
      for (std::size_t i = 0; i < c; ++i) acc[i] += p[i];
    }
  } else {
    const auto& cov = std::get<Matrix>(g.cov);
    if (cov.max_abs() == 0.0) return softmax(g.mean);
    const SpdMatrix chol = cholesky(cov, 0.0);
    const Matrix& l = chol.lower();
    for (std::size_t s = 0; s < samples; ++s) {
      for (double& e : eps) e = rng.normal();
      for (std::size_t i = 0; i < c; ++i) {
        double v = g.mean[i];
        for (std::size_t k = 0; k <= i; ++k) v += l(i, k) * eps[k];
        f[i] = v;
      }
      const Vector p = softmax(f);
      for (std::size_t i = 0; i < c; ++i) acc[i] += p[i];
    }
  }
  for (double& a : acc) a /= static_cast<double>(samples);
  return acc;
}

enum class PredictiveKind { probit, mc };

struct PredictiveMethod {
  PredictiveKind kind = PredictiveKind::probit;
  std::size_t samples = 100;
  std::uint64_t seed = 0;
};

inline Vector predict(const LaplaceComponent& comp, std::span<const double> x, const PredictiveMethod& method) {
  const OutputGaussian g = output_gaussian(comp, x);
  return method.kind == PredictiveKind::probit ? probit_predict(g) : mc_predict(g, method.samples, method.seed);
}

}  // namespace mola
