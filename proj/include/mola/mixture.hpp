#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mola/error.hpp"
#include "mola/laplace.hpp"
#include "mola/nn.hpp"

namespace mola {

/// Neumaier-compensated sum.
inline double compensated_sum(std::span<const double> values) {
  double sum = 0.0;
  double comp = 0.0;
  for (double v : values) {
    const double t = sum + v;
    if (std::abs(sum) >= std::abs(v))
      comp += (sum - t) + v;
    else
      comp += (v - t) + sum;
    sum = t;
  }
  return sum + comp;
}

struct MixtureWeights {
  Vector pi;

  [[nodiscard]] std::size_t size() const noexcept { return pi.size(); }

  void validate() const {
    if (pi.empty()) throw InvalidConfig("mixture weights are empty");
    for (double w : pi)
      if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidConfig("mixture weights must be finite and >= 0");
    if (std::abs(compensated_sum(pi) - 1.0) > 1e-12) throw InvalidConfig("mixture weights must sum to 1");
  }
};

inline MixtureWeights weights_uniform(std::size_t k) {
  if (k < 1) throw InvalidConfig("need at least one mixture component");
  return {Vector(k, 1.0 / static_cast<double>(k))};
}

/// Normalized evidences: softmax over log marginal likelihoods. A log
/// evidence of −∞ gets weight 0.
inline MixtureWeights weights_evidence(std::span<const double> log_evidence) {
  if (log_evidence.empty()) throw InvalidConfig("need at least one mixture component");
  const double mx = *std::max_element(log_evidence.begin(), log_evidence.end());
  if (!std::isfinite(mx)) throw InvalidConfig("no component has a finite log evidence");
  Vector w(log_evidence.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(log_evidence[i] - mx);
  const double total = compensated_sum(w);
  for (double& v : w) v /= total;
  return {std::move(w)};
}

inline MixtureWeights weights_evidence(std::span<const LaplaceComponent> components) {
  Vector le;
  le.reserve(components.size());
  for (const auto& c : components) le.push_back(c.log_marglik);
  return weights_evidence(std::span<const double>(le));
}

struct MolaModel {
  std::vector<LaplaceComponent> components;
  MixtureWeights weights;

  [[nodiscard]] std::size_t size() const noexcept { return components.size(); }
  [[nodiscard]] std::size_t num_classes() const { return components.front().num_classes(); }
  [[nodiscard]] std::size_t input_dim() const { return components.front().net.config.input_dim; }

  void validate() const {
    if (components.empty()) throw InvalidConfig("MoLA model needs at least one component");
    weights.validate();
    if (weights.size() != components.size()) throw DimensionMismatch("weights length != component count");
    for (const auto& c : components) {
      if (c.num_classes() != num_classes()) throw DimensionMismatch("components disagree on class count");
      if (c.net.config.input_dim != input_dim()) throw DimensionMismatch("components disagree on input dim");
    }
  }
};

inline MolaModel make_mola(std::vector<LaplaceComponent> components, MixtureWeights weights) {
  MolaModel m{std::move(components), std::move(weights)};
  m.validate();
  return m;
}

namespace detail {

/// Σ_k w_k·p_k, summed per class in sorted order so the result does not
/// depend on the order of the members.
inline Vector weighted_average(std::span<const Vector> probs, std::span<const double> weights) {
  const std::size_t c = probs.front().size();
  Vector out(c);
  Vector terms(probs.size());
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t k = 0; k < probs.size(); ++k) terms[k] = weights[k] * probs[k][i];
    std::sort(terms.begin(), terms.end());
    out[i] = compensated_sum(terms);
  }
  return out;
}

inline std::uint64_t component_seed(std::uint64_t seed, std::size_t k) {
  return seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(k) + 1);
}

}  // namespace detail

/// Mixture predictive Σ_k π_k·p_k(y | x). MC draws method.samples per
/// component.
inline Vector mola_predict(const MolaModel& model, std::span<const double> x, const PredictiveMethod& method) {
  std::vector<Vector> probs;
  probs.reserve(model.size());
  for (std::size_t k = 0; k < model.size(); ++k) {
    PredictiveMethod m = method;
    m.seed = detail::component_seed(method.seed, k);
    probs.push_back(predict(model.components[k], x, m));
  }
  return detail::weighted_average(probs, model.weights.pi);
}

inline Vector map_predict(const Mlp& net, std::span<const double> x) { return softmax(forward(net, x)); }

/// Uniform average of member softmax outputs.
inline Vector de_predict(std::span<const Mlp> nets, std::span<const double> x) {
  if (nets.empty()) throw InvalidConfig("ensemble is empty");
  std::vector<Vector> probs;
  probs.reserve(nets.size());
  for (const auto& net : nets) {
    if (net.num_classes() != nets.front().num_classes())
      throw DimensionMismatch("ensemble members disagree on class count");
    probs.push_back(map_predict(net, x));
  }
  const Vector w(nets.size(), 1.0 / static_cast<double>(nets.size()));
  return detail::weighted_average(probs, w);
}

}  // namespace mola
