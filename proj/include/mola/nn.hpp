#pragma once

// Feed-forward ReLU classifiers trained to a MAP estimate.
//
// The head is stored as a C×P matrix acting on the penultimate features φ.
// With use_bias the head bias lives in the last column of that matrix and
// φ carries a trailing constant 1, so logits = head·φ in both modes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mola/dataset.hpp"
#include "mola/error.hpp"
#include "mola/linalg.hpp"
#include "mola/rng.hpp"

namespace mola {

struct MlpConfig {
  std::size_t input_dim = 2;
  std::vector<std::size_t> hidden_dims{32, 32};
  std::size_t num_classes = 3;
  bool use_bias = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (input_dim < 1) throw InvalidConfig("input_dim must be >= 1");
    if (num_classes < 2) throw InvalidConfig("num_classes must be >= 2");
    for (std::size_t h : hidden_dims)
      if (h < 1) throw InvalidConfig("hidden widths must be >= 1");
  }

  /// Width of φ, including the constant bias feature.
  [[nodiscard]] std::size_t feature_dim() const {
    const std::size_t last = hidden_dims.empty() ? input_dim : hidden_dims.back();
    return last + (use_bias ? 1 : 0);
  }
};

enum class OptimizerKind { sgd_nesterov, adam };

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double learning_rate = 1e-2;
  double weight_decay = 5e-4;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw InvalidConfig("learning_rate must be > 0");
    if (batch_size < 1) throw InvalidConfig("batch_size must be >= 1");
    if (weight_decay < 0.0) throw InvalidConfig("weight_decay must be >= 0");
  }
};

struct DenseLayer {
  Matrix weight;  // out × in
  Vector bias;    // empty when biases are disabled
};

struct Mlp {
  MlpConfig config;
  std::vector<DenseLayer> hidden;
  Matrix head;  // C × P

  [[nodiscard]] std::size_t feature_dim() const noexcept { return head.cols(); }
  [[nodiscard]] std::size_t num_classes() const noexcept { return head.rows(); }
  [[nodiscard]] bool has_bias() const noexcept { return config.use_bias; }
};

/// Gradient with the same shape as an Mlp's parameters.
struct MlpGrad {
  std::vector<DenseLayer> hidden;
  Matrix head;
};

/// Calls fn(param, grad) over every parameter of two identically shaped
/// parameter sets, in a fixed order (hidden layers weight-then-bias, then head).
template <typename A, typename B, typename Fn>
void for_each_parameter(A& a, B& b, Fn&& fn) {
  for (std::size_t l = 0; l < a.hidden.size(); ++l) {
    auto& wa = a.hidden[l].weight.data();
    auto& wb = b.hidden[l].weight.data();
    for (std::size_t i = 0; i < wa.size(); ++i) fn(wa[i], wb[i]);
    auto& ba = a.hidden[l].bias;
    auto& bb = b.hidden[l].bias;
    for (std::size_t i = 0; i < ba.size(); ++i) fn(ba[i], bb[i]);
  }
  auto& ha = a.head.data();
  auto& hb = b.head.data();
  for (std::size_t i = 0; i < ha.size(); ++i) fn(ha[i], hb[i]);
}

inline MlpGrad zero_grad_like(const Mlp& net) {
  MlpGrad g;
  for (const auto& layer : net.hidden)
    g.hidden.push_back({Matrix(layer.weight.rows(), layer.weight.cols()), Vector(layer.bias.size(), 0.0)});
  g.head = Matrix(net.head.rows(), net.head.cols());
  return g;
}

inline std::size_t parameter_count(const Mlp& net) {
  std::size_t n = net.head.data().size();
  for (const auto& layer : net.hidden) n += layer.weight.data().size() + layer.bias.size();
  return n;
}

/// He-normal initialization (std = sqrt(2 / fan_in)); biases start at zero.
inline Mlp init_mlp(const MlpConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  Mlp net{cfg, {}, {}};
  std::size_t fan_in = cfg.input_dim;
  for (std::size_t width : cfg.hidden_dims) {
    DenseLayer layer{Matrix(width, fan_in), cfg.use_bias ? Vector(width, 0.0) : Vector{}};
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& w : layer.weight.data()) w = rng.normal(0.0, std);
    net.hidden.push_back(std::move(layer));
    fan_in = width;
  }
  const std::size_t p = cfg.feature_dim();
  net.head = Matrix(cfg.num_classes, p);
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::size_t c = 0; c < cfg.num_classes; ++c)
    for (std::size_t j = 0; j < fan_in; ++j) net.head(c, j) = rng.normal(0.0, std);
  return net;
}

inline Vector softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  Vector p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

inline double log_sum_exp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

namespace detail {

inline void check_input(const Mlp& net, std::span<const double> x) {
  if (x.size() != net.config.input_dim)
    throw DimensionMismatch("input has dim " + std::to_string(x.size()) + ", network expects " +
                            std::to_string(net.config.input_dim));
}

/// Pre-activations of every hidden layer for one input.
inline std::vector<Vector> hidden_preactivations(const Mlp& net, std::span<const double> x) {
  std::vector<Vector> pre;
  pre.reserve(net.hidden.size());
  Vector act(x.begin(), x.end());
  for (const auto& layer : net.hidden) {
    Vector z = matvec(layer.weight, act);
    if (!layer.bias.empty())
      for (std::size_t i = 0; i < z.size(); ++i) z[i] += layer.bias[i];
    act = z;
    for (double& a : act) a = std::max(a, 0.0);
    pre.push_back(std::move(z));
  }
  return pre;
}

inline Vector features_from_pre(const Mlp& net, std::span<const double> x, const std::vector<Vector>& pre) {
  Vector phi;
  if (pre.empty()) {
    phi.assign(x.begin(), x.end());
  } else {
    phi = pre.back();
    for (double& a : phi) a = std::max(a, 0.0);
  }
  if (net.config.use_bias) phi.push_back(1.0);
  return phi;
}

}  // namespace detail

/// Penultimate features φ(x), with a trailing 1 when the network uses biases.
inline Vector features(const Mlp& net, std::span<const double> x) {
  detail::check_input(net, x);
  return detail::features_from_pre(net, x, detail::hidden_preactivations(net, x));
}

inline Vector forward(const Mlp& net, std::span<const double> x) {
  return matvec(net.head, features(net, x));
}

/// ReLU on/off pattern across all hidden units, used to detect linear regions.
inline std::vector<bool> activation_pattern(const Mlp& net, std::span<const double> x) {
  detail::check_input(net, x);
  std::vector<bool> mask;
  for (const auto& z : detail::hidden_preactivations(net, x))
    for (double v : z) mask.push_back(v > 0.0);
  return mask;
}

struct LossAndGrad {
  double loss = 0.0;
  MlpGrad grad;
};

/// Mean cross-entropy over the batch plus weight_decay/(2·n_total)·‖θ‖².
///
/// Summing this over the batches of one epoch, each scaled by its share of
/// the data, reproduces the full-data negative log posterior divided by N
/// with prior precision equal to weight_decay. n_total = 0 means the batch
/// is the full dataset.
inline LossAndGrad loss_and_grad(const Mlp& net, const Dataset& batch, double weight_decay,
                                 std::size_t n_total = 0) {
  if (batch.size() == 0) throw EmptyInput("loss_and_grad: empty batch");
  if (n_total == 0) n_total = batch.size();
  LossAndGrad out{0.0, zero_grad_like(net)};
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const std::size_t n_hidden = net.hidden.size();

  for (std::size_t n = 0; n < batch.size(); ++n) {
    const auto x = batch.input(n);
    detail::check_input(net, x);
    const auto pre = detail::hidden_preactivations(net, x);
    const Vector phi = detail::features_from_pre(net, x, pre);
    const Vector logits = matvec(net.head, phi);
    const std::size_t label = batch.y[n];
    out.loss += (log_sum_exp(logits) - logits[label]) * inv_b;

    Vector dlogits = softmax(logits);
    dlogits[label] -= 1.0;
    for (double& d : dlogits) d *= inv_b;

    for (std::size_t c = 0; c < dlogits.size(); ++c) {
      auto grow = out.grad.head.row(c);
      for (std::size_t j = 0; j < phi.size(); ++j) grow[j] += dlogits[c] * phi[j];
    }
    if (n_hidden == 0) continue;

    // dL/dφ without the constant bias feature.
    const std::size_t width = pre.back().size();
    Vector delta(width, 0.0);
    for (std::size_t c = 0; c < dlogits.size(); ++c) {
      const auto hrow = net.head.row(c);
      for (std::size_t j = 0; j < width; ++j) delta[j] += hrow[j] * dlogits[c];
    }
    for (std::size_t l = n_hidden; l-- > 0;) {
      for (std::size_t i = 0; i < delta.size(); ++i)
        if (!(pre[l][i] > 0.0)) delta[i] = 0.0;
      Vector input_act;
      if (l == 0) {
        input_act.assign(x.begin(), x.end());
      } else {
        input_act = pre[l - 1];
        for (double& a : input_act) a = std::max(a, 0.0);
      }
      auto& g = out.grad.hidden[l];
      for (std::size_t i = 0; i < delta.size(); ++i) {
        if (delta[i] == 0.0) continue;
        auto grow = g.weight.row(i);
        for (std::size_t j = 0; j < input_act.size(); ++j) grow[j] += delta[i] * input_act[j];
        if (!g.bias.empty()) g.bias[i] += delta[i];
      }
      if (l > 0) {
        const Matrix& w = net.hidden[l].weight;
        Vector next(w.cols(), 0.0);
        for (std::size_t i = 0; i < w.rows(); ++i) {
          if (delta[i] == 0.0) continue;
          const auto wrow = w.row(i);
          for (std::size_t j = 0; j < w.cols(); ++j) next[j] += wrow[j] * delta[i];
        }
        delta = std::move(next);
      }
    }
  }

  if (weight_decay > 0.0) {
    const double scale = weight_decay / static_cast<double>(n_total);
    double sq = 0.0;
    for_each_parameter(net, out.grad, [&](double p, double& g) {
      sq += p * p;
      g += scale * p;
    });
    out.loss += 0.5 * scale * sq;
  }
  return out;
}

namespace detail {

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::size_t n_params)
      : cfg_(cfg), m_(n_params, 0.0), v_(n_params, 0.0) {}

  void step(Mlp& net, MlpGrad& grad) {
    ++t_;
    std::size_t idx = 0;
    const double lr = cfg_.learning_rate;
    if (cfg_.optimizer == OptimizerKind::sgd_nesterov) {
      constexpr double mu = 0.9;
      for_each_parameter(net, grad, [&](double& p, double& g) {
        m_[idx] = mu * m_[idx] + g;
        p -= lr * (g + mu * m_[idx]);
        ++idx;
      });
    } else {
      constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
      for_each_parameter(net, grad, [&](double& p, double& g) {
        m_[idx] = b1 * m_[idx] + (1.0 - b1) * g;
        v_[idx] = b2 * v_[idx] + (1.0 - b2) * g * g;
        p -= lr * (m_[idx] / c1) / (std::sqrt(v_[idx] / c2) + eps);
        ++idx;
      });
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<double> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace detail

/// Train from a fresh He-normal initialization (seeded by cfg.seed) with
/// mini-batches shuffled by tcfg.seed. Deterministic given both seeds.
inline Mlp train_map(const MlpConfig& cfg, const TrainConfig& tcfg, const Dataset& data) {
  cfg.validate();
  tcfg.validate();
  data.validate();
  if (data.num_classes != cfg.num_classes)
    throw ConfigMismatch("dataset has " + std::to_string(data.num_classes) + " classes, network " +
                         std::to_string(cfg.num_classes));
  if (data.dim() != cfg.input_dim) throw ConfigMismatch("dataset dim differs from network input_dim");

  Mlp net = init_mlp(cfg);
  if (tcfg.epochs == 0) return net;

  Rng rng(tcfg.seed ^ 0x5bd1e995a5a5a5a5ULL);
  detail::Optimizer opt(tcfg, parameter_count(net));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = std::min(tcfg.batch_size, data.size());

  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(start + bs, order.size());
      const Dataset batch = data.subset(std::span<const std::size_t>(order).subspan(start, end - start));
      auto lg = loss_and_grad(net, batch, tcfg.weight_decay, data.size());
      opt.step(net, lg.grad);
    }
  }
  return net;
}

/// K members; member k uses init seed cfg.seed + k and shuffle seed tcfg.seed + k.
inline std::vector<Mlp> train_ensemble(const MlpConfig& cfg, const TrainConfig& tcfg, const Dataset& data,
                                       std::size_t k) {
  if (k < 1) throw InvalidConfig("ensemble size must be >= 1");
  std::vector<Mlp> nets;
  nets.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    MlpConfig c = cfg;
    TrainConfig t = tcfg;
    c.seed += i;
    t.seed += i;
    nets.push_back(train_map(c, t, data));
  }
  return nets;
}

inline double accuracy(const Mlp& net, const Dataset& data) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Vector logits = forward(net, data.input(i));
    const auto arg = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    correct += arg == data.y[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace mola
