#pragma once

// Synthetic in-distribution, shifted and out-of-distribution sets.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mola/dataset.hpp"
#include "mola/error.hpp"
#include "mola/linalg.hpp"
#include "mola/rng.hpp"

namespace mola::harness {

struct BlobSpec {
  std::size_t num_classes = 3;
  std::size_t n = 600;
  std::size_t dim = 2;
  double spread = 1.0;
  double radius = 6.0;
};

/// Class means sit on a regular polygon of the given radius in the first two
/// coordinates; remaining coordinates are zero-mean noise. Row n has label
/// n mod C, so class counts differ by at most one.
inline Dataset make_blobs(const BlobSpec& spec, std::uint64_t seed) {
  if (spec.num_classes < 2) throw InvalidConfig("make_blobs: need at least two classes");
  if (spec.dim < 2) throw InvalidConfig("make_blobs: need dim >= 2");
  if (spec.n < 1) throw InvalidConfig("make_blobs: need at least one point");
  if (!(spec.spread >= 0.0)) throw InvalidConfig("make_blobs: spread must be >= 0");
  Rng rng(seed);
  Dataset d{Matrix(spec.n, spec.dim), std::vector<std::size_t>(spec.n), spec.num_classes};
  const double step = 2.0 * std::numbers::pi / static_cast<double>(spec.num_classes);
  for (std::size_t n = 0; n < spec.n; ++n) {
    const std::size_t label = n % spec.num_classes;
    d.y[n] = label;
    auto row = d.x.row(n);
    for (double& v : row) v = spec.spread * rng.normal();
    row[0] += spec.radius * std::cos(step * static_cast<double>(label));
    row[1] += spec.radius * std::sin(step * static_cast<double>(label));
  }
  return d;
}

enum class ShiftKind { rotate, gaussian_noise, scale };

struct ShiftSpec {
  ShiftKind kind = ShiftKind::rotate;
  int severity = 0;                  // 0..5
  std::optional<double> magnitude;   // overrides the severity mapping

  /// Degrees for rotate, σ for noise, factor for scale.
  [[nodiscard]] double parameter() const {
    if (magnitude) return *magnitude;
    const double s = static_cast<double>(severity);
    switch (kind) {
      case ShiftKind::rotate: return 30.0 * s;
      case ShiftKind::gaussian_noise: return 0.1 * s;
      case ShiftKind::scale: return 1.0 + 0.5 * s;
    }
    return 0.0;
  }

  void validate() const {
    if (severity < 0 || severity > 5) throw InvalidConfig("shift severity must lie in 0..5");
    const double p = parameter();
    if (kind == ShiftKind::rotate && (p < 0.0 || p > 180.0)) throw InvalidConfig("rotation angle must lie in [0, 180]");
    if (kind == ShiftKind::gaussian_noise && p < 0.0) throw InvalidConfig("noise sigma must be >= 0");
  }
};

inline const char* to_string(ShiftKind k) {
  switch (k) {
    case ShiftKind::rotate: return "rotate";
    case ShiftKind::gaussian_noise: return "gaussian_noise";
    case ShiftKind::scale: return "scale";
  }
  return "?";
}

/// Labels are unchanged. Rotation acts on the plane of the first two
/// coordinates.
inline Dataset apply_shift(const Dataset& data, const ShiftSpec& spec, std::uint64_t seed) {
  spec.validate();
  Dataset out = data;
  const double p = spec.parameter();
  switch (spec.kind) {
    case ShiftKind::rotate: {
      if (data.dim() < 2) throw UnsupportedDim("rotation needs at least two input dimensions");
      if (p == 0.0) break;
      const double a = p * std::numbers::pi / 180.0;
      const double c = std::cos(a);
      const double s = std::sin(a);
      for (std::size_t n = 0; n < out.size(); ++n) {
        auto row = out.x.row(n);
        const double x0 = row[0];
        const double x1 = row[1];
        row[0] = c * x0 - s * x1;
        row[1] = s * x0 + c * x1;
      }
      break;
    }
    case ShiftKind::gaussian_noise: {
      if (p == 0.0) break;
      Rng rng(seed);
      for (double& v : out.x.data()) v += p * rng.normal();
      break;
    }
    case ShiftKind::scale:
      if (p == 1.0) break;
      out.x *= p;
      break;
  }
  return out;
}

enum class OodKind { far_box, extra_blob };

inline const char* to_string(OodKind k) { return k == OodKind::far_box ? "far_box" : "extra_blob"; }

inline double max_row_norm(const Matrix& x) {
  double r = 0.0;
  for (std::size_t n = 0; n < x.rows(); ++n) r = std::max(r, norm2(x.row(n)));
  return r;
}

/// far_box: uniform on the shell between 10× and 20× the largest inlier norm.
/// extra_blob: a cluster at the centroid of the class means, with the
/// inliers' average per-coordinate spread. Labels are all 0 and unused.
inline Dataset make_ood(const Dataset& inlier, OodKind kind, std::size_t n, std::uint64_t seed) {
  inlier.validate();
  if (n < 1) throw InvalidConfig("make_ood: need at least one point");
  const std::size_t dim = inlier.dim();
  Rng rng(seed);
  Dataset out{Matrix(n, dim), std::vector<std::size_t>(n, 0), inlier.num_classes};

  if (kind == OodKind::far_box) {
    const double r_in = max_row_norm(inlier.x);
    const double lo = 10.0 * r_in;
    const double hi = 20.0 * r_in;
    const double d = static_cast<double>(dim);
    for (std::size_t i = 0; i < n; ++i) {
      auto row = out.x.row(i);
      double len = 0.0;
      while (len == 0.0) {
        for (double& v : row) v = rng.normal();
        len = norm2(row);
      }
      // Volume-uniform radius in the shell.
      const double u = rng.uniform(std::pow(lo, d), std::pow(hi, d));
      const double r = std::pow(u, 1.0 / d);
      for (double& v : row) v *= r / len;
    }
    return out;
  }

  const std::size_t c = inlier.num_classes;
  Matrix means(c, dim);
  std::vector<double> counts(c, 0.0);
  for (std::size_t i = 0; i < inlier.size(); ++i) {
    const auto row = inlier.input(i);
    for (std::size_t j = 0; j < dim; ++j) means(inlier.y[i], j) += row[j];
    counts[inlier.y[i]] += 1.0;
  }
  Vector centroid(dim, 0.0);
  std::size_t present = 0;
  for (std::size_t k = 0; k < c; ++k) {
    if (counts[k] == 0.0) continue;
    ++present;
    for (std::size_t j = 0; j < dim; ++j) centroid[j] += means(k, j) / counts[k];
  }
  for (double& v : centroid) v /= static_cast<double>(present);
  double var = 0.0;
  for (std::size_t i = 0; i < inlier.size(); ++i) {
    const auto row = inlier.input(i);
    const double cnt = counts[inlier.y[i]];
    for (std::size_t j = 0; j < dim; ++j) {
      const double dlt = row[j] - means(inlier.y[i], j) / cnt;
      var += dlt * dlt;
    }
  }
  const double spread = std::sqrt(var / static_cast<double>(inlier.size() * dim));
  for (std::size_t i = 0; i < n; ++i) {
    auto row = out.x.row(i);
    for (std::size_t j = 0; j < dim; ++j) row[j] = centroid[j] + spread * rng.normal();
  }
  return out;
}

struct HeldOut {
  Dataset validation;
  Dataset test;
};

/// Random split of a held-out in-distribution set into validation and test.
inline HeldOut split_validation(const Dataset& data, double fraction, std::size_t cap, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw InvalidConfig("validation fraction must lie in (0, 1)");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  std::size_t n_val = static_cast<std::size_t>(std::round(fraction * static_cast<double>(data.size())));
  n_val = std::clamp<std::size_t>(n_val, 1, std::min(cap, data.size() - 1));
  const std::span<const std::size_t> all(order);
  return {data.subset(all.first(n_val)), data.subset(all.subspan(n_val))};
}

}  // namespace mola::harness
