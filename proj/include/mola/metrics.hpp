#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <charconv>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mola/error.hpp"
#include "mola/linalg.hpp"

namespace mola {

/// N × C predictive probabilities with optional labels.
struct PredictionBatch {
  Matrix probs;
  std::optional<std::vector<std::size_t>> labels;

  [[nodiscard]] std::size_t size() const noexcept { return probs.rows(); }

  [[nodiscard]] const std::vector<std::size_t>& require_labels() const {
    if (!labels) throw MissingLabels("metric needs labels");
    if (labels->size() != probs.rows()) throw DimensionMismatch("label count != prediction rows");
    return *labels;
  }
};

inline std::size_t argmax(std::span<const double> p) {
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

inline double confidence(std::span<const double> p) { return *std::max_element(p.begin(), p.end()); }

inline Vector confidences(const PredictionBatch& batch) {
  Vector c(batch.size());
  for (std::size_t n = 0; n < batch.size(); ++n) c[n] = confidence(batch.probs.row(n));
  return c;
}

inline double accuracy(const PredictionBatch& batch) {
  const auto& y = batch.require_labels();
  if (batch.size() == 0) throw EmptyInput("accuracy of an empty batch");
  std::size_t hits = 0;
  for (std::size_t n = 0; n < batch.size(); ++n) hits += argmax(batch.probs.row(n)) == y[n] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(batch.size());
}

inline constexpr double kProbabilityFloor = 1e-12;

/// −(1/N)·Σ log p(y_n), probabilities floored at 1e-12.
inline double nll(const PredictionBatch& batch) {
  const auto& y = batch.require_labels();
  if (batch.size() == 0) throw EmptyInput("nll of an empty batch");
  double s = 0.0;
  for (std::size_t n = 0; n < batch.size(); ++n) s -= std::log(std::max(batch.probs(n, y[n]), kProbabilityFloor));
  return s / static_cast<double>(batch.size());
}

inline double brier(const PredictionBatch& batch) {
  const auto& y = batch.require_labels();
  if (batch.size() == 0) throw EmptyInput("brier of an empty batch");
  double s = 0.0;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const auto row = batch.probs.row(n);
    for (std::size_t c = 0; c < row.size(); ++c) {
      const double d = row[c] - (c == y[n] ? 1.0 : 0.0);
      s += d * d;
    }
  }
  return s / static_cast<double>(batch.size());
}

struct ReliabilityBin {
  std::size_t count = 0;
  double confidence_sum = 0.0;
  std::size_t correct = 0;

  [[nodiscard]] double gap() const {
    const double n = static_cast<double>(count);
    return std::abs(static_cast<double>(correct) / n - confidence_sum / n);
  }
};

/// Equal-width bins of max-class confidence on [0, 1]; confidence 1.0 lands
/// in the top bin.
inline std::vector<ReliabilityBin> reliability_bins(const PredictionBatch& batch, std::size_t bins) {
  const auto& y = batch.require_labels();
  if (bins < 1) throw InvalidConfig("need at least one calibration bin");
  std::vector<ReliabilityBin> out(bins);
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const auto row = batch.probs.row(n);
    const double conf = confidence(row);
    auto b = static_cast<std::size_t>(conf * static_cast<double>(bins));
    b = std::min(b, bins - 1);
    out[b].count += 1;
    out[b].confidence_sum += conf;
    out[b].correct += argmax(row) == y[n] ? 1 : 0;
  }
  return out;
}

inline double ece(const PredictionBatch& batch, std::size_t bins = 15) {
  if (batch.size() == 0) throw EmptyInput("ece of an empty batch");
  double s = 0.0;
  double worst = 0.0;
  for (const auto& b : reliability_bins(batch, bins))
    if (b.count > 0) {
      s += static_cast<double>(b.count) * b.gap();
      worst = std::max(worst, b.gap());
    }
  // A weighted mean never exceeds its largest term; rounding can say otherwise.
  return std::min(s / static_cast<double>(batch.size()), worst);
}

inline double mce(const PredictionBatch& batch, std::size_t bins = 15) {
  if (batch.size() == 0) throw EmptyInput("mce of an empty batch");
  double m = 0.0;
  for (const auto& b : reliability_bins(batch, bins))
    if (b.count > 0) m = std::max(m, b.gap());
  return m;
}

/// Mean maximum confidence; labels are not needed.
inline double mmc(const PredictionBatch& batch) {
  if (batch.size() == 0) throw EmptyInput("mmc of an empty batch");
  double s = 0.0;
  for (std::size_t n = 0; n < batch.size(); ++n) s += confidence(batch.probs.row(n));
  return s / static_cast<double>(batch.size());
}

/// P(score_in > score_out) + ½·P(tie) via midranks (Mann-Whitney U).
///
/// The numerator is accumulated as the integer 2U, so the result is exactly
/// (2·wins + ties) / (2·n_in·n_out).
inline double auroc(std::span<const double> scores_in, std::span<const double> scores_out) {
  if (scores_in.empty() || scores_out.empty()) throw EmptyInput("auroc needs both score sets nonempty");
  struct Entry {
    double score;
    bool inlier;
  };
  std::vector<Entry> all;
  all.reserve(scores_in.size() + scores_out.size());
  for (double s : scores_in) all.push_back({s, true});
  for (double s : scores_out) all.push_back({s, false});
  for (const auto& e : all)
    if (std::isnan(e.score)) throw InvalidConfig("auroc: NaN score");
  std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score < b.score; });

  // Doubled midrank of a tie group at 1-based positions [lo, hi] is lo + hi.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j + 1 < all.size() && all[j + 1].score == all[i].score) ++j;
    const std::uint64_t twice_rank = (i + 1) + (j + 1);
    for (std::size_t k = i; k <= j; ++k)
      if (all[k].inlier) twice_rank_sum += twice_rank;
    i = j + 1;
  }
  const std::uint64_t n_in = scores_in.size();
  const std::uint64_t n_out = scores_out.size();
  const std::uint64_t twice_u = twice_rank_sum - n_in * (n_in + 1);
  return static_cast<double>(twice_u) / static_cast<double>(2 * n_in * n_out);
}

struct MetricsReport {
  double accuracy = 0.0;
  double nll = 0.0;
  double brier = 0.0;
  double ece = 0.0;
  double mce = 0.0;
  double mmc = 0.0;
  std::size_t n = 0;
};

inline MetricsReport evaluate(const PredictionBatch& batch, std::size_t bins = 15) {
  return {accuracy(batch), nll(batch), brier(batch), ece(batch, bins), mce(batch, bins), mmc(batch), batch.size()};
}

/// One row of the metrics CSV. Label-dependent columns stay empty for
/// unlabeled (OOD) sets.
struct MetricsRow {
  std::string method;
  std::string dataset;
  int severity = 0;
  std::uint64_t seed = 0;
  std::optional<MetricsReport> labeled;
  double mmc = 0.0;
  std::optional<double> auroc;
};

inline MetricsRow make_row(std::string method, std::string dataset, int severity, std::uint64_t seed,
                           const MetricsReport& report) {
  return {std::move(method), std::move(dataset), severity, seed, report, report.mmc, std::nullopt};
}

inline constexpr const char* kMetricsCsvHeader = "method,dataset,severity,seed,accuracy,nll,brier,ece,mce,mmc,auroc";

/// Shortest text that reads back to the same double.
inline std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline void write_metrics_row(std::ostream& os, const MetricsRow& r) {
  os << r.method << ',' << r.dataset << ',' << r.severity << ',' << r.seed << ',';
  if (r.labeled) {
    const auto& m = *r.labeled;
    os << format_real(m.accuracy) << ',' << format_real(m.nll) << ',' << format_real(m.brier) << ','
       << format_real(m.ece) << ',' << format_real(m.mce) << ',';
  } else {
    os << ",,,,,";
  }
  os << format_real(r.mmc) << ',' << (r.auroc ? format_real(*r.auroc) : std::string()) << '\n';
}

}  // namespace mola
