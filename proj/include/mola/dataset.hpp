#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mola/error.hpp"
#include "mola/linalg.hpp"

namespace mola {

/// Feature rows with integer labels in [0, num_classes).
struct Dataset {
  Matrix x;
  std::vector<std::size_t> y;
  std::size_t num_classes = 0;

  [[nodiscard]] std::size_t size() const noexcept { return x.rows(); }
  [[nodiscard]] std::size_t dim() const noexcept { return x.cols(); }
  [[nodiscard]] std::span<const double> input(std::size_t i) const { return x.row(i); }

  void validate() const {
    if (x.rows() == 0) throw InvalidConfig("dataset is empty");
    if (y.size() != x.rows()) throw DimensionMismatch("dataset: label count != row count");
    if (num_classes < 2) throw InvalidConfig("dataset: need at least two classes");
    for (std::size_t label : y)
      if (label >= num_classes)
        throw InvalidConfig("dataset: label " + std::to_string(label) + " out of range");
    if (!x.all_finite()) throw InvalidConfig("dataset: non-finite features");
  }

  [[nodiscard]] Dataset subset(std::span<const std::size_t> rows) const {
    Dataset out{Matrix(rows.size(), dim()), std::vector<std::size_t>(rows.size()), num_classes};
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto src = x.row(rows[i]);
      std::copy(src.begin(), src.end(), out.x.row(i).begin());
      out.y[i] = y[rows[i]];
    }
    return out;
  }

  /// Rows [begin, end).
  [[nodiscard]] Dataset slice(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> rows;
    for (std::size_t i = begin; i < end && i < size(); ++i) rows.push_back(i);
    return subset(rows);
  }
};

}  // namespace mola
