#pragma once

// Dense row-major linear algebra for the last-layer Laplace math.
// Matrices here are at most a few hundred rows, so everything is
// straightforward O(n^3) code without blocking.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mola/error.hpp"

namespace mola {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionMismatch("matrix data length " + std::to_string(data_.size()) +
                              " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionMismatch("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix diagonal(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] bool square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }

  [[nodiscard]] std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  [[nodiscard]] std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  [[nodiscard]] const std::vector<double>& data() const noexcept { return data_; }
  [[nodiscard]] std::vector<double>& data() noexcept { return data_; }

  [[nodiscard]] Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  [[nodiscard]] double trace() const {
    double t = 0.0;
    for (std::size_t i = 0; i < std::min(rows_, cols_); ++i) t += (*this)(i, i);
    return t;
  }

  [[nodiscard]] double max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Matrix& operator+=(const Matrix& o) {
    require_same_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    require_same_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Matrix& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
  friend Matrix operator*(Matrix a, double s) { return a *= s; }
  friend Matrix operator*(double s, Matrix a) { return a *= s; }

  friend Matrix operator*(const Matrix& a, const Matrix& b) {
    if (a.cols_ != b.rows_) throw DimensionMismatch("matmul inner dimensions differ");
    Matrix out(a.rows_, b.cols_);
    for (std::size_t i = 0; i < a.rows_; ++i) {
      for (std::size_t k = 0; k < a.cols_; ++k) {
        const double aik = a(i, k);
        if (aik == 0.0) continue;
        const auto brow = b.row(k);
        auto orow = out.row(i);
        for (std::size_t j = 0; j < b.cols_; ++j) orow[j] += aik * brow[j];
      }
    }
    return out;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  void require_same_shape(const Matrix& o) const {
    if (rows_ != o.rows_ || cols_ != o.cols_) throw DimensionMismatch("matrix shapes differ");
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Vector matvec(const Matrix& m, std::span<const double> v) {
  if (m.cols() != v.size()) throw DimensionMismatch("matvec: matrix cols != vector length");
  Vector out(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) acc += row[c] * v[c];
    out[r] = acc;
  }
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionMismatch("dot: lengths differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline double frobenius(const Matrix& m) { return norm2(m.data()); }

inline Matrix outer(std::span<const double> a, std::span<const double> b) {
  Matrix m(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) m(i, j) = a[i] * b[j];
  return m;
}

/// Kronecker product a ⊗ b: block (i, k) is a(i, k) * b.
inline Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.rows(); ++j)
        for (std::size_t l = 0; l < b.cols(); ++l)
          out(i * b.rows() + j, k * b.cols() + l) = aik * b(j, l);
    }
  return out;
}

/// vᵀ M v.
inline double quad_form(std::span<const double> v, const Matrix& m) {
  if (!m.square() || m.rows() != v.size()) throw DimensionMismatch("quad_form: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] == 0.0) continue;
    const auto row = m.row(i);
    double inner = 0.0;
    for (std::size_t j = 0; j < v.size(); ++j) inner += row[j] * v[j];
    acc += v[i] * inner;
  }
  return acc;
}

inline bool is_symmetric(const Matrix& m, double rel_tol = 1e-8) {
  if (!m.square()) return false;
  const double scale = std::max(1.0, m.max_abs());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = i + 1; j < m.cols(); ++j)
      if (std::abs(m(i, j) - m(j, i)) > rel_tol * scale) return false;
  return true;
}

/// (M + Mᵀ) / 2.
inline Matrix symmetrized(const Matrix& m) {
  Matrix s(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) s(i, j) = 0.5 * (m(i, j) + m(j, i));
  return s;
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
class SpdMatrix {
 public:
  SpdMatrix(Matrix lower, double jitter) : lower_(std::move(lower)), jitter_(jitter) {}

  [[nodiscard]] std::size_t dim() const noexcept { return lower_.rows(); }
  [[nodiscard]] const Matrix& lower() const noexcept { return lower_; }
  /// Diagonal shift that was actually added before factorization succeeded.
  [[nodiscard]] double jitter() const noexcept { return jitter_; }

  [[nodiscard]] Matrix reconstruct() const { return lower_ * lower_.transposed(); }

 private:
  Matrix lower_;
  double jitter_;
};

namespace detail {

inline bool try_cholesky(const Matrix& a, double jitter, Matrix& lower) {
  const std::size_t n = a.rows();
  lower = Matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a(j, j) + jitter;
    const auto lj = lower.row(j);
    for (std::size_t k = 0; k < j; ++k) diag -= lj[k] * lj[k];
    if (!(diag > 0.0) || !std::isfinite(diag)) return false;
    const double ljj = std::sqrt(diag);
    lower(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      const auto li = lower.row(i);
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= li[k] * lj[k];
      lower(i, j) = s / ljj;
    }
  }
  return true;
}

}  // namespace detail

/// Factor M + jitter·I after symmetrizing M.
///
/// On failure the jitter grows by 10x, at most 8 times, and never beyond
/// 1e-4·trace(M)/dim. A zero starting jitter escalates from
/// 1e-12·trace(M)/dim instead.
inline SpdMatrix cholesky(const Matrix& m, double jitter = 0.0) {
  if (!m.square()) throw DimensionMismatch("cholesky: matrix is not square");
  if (!m.all_finite()) throw NotPositiveDefinite("cholesky: non-finite entries");
  if (!is_symmetric(m)) throw NotSymmetric("cholesky: input exceeds 1e-8 relative asymmetry");
  const Matrix a = symmetrized(m);
  const std::size_t n = a.rows();
  const double mean_diag = n == 0 ? 0.0 : a.trace() / static_cast<double>(n);
  const double cap = 1e-4 * mean_diag;

  Matrix lower;
  if (detail::try_cholesky(a, jitter, lower)) return {std::move(lower), jitter};

  double current = jitter > 0.0 ? jitter : 1e-12 * mean_diag;
  for (int attempt = 0; attempt < 8; ++attempt) {
    if (jitter > 0.0 || attempt > 0) current *= 10.0;
    if (!(current > 0.0) || current > cap) break;
    if (detail::try_cholesky(a, current, lower)) return {std::move(lower), current};
  }
  throw NotPositiveDefinite("cholesky failed after jitter escalation (dim " + std::to_string(n) + ")");
}

/// Solve L y = b in place.
inline void forward_substitute(const Matrix& lower, std::span<double> b) {
  for (std::size_t i = 0; i < b.size(); ++i) {
    const auto li = lower.row(i);
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= li[k] * b[k];
    b[i] = s / li[i];
  }
}

/// Solve Lᵀ x = y in place.
inline void backward_substitute(const Matrix& lower, std::span<double> y) {
  const std::size_t n = y.size();
  for (std::size_t ii = n; ii-- > 0;) {
    double s = y[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= lower(k, ii) * y[k];
    y[ii] = s / lower(ii, ii);
  }
}

inline Vector solve_spd(const SpdMatrix& f, std::span<const double> b) {
  if (b.size() != f.dim()) throw DimensionMismatch("solve_spd: rhs length != factor dimension");
  Vector x(b.begin(), b.end());
  forward_substitute(f.lower(), x);
  backward_substitute(f.lower(), x);
  return x;
}

inline double logdet_spd(const SpdMatrix& f) {
  double s = 0.0;
  for (std::size_t i = 0; i < f.dim(); ++i) s += std::log(f.lower()(i, i));
  return 2.0 * s;
}

/// Explicit inverse (L Lᵀ)⁻¹, symmetrized.
inline Matrix inverse_spd(const SpdMatrix& f) {
  const std::size_t n = f.dim();
  Matrix inv(n, n);
  Vector col(n);
  for (std::size_t j = 0; j < n; ++j) {
    std::fill(col.begin(), col.end(), 0.0);
    col[j] = 1.0;
    forward_substitute(f.lower(), col);
    backward_substitute(f.lower(), col);
    for (std::size_t i = 0; i < n; ++i) inv(i, j) = col[i];
  }
  return symmetrized(inv);
}

struct SymmetricEigen {
  Vector values;   // ascending
  Matrix vectors;  // column i pairs with values[i]
};

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Converges quadratically once off-diagonal mass is small; sweeps stop when
/// the off-diagonal Frobenius norm drops below 1e-15 of the total.
inline SymmetricEigen eigen_sym(const Matrix& m) {
  if (!m.square()) throw DimensionMismatch("eigen_sym: matrix is not square");
  if (!is_symmetric(m)) throw NotSymmetric("eigen_sym: input exceeds 1e-8 relative asymmetry");
  const std::size_t n = m.rows();
  Matrix a = symmetrized(m);
  Matrix v = Matrix::identity(n);
  const double total = std::max(frobenius(a), 1e-300);

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += 2.0 * a(p, q) * a(p, q);
    if (std::sqrt(off) <= 1e-15 * total) break;

    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a(i, i) < a(j, j); });
  SymmetricEigen out{Vector(n), Matrix(n, n)};
  for (std::size_t c = 0; c < n; ++c) {
    out.values[c] = a(order[c], order[c]);
    for (std::size_t r = 0; r < n; ++r) out.vectors(r, c) = v(r, order[c]);
  }
  return out;
}

inline double min_eigenvalue_sym(const Matrix& m) {
  if (m.rows() == 0) throw DimensionMismatch("min_eigenvalue_sym: empty matrix");
  return eigen_sym(m).values.front();
}

}  // namespace mola
