#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "selpred/errors.hpp"

namespace selpred {

/// Dense 2-D array of doubles in row-major order. The workhorse carrier for
/// embeddings (N x D), logits (N x K) and weight matrices.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  static Matrix zeros(std::size_t r, std::size_t c) { return Matrix(r, c); }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const {
    return {data.data() + i * cols, cols};
  }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
  }
};

/// Per-column mean and population standard deviation (1/N variance).
inline std::pair<std::vector<double>, std::vector<double>> column_mean_std(
    const Matrix& m) {
  if (m.rows == 0) throw DimensionError("column_mean_std: matrix has no rows");
  const double n = static_cast<double>(m.rows);
  std::vector<double> means(m.cols, 0.0), stds(m.cols, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) means[j] += m(i, j);
  for (auto& v : means) v /= n;
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) {
      const double d = m(i, j) - means[j];
      stds[j] += d * d;
    }
  for (auto& v : stds) v = std::sqrt(v / n);
  return {std::move(means), std::move(stds)};
}

/// Subtract each column's mean. Result columns have mean 0; idempotent.
inline Matrix center_columns(const Matrix& m) {
  if (m.rows == 0) throw DimensionError("center_columns: matrix has no rows");
  std::vector<double> means(m.cols, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) means[j] += m(i, j);
  for (auto& v : means) v /= static_cast<double>(m.rows);
  Matrix out(m.rows, m.cols);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) out(i, j) = m(i, j) - means[j];
  return out;
}

/// a * b, or a^T * b when transpose_a is set.
inline Matrix matmul(const Matrix& a, const Matrix& b, bool transpose_a = false) {
  const std::size_t ar = transpose_a ? a.cols : a.rows;
  const std::size_t ac = transpose_a ? a.rows : a.cols;
  if (ac != b.rows)
    throw DimensionError("matmul: inner dimensions disagree (" +
                         std::to_string(ac) + " vs " + std::to_string(b.rows) + ")");
  Matrix out(ar, b.cols);
  if (transpose_a) {
    // (a^T b)_{ij} = sum_k a_{ki} b_{kj}; iterate k outermost to stay row-major.
    for (std::size_t k = 0; k < a.rows; ++k)
      for (std::size_t i = 0; i < ar; ++i) {
        const double aki = a(k, i);
        for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += aki * b(k, j);
      }
  } else {
    for (std::size_t i = 0; i < ar; ++i)
      for (std::size_t k = 0; k < a.cols; ++k) {
        const double aik = a(i, k);
        for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += aik * b(k, j);
      }
  }
  return out;
}

/// Index of the row maximum; ties go to the lowest column index.
inline std::size_t argmax_row(const Matrix& m, std::size_t i) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < m.cols; ++j)
    if (m(i, j) > m(i, best)) best = j;
  return best;
}

}  // namespace selpred
