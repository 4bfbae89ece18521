// Copyright 2026 The tsq Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tsq/error.hpp"
#include "tsq/rng.hpp"

namespace tsq {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      std::copy(row.begin(), row.end(), m.data_.begin() + i * c);
      ++i;
    }
    return m;
  }

  /// Entries i.i.d. N(0, stddev^2) drawn row-major from `rng`.
  static Matrix random_normal(std::size_t rows, std::size_t cols, Rng& rng,
                              double stddev = 1.0) {
    Matrix m(rows, cols);
    for (double& v : m.data_) v = stddev * rng.normal();
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  bool same_shape(const Matrix& o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  Matrix transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  Matrix& operator+=(const Matrix& o) {
    require_same_shape(o, "add");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    require_same_shape(o, "subtract");
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

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  void require_same_shape(const Matrix& o, const char* op) const {
    if (!same_shape(o)) {
      throw ShapeError(std::string("cannot ") + op + " " + shape_string() +
                       " and " + o.shape_string());
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline void require_finite(const Matrix& m, const char* where) {
  if (!m.all_finite()) {
    throw NumericalError(std::string(where) + ": non-finite entry in result");
  }
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + a.shape_string() +
                     " x " + b.shape_string() + ")");
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  require_finite(out, "matmul");
  return out;
}

/// a * a^T, exploiting symmetry.
inline Matrix gram(const Matrix& a) {
  Matrix out(a.rows(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ri = a.row(i);
    for (std::size_t j = 0; j <= i; ++j) {
      auto rj = a.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += ri[k] * rj[k];
      out(i, j) = s;
      out(j, i) = s;
    }
  }
  require_finite(out, "gram");
  return out;
}

inline double frobenius_sq(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return s;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("max_abs_diff: " + a.shape_string() + " vs " + b.shape_string());
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

inline double mean_diagonal(const Matrix& h) {
  double s = 0.0;
  for (std::size_t i = 0; i < h.rows(); ++i) s += h(i, i);
  return h.rows() == 0 ? 0.0 : s / static_cast<double>(h.rows());
}

/// h + damping * mean(diag(h)) * I
inline Matrix damped(const Matrix& h, double damping) {
  if (h.rows() != h.cols()) {
    throw ShapeError("damped: matrix is not square (" + h.shape_string() + ")");
  }
  if (!(damping >= 0.0)) throw ParameterError("damping must be >= 0");
  Matrix out = h;
  const double add = damping * mean_diagonal(h);
  for (std::size_t i = 0; i < h.rows(); ++i) out(i, i) += add;
  return out;
}

/// Lower-triangular L with h = L L^T. Throws SingularHessianError on the
/// first pivot that is not strictly positive.
inline Matrix cholesky_lower(const Matrix& h) {
  if (h.rows() != h.cols()) {
    throw ShapeError("cholesky: matrix is not square (" + h.shape_string() + ")");
  }
  const std::size_t n = h.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = h(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > 0.0) || !std::isfinite(diag)) throw SingularHessianError(j);
    const double ljj = std::sqrt(diag);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = h(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

/// Solves (h + damping * mean(diag(h)) * I) x = rhs for every column of rhs.
inline Matrix cholesky_solve(const Matrix& h, const Matrix& rhs, double damping) {
  if (h.rows() != h.cols()) {
    throw ShapeError("cholesky_solve: matrix is not square (" + h.shape_string() + ")");
  }
  if (rhs.rows() != h.rows()) {
    throw ShapeError("cholesky_solve: rhs " + rhs.shape_string() +
                     " incompatible with " + h.shape_string());
  }
  const Matrix l = cholesky_lower(damped(h, damping));
  const std::size_t n = h.rows();
  Matrix x = rhs;
  for (std::size_t c = 0; c < rhs.cols(); ++c) {
    // forward: L y = b
    for (std::size_t i = 0; i < n; ++i) {
      double s = x(i, c);
      for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * x(k, c);
      x(i, c) = s / l(i, i);
    }
    // backward: L^T x = y
    for (std::size_t i = n; i-- > 0;) {
      double s = x(i, c);
      for (std::size_t k = i + 1; k < n; ++k) s -= l(k, i) * x(k, c);
      x(i, c) = s / l(i, i);
    }
  }
  require_finite(x, "cholesky_solve");
  return x;
}

/// softmax(v / tau), shifted by max(v) before exponentiation.
inline std::vector<double> softmax_with_temperature(std::span<const double> v,
                                                    double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw ParameterError("softmax temperature must be positive and finite");
  }
  if (v.empty()) return {};
  for (double x : v) {
    if (!std::isfinite(x)) throw ParameterError("softmax input must be finite");
  }
  const double vmax = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp((v[i] - vmax) / tau);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

}  // namespace tsq
