// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0

#include "lattice/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace lattice {

namespace {

void require_positive(std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) {
    throw ShapeError("matrix dimensions must be positive, got " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
}

}  // namespace

Mat::Mat(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {
  require_positive(rows, cols);
}

Mat::Mat(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  require_positive(rows, cols);
  if (data_.size() != rows * cols) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Mat::Mat(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ ? rows.begin()->size() : 0;
  require_positive(rows_, cols_);
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("ragged initializer list");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Mat Mat::identity(std::size_t n) {
  Mat m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Mat Mat::row_vector(std::span<const double> v) {
  return Mat(1, v.size(), std::vector<double>(v.begin(), v.end()));
}

Mat Mat::col_vector(std::span<const double> v) {
  return Mat(v.size(), 1, std::vector<double>(v.begin(), v.end()));
}

Mat Mat::transpose() const {
  Mat t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

void Mat::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Mat::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

std::string Mat::shape_str() const {
  std::ostringstream os;
  os << rows_ << "x" << cols_;
  return os.str();
}

Mat& Mat::operator+=(const Mat& o) {
  if (!same_shape(o)) throw ShapeError("add: " + shape_str() + " vs " + o.shape_str());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

Mat& Mat::operator-=(const Mat& o) {
  if (!same_shape(o)) throw ShapeError("sub: " + shape_str() + " vs " + o.shape_str());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
  return *this;
}

Mat& Mat::operator*=(double s) {
  for (double& x : data_) x *= s;
  return *this;
}

Mat operator+(Mat a, const Mat& b) { return a += b; }
Mat operator-(Mat a, const Mat& b) { return a -= b; }
Mat operator*(Mat a, double s) { return a *= s; }
Mat operator*(double s, Mat a) { return a *= s; }

Tensor3::Tensor3(std::size_t n1, std::size_t n2, std::size_t n3, double fill)
    : n1_(n1), n2_(n2), n3_(n3), data_(n1 * n2 * n3, fill) {
  if (n1 == 0 || n2 == 0 || n3 == 0) throw ShapeError("tensor dimensions must be positive");
}

Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + a.shape_str() + " x " + b.shape_str());
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Mat out(n, m);
  double* o = out.data();
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = o + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Mat contract_vec_tensor(std::span<const double> e, const Tensor3& P) {
  if (P.dim0() != e.size() || P.dim1() != e.size()) {
    throw ShapeError("contract_vec_tensor: vector length " + std::to_string(e.size()) +
                     " does not match tensor leading axes");
  }
  Mat out(P.dim1(), P.dim2());
  for (std::size_t b = 0; b < P.dim0(); ++b) {
    const double eb = e[b];
    for (std::size_t a = 0; a < P.dim1(); ++a)
      for (std::size_t i = 0; i < P.dim2(); ++i) out(a, i) += eb * P(b, a, i);
  }
  return out;
}

Mat hadamard_broadcast_row(const Mat& m, std::span<const double> row) {
  if (row.size() != m.cols()) {
    throw ShapeError("hadamard_broadcast_row: row length " + std::to_string(row.size()) +
                     " vs " + m.shape_str());
  }
  Mat out = m;
  for (std::size_t a = 0; a < m.rows(); ++a)
    for (std::size_t i = 0; i < m.cols(); ++i) out(a, i) *= row[i];
  return out;
}

Mat hadamard_broadcast_col(const Mat& m, std::span<const double> col) {
  if (col.size() != m.rows()) {
    throw ShapeError("hadamard_broadcast_col: column length " + std::to_string(col.size()) +
                     " vs " + m.shape_str());
  }
  Mat out = m;
  for (std::size_t a = 0; a < m.rows(); ++a)
    for (std::size_t i = 0; i < m.cols(); ++i) out(a, i) *= col[a];
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw ShapeError("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

double max_abs_diff(const Mat& a, const Mat& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: " + a.shape_str() + " vs " + b.shape_str());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

double max_abs(const Mat& a) {
  double m = 0.0;
  for (double x : a.storage()) m = std::max(m, std::abs(x));
  return m;
}

double frobenius(const Mat& a) { return norm2(a.storage()); }

}  // namespace lattice
