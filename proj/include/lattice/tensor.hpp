// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 storage for the recurrences: vectors, row-major matrices and
// rank-3 tensors, plus the handful of contractions the kernels need.

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lattice {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Vec = std::vector<double>;

class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0);
  Mat(std::size_t rows, std::size_t cols, std::vector<double> data);
  Mat(std::initializer_list<std::initializer_list<double>> rows);

  static Mat identity(std::size_t n);
  static Mat row_vector(std::span<const double> v);
  static Mat col_vector(std::span<const double> v);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  Mat transpose() const;
  void fill(double v);
  bool all_finite() const;
  bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape_str() const;

  Mat& operator+=(const Mat& o);
  Mat& operator-=(const Mat& o);
  Mat& operator*=(double s);

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Mat operator+(Mat a, const Mat& b);
Mat operator-(Mat a, const Mat& b);
Mat operator*(Mat a, double s);
Mat operator*(double s, Mat a);

class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(std::size_t n1, std::size_t n2, std::size_t n3, double fill = 0.0);

  std::size_t dim0() const { return n1_; }
  std::size_t dim1() const { return n2_; }
  std::size_t dim2() const { return n3_; }

  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * n2_ + j) * n3_ + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * n2_ + j) * n3_ + k];
  }
  const std::vector<double>& storage() const { return data_; }

 private:
  std::size_t n1_ = 0, n2_ = 0, n3_ = 0;
  std::vector<double> data_;
};

Mat matmul(const Mat& a, const Mat& b);

// out[a,i] = sum_b e[b] * P[b,a,i]. The two leading axes of P must both
// have length e.size().
Mat contract_vec_tensor(std::span<const double> e, const Tensor3& P);

// out[a,i] = m[a,i] * row[i]
Mat hadamard_broadcast_row(const Mat& m, std::span<const double> row);
// out[a,i] = m[a,i] * col[a]
Mat hadamard_broadcast_col(const Mat& m, std::span<const double> col);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

double max_abs_diff(const Mat& a, const Mat& b);
double max_abs(const Mat& a);
double frobenius(const Mat& a);

}  // namespace lattice
