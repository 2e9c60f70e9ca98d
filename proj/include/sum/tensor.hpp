// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "sum/error.hpp"

namespace sum {

/// Dense rank-2 array in row-major order. Value type; copies are deep.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(rows, cols));
    }
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged rows in tensor literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(r, c, std::move(data));
  }

  static Tensor identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T{1};
    return t;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  T operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  const std::vector<T>& vec() const noexcept { return data_; }

  bool same_shape(const Tensor& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape_str() const { return shape_string(rows_, cols_); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  // Same data, new shape with equal element count.
  Tensor reshaped(std::size_t rows, std::size_t cols) const {
    if (rows * cols != size()) {
      throw DimensionError("cannot reshape " + shape_str() + " to " + shape_string(rows, cols));
    }
    return Tensor(rows, cols, data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(rows_, cols_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  static std::string shape_string(std::size_t r, std::size_t c) {
    return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

namespace kernels {

// out[N x B] (+)= a[N x A] * b[A x B]
template <typename T>
void gemm_nn(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out, bool accumulate) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (!accumulate) out.fill(T{0});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    T* orow = po + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      if (av == T{0}) continue;
      const T* brow = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[A x B] += a^T b, with a[N x A], b[N x B]
template <typename T>
void gemm_tn_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out) {
  const std::size_t n = a.rows(), ka = a.cols(), m = b.cols();
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const T* brow = pb + i * m;
    for (std::size_t p = 0; p < ka; ++p) {
      const T av = pa[i * ka + p];
      if (av == T{0}) continue;
      T* orow = po + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[N x A] += g b^T, with g[N x B], b[A x B]
template <typename T>
void gemm_nt_acc(const Tensor<T>& g, const Tensor<T>& b, Tensor<T>& out) {
  const std::size_t n = g.rows(), m = g.cols(), ka = b.rows();
  const T* pg = g.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const T* grow = pg + i * m;
    T* orow = po + i * ka;
    for (std::size_t p = 0; p < ka; ++p) {
      const T* brow = pb + p * m;
      T acc{0};
      for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
      orow[p] += acc;
    }
  }
}

}  // namespace kernels

}  // namespace sum
