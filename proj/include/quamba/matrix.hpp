#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "quamba/error.hpp"

namespace quamba {

// Dense row-major matrix. Rows are tokens (or time steps) throughout the
// library and columns are features.
template <typename T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw Error("matrix data size " + std::to_string(data_.size()) +
                  " does not match shape " + std::to_string(rows_) + "x" +
                  std::to_string(cols_));
    }
  }

  static BasicMatrix identity(std::size_t n) {
    BasicMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  BasicMatrix transposed() const {
    BasicMatrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  friend bool operator==(const BasicMatrix&, const BasicMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<float>;
using MatrixD = BasicMatrix<double>;

// out = x * w, with x: T x K and w: K x N. Each output element accumulates
// over k in ascending order, so a single row gives the same bits as the same
// row inside a larger batch.
template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& x, const BasicMatrix<T>& w) {
  if (x.cols() != w.rows()) {
    throw Error("matmul: inner dimensions differ (" + std::to_string(x.cols()) +
                " vs " + std::to_string(w.rows()) + ")");
  }
  BasicMatrix<T> out(x.rows(), w.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto o = out.row(r);
    const auto xr = x.row(r);
    for (std::size_t k = 0; k < x.cols(); ++k) {
      const T xv = xr[k];
      const auto wr = w.row(k);
      for (std::size_t n = 0; n < o.size(); ++n) o[n] += xv * wr[n];
    }
  }
  return out;
}

// Matrix-vector product y = m * v.
template <typename T>
std::vector<T> matvec(const BasicMatrix<T>& m, std::span<const T> v) {
  if (m.cols() != v.size()) throw Error("matvec: dimension mismatch");
  std::vector<T> y(m.rows(), T{});
  for (std::size_t r = 0; r < m.rows(); ++r) {
    T acc{};
    const auto mr = m.row(r);
    for (std::size_t c = 0; c < v.size(); ++c) acc += mr[c] * v[c];
    y[r] = acc;
  }
  return y;
}

// Columns [begin, begin + count) as a new matrix.
template <typename T>
BasicMatrix<T> column_slice(const BasicMatrix<T>& m, std::size_t begin, std::size_t count) {
  if (begin + count > m.cols()) throw Error("column_slice: out of range");
  BasicMatrix<T> out(m.rows(), count);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = m(r, begin + c);
  return out;
}

}  // namespace quamba
