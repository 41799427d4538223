#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pvm/scalar.hpp"

namespace pvm {

template <class T>
using Vector = std::vector<T>;

// Dense row-major matrix. Zero-sized shapes are allowed so that an empty
// prompt (T = 0) is still a matrix.
template <class T>
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, T(0)) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }

  Vector<T> col(std::size_t c) const {
    Vector<T> out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }
  void set_col(std::size_t c, std::span<const T> v) {
    if (v.size() != rows_) throw std::invalid_argument("set_col: length mismatch");
    for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = v[r];
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  Matrix transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  // append a column on the right
  void push_col(std::span<const T> v) {
    if (rows_ == 0 && cols_ == 0) rows_ = v.size();
    if (v.size() != rows_) throw std::invalid_argument("push_col: length mismatch");
    std::vector<T> next(rows_ * (cols_ + 1));
    for (std::size_t r = 0; r < rows_; ++r) {
      for (std::size_t c = 0; c < cols_; ++c) next[r * (cols_ + 1) + c] = std::move(data_[r * cols_ + c]);
      next[r * (cols_ + 1) + cols_] = v[r];
    }
    data_ = std::move(next);
    ++cols_;
  }

  std::size_t nonzeros() const {
    std::size_t n = 0;
    for (const auto& v : data_)
      if (!ScalarOps<T>::is_zero(v)) ++n;
    return n;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  template <class U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) {
        if constexpr (std::is_same_v<U, T>)
          out(r, c) = (*this)(r, c);
        else
          out(r, c) = ScalarOps<U>::from_double(ScalarOps<T>::to_double((*this)(r, c)));
      }
    return out;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <class T>
Vector<T> matvec(const Matrix<T>& A, std::span<const T> x) {
  if (A.cols() != x.size()) throw std::invalid_argument("matvec: dimension mismatch");
  Vector<T> y(A.rows(), T(0));
  for (std::size_t r = 0; r < A.rows(); ++r) {
    T acc(0);
    for (std::size_t c = 0; c < A.cols(); ++c) ScalarOps<T>::add_product(acc, A(r, c), x[c]);
    y[r] = acc;
  }
  return y;
}

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
  T acc(0);
  for (std::size_t i = 0; i < a.size(); ++i) ScalarOps<T>::add_product(acc, a[i], b[i]);
  return acc;
}

template <class T>
T max_abs(std::span<const T> v) {
  T m(0);
  for (const auto& x : v) {
    T a = ScalarOps<T>::abs(x);
    if (a > m) m = a;
  }
  return m;
}

template <class T>
Matrix<T> matmul(const Matrix<T>& A, const Matrix<T>& B) {
  if (A.cols() != B.rows()) throw std::invalid_argument("matmul: dimension mismatch");
  Matrix<T> C(A.rows(), B.cols());
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t k = 0; k < A.cols(); ++k) {
      if (ScalarOps<T>::is_zero(A(i, k))) continue;
      for (std::size_t j = 0; j < B.cols(); ++j) ScalarOps<T>::add_product(C(i, j), A(i, k), B(k, j));
    }
  return C;
}

// a b^T
template <class T>
Matrix<T> outer(std::span<const T> a, std::span<const T> b) {
  Matrix<T> M(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) M(i, j) = a[i] * b[j];
  return M;
}

template <class U, class T>
Vector<U> cast_vector(std::span<const T> v) {
  Vector<U> out;
  out.reserve(v.size());
  for (const auto& x : v) {
    if constexpr (std::is_same_v<U, T>)
      out.push_back(x);
    else
      out.push_back(ScalarOps<U>::from_double(ScalarOps<T>::to_double(x)));
  }
  return out;
}

}  // namespace pvm
