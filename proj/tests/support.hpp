#pragma once

#include <initializer_list>
#include <string>

#include "pvm/matrix.hpp"
#include "pvm/scalar.hpp"

namespace pvm::test {

inline mpq_class q(const std::string& s) {
  mpq_class r(s, 10);
  r.canonicalize();
  return r;
}

template <class T>
Vector<T> vec(std::initializer_list<double> xs) {
  Vector<T> v;
  for (double x : xs) v.push_back(ScalarOps<T>::from_double(x));
  return v;
}

template <class T>
Matrix<T> mat(std::size_t rows, std::size_t cols, std::initializer_list<double> xs) {
  Matrix<T> m(rows, cols);
  std::size_t k = 0;
  for (double x : xs) {
    m(k / cols, k % cols) = ScalarOps<T>::from_double(x);
    ++k;
  }
  return m;
}

inline double max_abs_diff(const Matrix<double>& a, const Matrix<double>& b) {
  double m = 0.0;
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) m = std::max(m, std::fabs(a(r, c) - b(r, c)));
  return m;
}

}  // namespace pvm::test
