#include "pvm/core_math.hpp"

#include <charconv>
#include <string>

namespace pvm {

const char* backend_name(Backend b) { return b == Backend::floating ? "floating" : "rational"; }

Backend parse_backend(std::string_view s) {
  if (s == "floating" || s == "float" || s == "double") return Backend::floating;
  if (s == "rational" || s == "exact") return Backend::rational;
  throw std::invalid_argument("unknown backend: " + std::string(s));
}

const char* activation_name(Activation a) { return a == Activation::relu ? "relu" : "euaf"; }

Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::relu;
  if (s == "euaf") return Activation::euaf;
  throw std::invalid_argument("unknown activation: " + std::string(s));
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string format_rational(const mpq_class& v) {
  double d = v.get_d();
  if (mpq_class(d) == v) return format_double(d);
  return v.get_str();
}

mpq_class parse_rational(std::string_view s) {
  std::string str(s);
  if (str.find_first_of(".eE") != std::string::npos) {
    double d = std::stod(str);
    return mpq_class(d);
  }
  mpq_class q(str, 10);
  q.canonicalize();
  return q;
}

template <class T>
Vector<T> phi_gate(std::span<const T> z, long j, long jp, const T& B) {
  if (!(B > 0)) throw InputDomainError("phi_gate: B must be positive");
  if (max_abs(z) > B) throw InputDomainError("phi_gate: ||z||_max exceeds B");
  const T base = 4 * B * ScalarOps<T>::from_int(jp - j);
  const T o1 = base + 2 * B, o2 = base + B, o3 = base - B, o4 = base - 2 * B;
  Vector<T> out(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) {
    out[k] = -relu(T(z[k] + o1)) + 2 * relu(T(z[k] + o2)) - 2 * relu(T(z[k] + o3)) + relu(T(z[k] + o4));
  }
  return out;
}

template <class T>
Vector<T> psi_gate(std::span<const T> z, long j, long jp, const T& B) {
  if (!(B > 0)) throw InputDomainError("psi_gate: B must be positive");
  if (max_abs(z) > B) throw InputDomainError("psi_gate: ||z||_max exceeds B");
  const T off = B * ScalarOps<T>::from_int(jp - j) + B / 2;
  Vector<T> out(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) {
    T half = z[k] / 2;
    out[k] = relu(T(half + off)) - relu(T(-half + off));
  }
  return out;
}

template <class T>
Matrix<T> attention_layer(const Matrix<T>& H, std::span<const AttentionHead<T>> heads) {
  const std::size_t D = H.rows(), n = H.cols();
  for (const auto& h : heads) {
    if (h.Q.rows() != D || h.Q.cols() != D || h.K.rows() != D || h.K.cols() != D || h.V.rows() != D ||
        h.V.cols() != D)
      throw std::invalid_argument("attention_layer: head dimension mismatch");
  }
  Matrix<T> delta(D, n);
  for (const auto& head : heads) {
    Matrix<T> q(D, n), k(D, n), v(D, n);
    for (std::size_t j = 0; j < n; ++j) {
      Vector<T> hj = H.col(j);
      q.set_col(j, matvec(head.Q, std::span<const T>(hj)));
      k.set_col(j, matvec(head.K, std::span<const T>(hj)));
      v.set_col(j, matvec(head.V, std::span<const T>(hj)));
    }
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t jp = 0; jp < n; ++jp) {
        T s(0);
        for (std::size_t r = 0; r < D; ++r) ScalarOps<T>::add_product(s, q(r, j), k(r, jp));
        T a = relu(s);
        for (std::size_t r = 0; r < D; ++r) ScalarOps<T>::add_product(delta(r, j), a, v(r, jp));
      }
    }
  }
  Matrix<T> out(D, n);
  for (std::size_t r = 0; r < D; ++r)
    for (std::size_t j = 0; j < n; ++j) out(r, j) = H(r, j) + delta(r, j);
  return out;
}

template <class T>
Matrix<T> ffn_layer(const Matrix<T>& H, const FeedForward<T>& ff) {
  const std::size_t D = H.rows(), n = H.cols(), w = ff.W1.rows();
  if (ff.W1.cols() != D || ff.W2.rows() != D || ff.W2.cols() != w)
    throw std::invalid_argument("ffn_layer: dimension mismatch");
  Matrix<T> out(D, n);
  for (std::size_t j = 0; j < n; ++j) {
    Vector<T> hj = H.col(j);
    Vector<T> hidden = matvec(ff.W1, std::span<const T>(hj));
    for (auto& x : hidden) x = activate(ff.activation, x);
    Vector<T> d = matvec(ff.W2, std::span<const T>(hidden));
    for (std::size_t r = 0; r < D; ++r) out(r, j) = hj[r] + d[r];
  }
  return out;
}

#define PVM_INSTANTIATE(T)                                                                      \
  template Vector<T> phi_gate<T>(std::span<const T>, long, long, const T&);                    \
  template Vector<T> psi_gate<T>(std::span<const T>, long, long, const T&);                    \
  template Matrix<T> attention_layer<T>(const Matrix<T>&, std::span<const AttentionHead<T>>); \
  template Matrix<T> ffn_layer<T>(const Matrix<T>&, const FeedForward<T>&);

PVM_INSTANTIATE(double)
PVM_INSTANTIATE(mpq_class)

}  // namespace pvm
