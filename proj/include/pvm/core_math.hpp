#pragma once

#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "pvm/matrix.hpp"

namespace pvm {

enum class Activation { relu, euaf };

const char* activation_name(Activation a);
Activation parse_activation(std::string_view s);

struct InputDomainError : std::domain_error {
  using std::domain_error::domain_error;
};

template <class T>
T relu(const T& x) {
  return x > 0 ? x : T(0);
}

// sawtooth on [0, inf), soft-sign on (-inf, 0)
template <class T>
T euaf(const T& x) {
  using Ops = ScalarOps<T>;
  if (x >= 0) {
    T t = x - 2 * Ops::floor((x + 1) / 2);
    return Ops::abs(t);
  }
  return x / (1 + Ops::abs(x));
}

template <class T>
T activate(Activation a, const T& x) {
  return a == Activation::relu ? relu(x) : euaf(x);
}

// z * 1{j == j'} via four ReLUs; needs ||z||_max <= B
template <class T>
Vector<T> phi_gate(std::span<const T> z, long j, long jp, const T& B);

// z * 1{j' >= j} via two ReLUs; needs ||z||_max <= B
template <class T>
Vector<T> psi_gate(std::span<const T> z, long j, long jp, const T& B);

template <class T>
struct AttentionHead {
  Matrix<T> Q, K, V;
};

template <class T>
struct FeedForward {
  Matrix<T> W1;  // hidden x D
  Matrix<T> W2;  // D x hidden
  Activation activation = Activation::relu;

  std::size_t width() const { return W1.rows(); }
};

// Reference kernels: dense, serial, straight from the layer formulas.
// Column j of the result is h_j + sum_m sum_j' relu(<Q_m h_j, K_m h_j'>) V_m h_j'.
template <class T>
Matrix<T> attention_layer(const Matrix<T>& H, std::span<const AttentionHead<T>> heads);

// H + W2 act(W1 H)
template <class T>
Matrix<T> ffn_layer(const Matrix<T>& H, const FeedForward<T>& ff);

}  // namespace pvm
