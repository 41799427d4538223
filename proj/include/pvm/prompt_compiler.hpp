#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "pvm/core_math.hpp"
#include "pvm/token_model.hpp"

namespace pvm {

// One rank-one term left * right^T of a weight matrix.
template <class T>
struct FactorPair {
  Vector<T> left;
  Vector<T> right;
};

// W_l = sum_k left_k right_k^T for each layer; every factor lies in the ball
// of radius B.
template <class T>
struct CoarseNetwork {
  std::size_t d = 0;
  T B = T(1);
  std::vector<std::vector<FactorPair<T>>> layers;

  long depth() const { return static_cast<long>(layers.size()); }
  std::vector<std::size_t> ranks() const;
  std::size_t max_rank() const;
  Matrix<T> weight(std::size_t layer) const;  // 0-based layer

  template <class U>
  CoarseNetwork<U> cast() const;
};

// Biased ReLU network R^p -> R with hidden width r:
// x -> W_L relu(... relu(W_1 x + b_1) ...) + b_L
struct StandardNetwork {
  std::size_t p = 0;
  std::size_t r = 0;
  std::vector<Matrix<double>> weights;
  std::vector<Vector<double>> biases;

  long depth() const { return static_cast<long>(weights.size()); }
  double forward(std::span<const double> x) const;
};

struct CapacityError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Singular values below this fraction of the largest are dropped.
inline constexpr double kRankTolerance = 1e-12;

// Pairs (sqrt(s_k) a_k, sqrt(s_k) b_k) from the SVD, ordered by s_k descending
// and then lexicographically; each left vector has its first nonzero entry
// positive. Throws when ||W||_op > B^2.
std::vector<FactorPair<double>> factorize_weight(const Matrix<double>& W, double B);

// Factorizes each matrix; B is max(1, largest factor norm) unless given.
CoarseNetwork<double> coarse_from_weights(std::span<const Matrix<double>> weights, double B = 0.0);

// Prompt with T = 2 sum r_l: for each layer in order and each factor, a token
// (left, w = 2l-1) followed by (right, w = 2l). Throws ScaleError below the
// compiled bound.
template <class T>
Prompt<T> compile_network(const CoarseNetwork<T>& net, const T& S);

// The bound rounded up to a power of two. For the floating backend, throws
// ScaleError when the result exceeds 2^kFloatingScaleExponentLimit.
template <class T>
T min_scale(std::size_t d, const mpq_class& B, long L, long t, ScaleVariant variant);

// Block embedding into d x d weights with a constant-1 channel at index
// r (hidden layers) or p (input), then factorized.
CoarseNetwork<double> embed_standard_nn(const StandardNetwork& net, std::size_t d);

// The block-embedded d x d matrices before factorization.
std::vector<Matrix<double>> embedded_weights(const StandardNetwork& net, std::size_t d);

// True iff every embedding vanishes beyond its first r coordinates.
template <class T>
bool restrict_diversity_check(const Prompt<T>& P, std::size_t r);

struct AgentAssignment {
  long layer;          // 1-based virtual layer served by the agent
  std::size_t length;  // T^a
};

// Factor pairs of each layer are dealt to that layer's agents in order; spare
// pair slots become zero pairs and an odd length ends with one zero token
// tagged 2l-1. Throws CapacityError when a layer has fewer pair slots than
// factors.
template <class T>
std::vector<AgentBlock<T>> split_among_agents(const CoarseNetwork<T>& net, std::span<const AgentAssignment> plan,
                                              const T& S);

template <class T>
nlohmann::json network_to_json(const CoarseNetwork<T>& net);
template <class T>
CoarseNetwork<T> network_from_json(const nlohmann::json& j);

nlohmann::json standard_to_json(const StandardNetwork& net);
StandardNetwork standard_from_json(const nlohmann::json& j);

}  // namespace pvm
