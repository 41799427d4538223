#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pvm/core_math.hpp"
#include "pvm/prompt_compiler.hpp"
#include "pvm/token_model.hpp"
#include "pvm/transformer_vm.hpp"

namespace pvm {

// z1 = W_1 z, z_l = W_l act(z_{l-1}); the input itself is not activated.
template <class T>
std::vector<Vector<T>> forward_virtual(std::span<const Matrix<T>> weights, std::span<const T> z, Activation act);

template <class T>
std::vector<Vector<T>> forward_coarse(const CoarseNetwork<T>& net, std::span<const T> z, Activation act);

// Effective weights of a tagged token sequence for datum i (1-based):
// element 0 is W_{1,i}, element l-1 is W_l. Sums over consecutive
// (2l-1, 2l) pairs; for i = 1 and a last tag of 1, adds
// u_T * sum_{w_j = 1} u_j^T to the first layer.
template <class T>
std::vector<Matrix<T>> extract_virtual_weights(std::span<const Token<T>> tokens, long L, std::size_t i);

template <class T>
std::vector<Matrix<T>> extract_virtual_weights(const Prompt<T>& P, long L, std::size_t i);

struct EquivalenceReport {
  Backend backend = Backend::floating;
  double tolerance = 0.0;
  // errors[i][l]: max-abs difference over the whole generated token
  std::vector<std::vector<double>> errors;
  double max_error = 0.0;
  bool exact = false;  // every compared entry identical
  bool pass = false;
  bool refused = false;
  std::string message;
  // first failing (i, l), 1-based; zero when passing
  std::size_t fail_datum = 0;
  long fail_layer = 0;
};

// Runs the transformer and the oracle on the same prompt and data and
// compares token T + N l + i with (oracle layer-l output, p(-l, T + N l + i, S)).
// A ScaleError or PromptError yields refused = true instead of a failure.
template <class T>
EquivalenceReport verify_equivalence(const Engine<T>& engine, const Prompt<T>& prompt, std::span<const Vector<T>> data,
                                     long L, double tolerance, Activation act, const EmulateOptions& opts = {});
template <class T>
EquivalenceReport verify_equivalence(const TransformerParams<T>& params, const Prompt<T>& prompt,
                                     std::span<const Vector<T>> data, long L, double tolerance, Activation act,
                                     const EmulateOptions& opts = {});

nlohmann::json report_to_json(const EquivalenceReport& r);

std::vector<double> singular_values(const Matrix<double>& M);

// Count of singular values above rel_tol * sigma_max.
std::size_t numerical_rank(const Matrix<double>& M, double rel_tol = 1e-10);

}  // namespace pvm
