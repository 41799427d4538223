#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pvm/core_math.hpp"

namespace pvm {

// Row layout of a token column (0-based rows, D = 4d + 8).
//   [0, d)        word embedding
//   [d, 2d)       scratch used by the selective-activation and aggregation layers
//   [2d, 4d)      scratch used only by the EUAF front end
//   4d            alpha_next  (alpha of the following token)
//   4d+1          gate        (S * keep-mask, later S * w of the following token)
//   4d+2          alpha       (count of nonzero tags, later the inner products)
//   4d+3          data_count  (S * N)
//   4d+4          one
//   4d+5          scale       (S)
//   4d+6          tag         (S * w)
//   4d+7          pos         (S * j)
struct SlotMap {
  std::size_t d;

  explicit SlotMap(std::size_t dim) : d(dim) {}
  std::size_t D() const { return 4 * d + 8; }
  std::size_t embed(std::size_t k) const { return k; }
  std::size_t scratch(std::size_t k) const { return d + k; }
  std::size_t wide_scratch(std::size_t k) const { return 2 * d + k; }
  std::size_t alpha_next() const { return 4 * d; }
  std::size_t gate() const { return 4 * d + 1; }
  std::size_t alpha() const { return 4 * d + 2; }
  std::size_t data_count() const { return 4 * d + 3; }
  std::size_t one() const { return 4 * d + 4; }
  std::size_t scale() const { return 4 * d + 5; }
  std::size_t tag() const { return 4 * d + 6; }
  std::size_t pos() const { return 4 * d + 7; }
};

struct PromptError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ScaleError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

template <class T>
struct Token {
  Vector<T> embedding;  // length d
  Vector<T> pos;        // length 3d + 8

  std::size_t d() const { return embedding.size(); }
  const T& scale() const { return pos[pos.size() - 3]; }
  long tag() const;    // w
  long index() const;  // j
  Vector<T> column() const;
  static Token from_column(std::span<const T> col);

  friend bool operator==(const Token& a, const Token& b) {
    return a.embedding == b.embedding && a.pos == b.pos;
  }
};

// (0_{3d+4}, 1, S, S w, S j)
template <class T>
Vector<T> positional_encoding(std::size_t d, long w, long j, const T& S);

template <class T>
Token<T> make_prompt_token(std::span<const T> u, long w, long j, const T& S);

template <class T>
Token<T> make_data_token(std::span<const T> z, long j, const T& S);

template <class T>
struct Prompt {
  std::size_t d = 0;
  long L = 0;  // virtual depth bound, tags live in [1, 2L]
  T S = T(1);
  T B = T(1);  // embedding norm bound
  std::vector<Token<T>> tokens;

  std::size_t length() const { return tokens.size(); }
  Matrix<T> matrix() const;  // D x T
};

// [H^P, h(z_1, T+1), ..., h(z_N, T+N)]
template <class T>
Matrix<T> input_matrix(const Prompt<T>& P, std::span<const Vector<T>> data);

struct Violation {
  enum class Kind { tag_range, index_order, norm, scale, layout };
  Kind kind;
  std::size_t token;  // 1-based, 0 for prompt-wide problems
  std::string message;
};

const char* violation_name(Violation::Kind k);

// An empty result means P belongs to the prompt class for its (T, L, S).
template <class T>
std::vector<Violation> validate_prompt(const Prompt<T>& P, const T* min_scale = nullptr);

// Largest number of prompt tokens sharing one tag value.
template <class T>
std::size_t max_tag_multiplicity(const Prompt<T>& P);

// Appends v_k with tag 2L + k at position T + k and raises L by ceil(K/2).
template <class T>
Prompt<T> append_irrelevant(const Prompt<T>& P, std::span<const Vector<T>> vs);

// Prefix then shifted prompt, all rescaled to S'. Throws ScaleError when S' is
// below the prefix bound for the combined depth and length.
template <class T>
Prompt<T> prefix_irrelevant(const Prompt<T>& prefix, const Prompt<T>& P, const T& S_prime);

template <class T>
struct AgentBlock {
  std::vector<Token<T>> tokens;
  long layer = 1;

  std::size_t length() const { return tokens.size(); }
};

// Tokens of all blocks in order, j renumbered 1..sum T^a, tags kept, scale S.
template <class T>
Matrix<T> concat_agents(std::span<const AgentBlock<T>> blocks, const T& S);

// Same layout as a Prompt so it can be emulated and validated.
template <class T>
Prompt<T> concat_agents_prompt(std::span<const AgentBlock<T>> blocks, const T& S, const T& B);

// ---- scale bounds ----

enum class ScaleVariant { general, compiled, prefix };

const char* scale_variant_name(ScaleVariant v);
ScaleVariant parse_scale_variant(std::string_view s);

// Exact value of the bound for the variant:
//   general   d B^{4L} T^{2L}  v 2L
//   compiled  d rbar B^{4L}    v 2L
//   prefix    d B^{4L} T^{2L}  v (2L + 1)   with L, T the combined depth and length
// `t` is T or rbar; 0 is treated as 1.
mpq_class scale_bound(ScaleVariant variant, std::size_t d, const mpq_class& B, long L, long t);

// Smallest k with 2^k >= scale_bound(...).
int scale_exponent(ScaleVariant variant, std::size_t d, const mpq_class& B, long L, long t);

// Largest scale the floating backend accepts. Rounding error grows roughly
// like ulp(S); at 2^22 it stays below 1e-6 on d <= 6, L <= 3 instances.
inline constexpr int kFloatingScaleExponentLimit = 22;

// ---- JSON ----

template <class T>
nlohmann::json scalar_to_json(const T& v);
template <class T>
T scalar_from_json(const nlohmann::json& j);

template <class T>
nlohmann::json prompt_to_json(const Prompt<T>& P);
template <class T>
Prompt<T> prompt_from_json(const nlohmann::json& j);

template <class T>
nlohmann::json data_token_to_json(const Token<T>& tok);

}  // namespace pvm
