#include "pvm/token_model.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace pvm {

namespace {

template <class T>
long exact_long(const T& v, const char* what) {
  if constexpr (std::is_same_v<T, double>) {
    if (std::floor(v) != v) throw PromptError(std::string(what) + " is not an integer");
    return static_cast<long>(v);
  } else {
    if (v.get_den() != 1) throw PromptError(std::string(what) + " is not an integer");
    return v.get_num().get_si();
  }
}

template <class T>
T squared_norm(std::span<const T> v) {
  T acc(0);
  for (const auto& x : v) ScalarOps<T>::add_product(acc, x, x);
  return acc;
}

// ||v|| <= B, exact for rationals; doubles get a relative slack of 1e-12 so
// that vectors normalised in floating point still pass.
template <class T>
bool within_norm(std::span<const T> v, const T& B) {
  T n2 = squared_norm(v);
  T b2 = B * B;
  if constexpr (std::is_same_v<T, double>)
    return n2 <= b2 * (1.0 + 1e-12);
  else
    return n2 <= b2;
}

template <class T>
mpq_class to_mpq(const T& v) {
  if constexpr (std::is_same_v<T, double>)
    return mpq_class(v);
  else
    return v;
}

}  // namespace

template <class T>
long Token<T>::tag() const {
  return exact_long<T>(T(pos[pos.size() - 2] / scale()), "tag");
}

template <class T>
long Token<T>::index() const {
  return exact_long<T>(T(pos[pos.size() - 1] / scale()), "position");
}

template <class T>
Vector<T> Token<T>::column() const {
  Vector<T> c;
  c.reserve(embedding.size() + pos.size());
  c.insert(c.end(), embedding.begin(), embedding.end());
  c.insert(c.end(), pos.begin(), pos.end());
  return c;
}

template <class T>
Token<T> Token<T>::from_column(std::span<const T> col) {
  if (col.size() < 8 || (col.size() - 8) % 4 != 0) throw PromptError("token column has no valid length");
  const std::size_t d = (col.size() - 8) / 4;
  Token<T> t;
  t.embedding.assign(col.begin(), col.begin() + static_cast<long>(d));
  t.pos.assign(col.begin() + static_cast<long>(d), col.end());
  return t;
}

template <class T>
Vector<T> positional_encoding(std::size_t d, long w, long j, const T& S) {
  if (!(S > 0)) throw PromptError("positional_encoding: S must be positive");
  Vector<T> p(3 * d + 8, T(0));
  p[3 * d + 4] = T(1);
  p[3 * d + 5] = S;
  p[3 * d + 6] = S * ScalarOps<T>::from_int(w);
  p[3 * d + 7] = S * ScalarOps<T>::from_int(j);
  return p;
}

template <class T>
Token<T> make_prompt_token(std::span<const T> u, long w, long j, const T& S) {
  if (w < 1) throw PromptError("prompt token tag must be at least 1");
  if (j < 1) throw PromptError("token position must be positive");
  Token<T> t;
  t.embedding.assign(u.begin(), u.end());
  t.pos = positional_encoding(u.size(), w, j, S);
  return t;
}

template <class T>
Token<T> make_data_token(std::span<const T> z, long j, const T& S) {
  if (j < 1) throw PromptError("token position must be positive");
  Token<T> t;
  t.embedding.assign(z.begin(), z.end());
  t.pos = positional_encoding(z.size(), 0, j, S);
  return t;
}

template <class T>
Matrix<T> Prompt<T>::matrix() const {
  const std::size_t D = 4 * d + 8;
  Matrix<T> H(D, tokens.size());
  for (std::size_t j = 0; j < tokens.size(); ++j) H.set_col(j, tokens[j].column());
  return H;
}

template <class T>
Matrix<T> input_matrix(const Prompt<T>& P, std::span<const Vector<T>> data) {
  const std::size_t D = 4 * P.d + 8, T0 = P.length();
  Matrix<T> H(D, T0 + data.size());
  for (std::size_t j = 0; j < T0; ++j) H.set_col(j, P.tokens[j].column());
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].size() != P.d) throw PromptError("data vector has wrong dimension");
    auto tok = make_data_token<T>(data[i], static_cast<long>(T0 + i + 1), P.S);
    H.set_col(T0 + i, tok.column());
  }
  return H;
}

const char* violation_name(Violation::Kind k) {
  switch (k) {
    case Violation::Kind::tag_range: return "w out of range";
    case Violation::Kind::index_order: return "index order";
    case Violation::Kind::norm: return "norm";
    case Violation::Kind::scale: return "scale";
    case Violation::Kind::layout: return "layout";
  }
  return "?";
}

template <class T>
std::vector<Violation> validate_prompt(const Prompt<T>& P, const T* min_scale) {
  std::vector<Violation> out;
  if (!(P.S > 0)) out.push_back({Violation::Kind::scale, 0, "S must be positive"});
  if (min_scale && P.S < *min_scale) out.push_back({Violation::Kind::scale, 0, "S below the required bound"});
  if (P.L < 0) out.push_back({Violation::Kind::tag_range, 0, "negative depth bound"});
  for (std::size_t k = 0; k < P.tokens.size(); ++k) {
    const auto& t = P.tokens[k];
    const std::size_t j = k + 1;
    if (t.embedding.size() != P.d || t.pos.size() != 3 * P.d + 8) {
      out.push_back({Violation::Kind::layout, j, "token dimension mismatch"});
      continue;
    }
    bool layout_ok = t.pos[3 * P.d + 4] == T(1) && t.pos[3 * P.d + 5] == P.S;
    for (std::size_t r = 0; r < 3 * P.d + 4; ++r)
      if (!ScalarOps<T>::is_zero(t.pos[r])) layout_ok = false;
    if (!layout_ok) {
      out.push_back({Violation::Kind::layout, j, "positional encoding layout"});
      continue;
    }
    long w = 0, idx = 0;
    try {
      w = t.tag();
      idx = t.index();
    } catch (const PromptError& e) {
      out.push_back({Violation::Kind::layout, j, e.what()});
      continue;
    }
    if (w < 1 || w > 2 * P.L) out.push_back({Violation::Kind::tag_range, j, "w out of range"});
    if (idx != static_cast<long>(j)) out.push_back({Violation::Kind::index_order, j, "index order"});
    if (!within_norm<T>(t.embedding, P.B)) out.push_back({Violation::Kind::norm, j, "embedding norm exceeds B"});
  }
  return out;
}

template <class T>
std::size_t max_tag_multiplicity(const Prompt<T>& P) {
  std::map<long, std::size_t> count;
  std::size_t best = 0;
  for (const auto& t : P.tokens) best = std::max(best, ++count[t.tag()]);
  return best;
}

template <class T>
Prompt<T> append_irrelevant(const Prompt<T>& P, std::span<const Vector<T>> vs) {
  Prompt<T> out = P;
  const long T0 = static_cast<long>(P.length());
  for (std::size_t k = 0; k < vs.size(); ++k) {
    if (vs[k].size() != P.d) throw PromptError("append_irrelevant: wrong dimension");
    if (!within_norm<T>(vs[k], P.B)) throw PromptError("append_irrelevant: norm exceeds B");
    const long kk = static_cast<long>(k) + 1;
    out.tokens.push_back(make_prompt_token<T>(vs[k], 2 * P.L + kk, T0 + kk, P.S));
  }
  out.L = P.L + static_cast<long>((vs.size() + 1) / 2);
  return out;
}

template <class T>
Prompt<T> prefix_irrelevant(const Prompt<T>& prefix, const Prompt<T>& P, const T& S_prime) {
  if (prefix.length() > 0 && prefix.d != P.d) throw PromptError("prefix_irrelevant: dimension mismatch");
  Prompt<T> out;
  out.d = P.d;
  out.L = prefix.L + P.L;
  out.B = prefix.B > P.B ? prefix.B : P.B;
  out.S = S_prime;
  const long Tt = static_cast<long>(prefix.length());
  const long total = Tt + static_cast<long>(P.length());
  if (to_mpq(S_prime) < scale_bound(ScaleVariant::prefix, P.d, to_mpq(out.B), out.L, total))
    throw ScaleError("prefix_irrelevant: S' below the bound");
  for (const auto& t : prefix.tokens) out.tokens.push_back(make_prompt_token<T>(t.embedding, t.tag(), t.index(), S_prime));
  for (const auto& t : P.tokens)
    out.tokens.push_back(make_prompt_token<T>(t.embedding, t.tag() + 2 * prefix.L, t.index() + Tt, S_prime));
  return out;
}

template <class T>
Matrix<T> concat_agents(std::span<const AgentBlock<T>> blocks, const T& S) {
  std::size_t n = 0, d = 0;
  bool first = true;
  for (const auto& b : blocks)
    for (const auto& t : b.tokens) {
      if (first) d = t.d(), first = false;
      if (t.d() != d) throw PromptError("concat_agents: mixed dimensions");
      ++n;
    }
  Matrix<T> H(4 * d + 8, n);
  std::size_t j = 0;
  for (const auto& b : blocks)
    for (const auto& t : b.tokens) {
      auto tok = make_prompt_token<T>(t.embedding, t.tag(), static_cast<long>(j + 1), S);
      H.set_col(j++, tok.column());
    }
  return H;
}

template <class T>
Prompt<T> concat_agents_prompt(std::span<const AgentBlock<T>> blocks, const T& S, const T& B) {
  Matrix<T> H = concat_agents(blocks, S);
  Prompt<T> P;
  P.d = H.rows() >= 8 ? (H.rows() - 8) / 4 : 0;
  P.S = S;
  P.B = B;
  long L = 0;
  for (const auto& b : blocks) L = std::max(L, b.layer);
  P.L = L;
  for (std::size_t j = 0; j < H.cols(); ++j) P.tokens.push_back(Token<T>::from_column(H.col(j)));
  return P;
}

const char* scale_variant_name(ScaleVariant v) {
  switch (v) {
    case ScaleVariant::general: return "general";
    case ScaleVariant::compiled: return "compiled";
    case ScaleVariant::prefix: return "prefix";
  }
  return "?";
}

ScaleVariant parse_scale_variant(std::string_view s) {
  if (s == "general") return ScaleVariant::general;
  if (s == "compiled") return ScaleVariant::compiled;
  if (s == "prefix") return ScaleVariant::prefix;
  throw std::invalid_argument("unknown scale variant: " + std::string(s));
}

mpq_class scale_bound(ScaleVariant variant, std::size_t d, const mpq_class& B, long L, long t) {
  if (d == 0 || L < 1 || t < 0) throw std::invalid_argument("scale_bound: arguments must be positive");
  if (B < 1) throw std::invalid_argument("scale_bound: B must be at least 1");
  const mpq_class tt(std::max(t, 1L));
  mpq_class b4L(1), t2L(1);
  for (long i = 0; i < 4 * L; ++i) b4L *= B;
  for (long i = 0; i < 2 * L; ++i) t2L *= tt;
  mpq_class value;
  mpq_class floor_term(2 * L);
  switch (variant) {
    case ScaleVariant::general:
      value = mpq_class(static_cast<unsigned long>(d)) * b4L * t2L;
      break;
    case ScaleVariant::compiled:
      value = mpq_class(static_cast<unsigned long>(d)) * tt * b4L;
      break;
    case ScaleVariant::prefix:
      value = mpq_class(static_cast<unsigned long>(d)) * b4L * t2L;
      floor_term = 2 * L + 1;
      break;
  }
  return value > floor_term ? value : floor_term;
}

int scale_exponent(ScaleVariant variant, std::size_t d, const mpq_class& B, long L, long t) {
  const mpq_class bound = scale_bound(variant, d, B, L, t);
  int k = 0;
  mpq_class p(1);
  while (p < bound) {
    p *= 2;
    ++k;
  }
  return k;
}

template <class T>
nlohmann::json scalar_to_json(const T& v) {
  if constexpr (std::is_same_v<T, double>) {
    return v;
  } else {
    double d = v.get_d();
    if (mpq_class(d) == v) return d;
    return v.get_str();
  }
}

template <class T>
T scalar_from_json(const nlohmann::json& j) {
  if (j.is_number()) return ScalarOps<T>::from_double(j.get<double>());
  if (j.is_string()) {
    mpq_class q = parse_rational(j.get<std::string>());
    if constexpr (std::is_same_v<T, double>)
      return q.get_d();
    else
      return q;
  }
  throw std::invalid_argument("expected a number or a rational string");
}

template <class T>
nlohmann::json prompt_to_json(const Prompt<T>& P) {
  nlohmann::json toks = nlohmann::json::array();
  for (const auto& t : P.tokens) {
    nlohmann::json u = nlohmann::json::array();
    for (const auto& x : t.embedding) u.push_back(scalar_to_json(x));
    toks.push_back({{"u", u}, {"w", t.tag()}, {"j", t.index()}});
  }
  return {{"d", P.d},
          {"T", P.length()},
          {"L", P.L},
          {"S", scalar_to_json(P.S)},
          {"B", scalar_to_json(P.B)},
          {"tokens", toks}};
}

template <class T>
Prompt<T> prompt_from_json(const nlohmann::json& j) {
  Prompt<T> P;
  P.d = j.at("d").get<std::size_t>();
  P.L = j.at("L").get<long>();
  P.S = scalar_from_json<T>(j.at("S"));
  P.B = scalar_from_json<T>(j.at("B"));
  for (const auto& t : j.at("tokens")) {
    Vector<T> u;
    for (const auto& x : t.at("u")) u.push_back(scalar_from_json<T>(x));
    if (u.size() != P.d) throw PromptError("token embedding has wrong dimension");
    Token<T> tok;
    tok.embedding = u;
    // tags outside [1, 2L] are kept so that validate_prompt can report them
    tok.pos = positional_encoding(P.d, t.at("w").get<long>(), t.at("j").get<long>(), P.S);
    P.tokens.push_back(std::move(tok));
  }
  if (j.contains("T") && j.at("T").get<std::size_t>() != P.length())
    throw PromptError("token count does not match T");
  return P;
}

template <class T>
nlohmann::json data_token_to_json(const Token<T>& tok) {
  nlohmann::json z = nlohmann::json::array();
  for (const auto& x : tok.embedding) z.push_back(scalar_to_json(x));
  return {{"z", z}, {"j", tok.index()}};
}

#define PVM_INSTANTIATE(T)                                                                           \
  template struct Token<T>;                                                                          \
  template struct Prompt<T>;                                                                         \
  template Vector<T> positional_encoding<T>(std::size_t, long, long, const T&);                      \
  template Token<T> make_prompt_token<T>(std::span<const T>, long, long, const T&);                  \
  template Token<T> make_data_token<T>(std::span<const T>, long, const T&);                          \
  template Matrix<T> input_matrix<T>(const Prompt<T>&, std::span<const Vector<T>>);                  \
  template std::vector<Violation> validate_prompt<T>(const Prompt<T>&, const T*);                    \
  template std::size_t max_tag_multiplicity<T>(const Prompt<T>&);                                    \
  template Prompt<T> append_irrelevant<T>(const Prompt<T>&, std::span<const Vector<T>>);             \
  template Prompt<T> prefix_irrelevant<T>(const Prompt<T>&, const Prompt<T>&, const T&);             \
  template Matrix<T> concat_agents<T>(std::span<const AgentBlock<T>>, const T&);                     \
  template Prompt<T> concat_agents_prompt<T>(std::span<const AgentBlock<T>>, const T&, const T&);    \
  template nlohmann::json scalar_to_json<T>(const T&);                                               \
  template T scalar_from_json<T>(const nlohmann::json&);                                             \
  template nlohmann::json prompt_to_json<T>(const Prompt<T>&);                                       \
  template Prompt<T> prompt_from_json<T>(const nlohmann::json&);                                     \
  template nlohmann::json data_token_to_json<T>(const Token<T>&);

PVM_INSTANTIATE(double)
PVM_INSTANTIATE(mpq_class)

}  // namespace pvm
