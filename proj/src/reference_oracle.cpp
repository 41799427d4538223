#include "pvm/reference_oracle.hpp"

#include <Eigen/SVD>
#include <algorithm>

namespace pvm {

template <class T>
std::vector<Vector<T>> forward_virtual(std::span<const Matrix<T>> weights, std::span<const T> z, Activation act) {
  std::vector<Vector<T>> out;
  Vector<T> cur(z.begin(), z.end());
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (l > 0)
      for (auto& v : cur) v = activate(act, v);
    cur = matvec(weights[l], std::span<const T>(cur));
    out.push_back(cur);
  }
  return out;
}

template <class T>
std::vector<Vector<T>> forward_coarse(const CoarseNetwork<T>& net, std::span<const T> z, Activation act) {
  std::vector<Matrix<T>> Ws;
  for (std::size_t l = 0; l < net.layers.size(); ++l) Ws.push_back(net.weight(l));
  return forward_virtual<T>(Ws, z, act);
}

template <class T>
std::vector<Matrix<T>> extract_virtual_weights(std::span<const Token<T>> tokens, long L, std::size_t i) {
  if (L < 1) throw std::invalid_argument("extract_virtual_weights: L must be positive");
  if (i < 1) throw std::invalid_argument("extract_virtual_weights: datum index is 1-based");
  const std::size_t d = tokens.empty() ? 0 : tokens[0].d();
  std::vector<Matrix<T>> Ws(static_cast<std::size_t>(L), Matrix<T>(d, d));
  std::vector<long> tags;
  for (const auto& t : tokens) tags.push_back(t.tag());
  auto add_outer = [d](Matrix<T>& W, const Vector<T>& a, const Vector<T>& b) {
    for (std::size_t r = 0; r < d; ++r) {
      if (ScalarOps<T>::is_zero(a[r])) continue;
      for (std::size_t c = 0; c < d; ++c) ScalarOps<T>::add_product(W(r, c), a[r], b[c]);
    }
  };
  for (std::size_t j = 0; j + 1 < tokens.size(); ++j) {
    const long w = tags[j];
    if (w < 1 || w % 2 == 0 || tags[j + 1] != w + 1) continue;
    const long l = (w + 1) / 2;
    if (l > L) continue;
    add_outer(Ws[static_cast<std::size_t>(l - 1)], tokens[j].embedding, tokens[j + 1].embedding);
  }
  if (i == 1 && !tokens.empty() && tags.back() == 1) {
    Vector<T> sum(d, T(0));
    for (std::size_t j = 0; j < tokens.size(); ++j)
      if (tags[j] == 1)
        for (std::size_t c = 0; c < d; ++c) sum[c] += tokens[j].embedding[c];
    add_outer(Ws[0], tokens.back().embedding, sum);
  }
  return Ws;
}

template <class T>
std::vector<Matrix<T>> extract_virtual_weights(const Prompt<T>& P, long L, std::size_t i) {
  auto Ws = extract_virtual_weights<T>(std::span<const Token<T>>(P.tokens), L, i);
  if (P.tokens.empty()) Ws.assign(static_cast<std::size_t>(L), Matrix<T>(P.d, P.d));
  return Ws;
}

template <class T>
EquivalenceReport verify_equivalence(const TransformerParams<T>& params, const Prompt<T>& prompt,
                                     std::span<const Vector<T>> data, long L, double tolerance, Activation act,
                                     const EmulateOptions& opts) {
  return verify_equivalence(Engine<T>(params), prompt, data, L, tolerance, act, opts);
}

template <class T>
EquivalenceReport verify_equivalence(const Engine<T>& engine, const Prompt<T>& prompt, std::span<const Vector<T>> data,
                                     long L, double tolerance, Activation act, const EmulateOptions& opts) {
  EquivalenceReport rep;
  rep.backend = ScalarOps<T>::backend;
  rep.tolerance = tolerance;
  Emulation<T> em;
  try {
    em = emulate_network<T>(engine, prompt, data, L, opts);
  } catch (const ScaleError& e) {
    rep.refused = true;
    rep.message = e.what();
    return rep;
  } catch (const PromptError& e) {
    rep.refused = true;
    rep.message = e.what();
    return rep;
  }
  const std::size_t N = data.size();
  const long T0 = static_cast<long>(prompt.length());
  rep.exact = true;
  rep.errors.assign(N, std::vector<double>(static_cast<std::size_t>(L), 0.0));
  for (std::size_t i = 1; i <= N; ++i) {
    auto Ws = extract_virtual_weights(prompt, L, i);
    auto expect = forward_virtual<T>(Ws, data[i - 1], act);
    for (long l = 1; l <= L; ++l) {
      const long j = T0 + static_cast<long>(N) * l + static_cast<long>(i);
      Vector<T> want = expect[static_cast<std::size_t>(l - 1)];
      auto pos = positional_encoding<T>(prompt.d, -l, j, prompt.S);
      want.insert(want.end(), pos.begin(), pos.end());
      const auto& got = em.generated[static_cast<std::size_t>(l - 1) * N + (i - 1)];
      double err = 0.0;
      for (std::size_t k = 0; k < want.size(); ++k) {
        if (got[k] == want[k]) continue;
        rep.exact = false;
        err = std::max(err, ScalarOps<T>::to_double(ScalarOps<T>::abs(T(got[k] - want[k]))));
        if (err == 0.0) err = std::numeric_limits<double>::min();
      }
      rep.errors[i - 1][static_cast<std::size_t>(l - 1)] = err;
      rep.max_error = std::max(rep.max_error, err);
      if (err > tolerance && rep.fail_datum == 0) {
        rep.fail_datum = i;
        rep.fail_layer = l;
      }
    }
  }
  rep.pass = rep.fail_datum == 0;
  if (!rep.pass)
    rep.message = "mismatch at datum " + std::to_string(rep.fail_datum) + ", layer " + std::to_string(rep.fail_layer);
  return rep;
}

nlohmann::json report_to_json(const EquivalenceReport& r) {
  return {{"backend", backend_name(r.backend)},
          {"tolerance", r.tolerance},
          {"errors", r.errors},
          {"max_error", r.max_error},
          {"exact", r.exact},
          {"pass", r.pass},
          {"refused", r.refused},
          {"message", r.message},
          {"fail_datum", r.fail_datum},
          {"fail_layer", r.fail_layer}};
}

std::vector<double> singular_values(const Matrix<double>& M) {
  Eigen::MatrixXd A(static_cast<long>(M.rows()), static_cast<long>(M.cols()));
  for (std::size_t r = 0; r < M.rows(); ++r)
    for (std::size_t c = 0; c < M.cols(); ++c) A(static_cast<long>(r), static_cast<long>(c)) = M(r, c);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A);
  const auto& s = svd.singularValues();
  return {s.data(), s.data() + s.size()};
}

std::size_t numerical_rank(const Matrix<double>& M, double rel_tol) {
  auto s = singular_values(M);
  if (s.empty() || s[0] == 0.0) return 0;
  return static_cast<std::size_t>(
      std::count_if(s.begin(), s.end(), [&](double v) { return v > rel_tol * s[0]; }));
}

#define PVM_INSTANTIATE(T)                                                                                     \
  template std::vector<Vector<T>> forward_virtual<T>(std::span<const Matrix<T>>, std::span<const T>,           \
                                                     Activation);                                              \
  template std::vector<Vector<T>> forward_coarse<T>(const CoarseNetwork<T>&, std::span<const T>, Activation); \
  template std::vector<Matrix<T>> extract_virtual_weights<T>(std::span<const Token<T>>, long, std::size_t);    \
  template std::vector<Matrix<T>> extract_virtual_weights<T>(const Prompt<T>&, long, std::size_t);             \
  template EquivalenceReport verify_equivalence<T>(const TransformerParams<T>&, const Prompt<T>&,             \
                                                   std::span<const Vector<T>>, long, double, Activation,       \
                                                   const EmulateOptions&);                                     \
  template EquivalenceReport verify_equivalence<T>(const Engine<T>&, const Prompt<T>&, std::span<const Vector<T>>, \
                                                   long, double, Activation, const EmulateOptions&);

PVM_INSTANTIATE(double)
PVM_INSTANTIATE(mpq_class)

}  // namespace pvm
