#include "pvm/transformer_vm.hpp"

#include <array>
#include <ostream>

#include "pvm/kernels.hpp"

namespace pvm {

namespace {

template <class T>
AttentionHead<T> zero_head(std::size_t D) {
  return {Matrix<T>(D, D), Matrix<T>(D, D), Matrix<T>(D, D)};
}

template <class T>
FeedForward<T> zero_ffn(std::size_t D) {
  return {Matrix<T>(D, D), Matrix<T>(D, D), Activation::relu};
}

template <class T>
FeedForward<T> ffn(std::size_t width, std::size_t D, Activation a = Activation::relu) {
  return {Matrix<T>(width, D), Matrix<T>(D, width), a};
}

constexpr std::array<long, 4> kPhiCoeff = {-1, 2, -2, 1};

// copy sigma(-h) of the embedding into scratch
template <class T>
TransformerLayer<T> layer_negative_part(const SlotMap& s) {
  const std::size_t D = s.D(), d = s.d;
  TransformerLayer<T> layer;
  layer.heads.push_back(zero_head<T>(D));
  layer.ff = ffn<T>(d, D);
  for (std::size_t k = 0; k < d; ++k) {
    layer.ff.W1(k, s.embed(k)) = -1;
    layer.ff.W2(s.scratch(k), k) = 1;
  }
  return layer;
}

// embedding <- h if w >= 0, relu(h) if w <= -1; scratch cleared
template <class T>
TransformerLayer<T> layer_selective_relu(const SlotMap& s) {
  const std::size_t D = s.D(), d = s.d;
  const T half = ScalarOps<T>::ratio(1, 2);
  TransformerLayer<T> layer;
  layer.heads.push_back(zero_head<T>(D));
  layer.ff = ffn<T>(3 * d, D);
  auto& W1 = layer.ff.W1;
  auto& W2 = layer.ff.W2;
  for (std::size_t k = 0; k < d; ++k) {
    W1(k, s.scratch(k)) = half;
    W1(k, s.tag()) = -1;
    W1(k, s.scale()) = -half;
    W1(d + k, s.scratch(k)) = -half;
    W1(d + k, s.tag()) = -1;
    W1(d + k, s.scale()) = -half;
    W1(2 * d + k, s.scratch(k)) = 1;
    W2(s.embed(k), k) = 1;
    W2(s.embed(k), d + k) = -1;
    W2(s.scratch(k), 2 * d + k) = -1;
  }
  return layer;
}

// alpha <- S (#tokens with w != 0), data_count <- S N, gate <- S delta_j
template <class T>
TransformerLayer<T> layer_keep_mask(const SlotMap& s) {
  const std::size_t D = s.D();
  TransformerLayer<T> layer;
  struct Spec {
    std::vector<std::pair<std::size_t, long>> k0, k1;  // key rows for the two query slots
    std::size_t target;
    long coeff;
  };
  const std::vector<Spec> specs = {
      {{{s.tag(), -1}}, {}, s.alpha(), 1},
      {{{s.scale(), -1}}, {{s.tag(), -1}}, s.alpha(), -1},
      {{{s.tag(), 1}}, {}, s.alpha(), 1},
      {{{s.scale(), -1}}, {{s.tag(), 1}}, s.alpha(), -1},
      {{{s.tag(), 4}}, {{s.scale(), 3}}, s.data_count(), -1},
      {{{s.tag(), 4}}, {{s.scale(), 2}}, s.data_count(), 2},
      {{{s.tag(), 4}}, {}, s.data_count(), -2},
      {{{s.tag(), 4}}, {{s.scale(), -1}}, s.data_count(), 1},
  };
  for (const auto& sp : specs) {
    auto h = zero_head<T>(D);
    h.Q(0, s.one()) = 1;
    for (auto [r, c] : sp.k0) h.K(0, r) = ScalarOps<T>::from_int(c);
    if (!sp.k1.empty()) {
      h.Q(1, s.one()) = 1;
      for (auto [r, c] : sp.k1) h.K(1, r) = ScalarOps<T>::from_int(c);
    }
    h.V(sp.target, s.one()) = ScalarOps<T>::from_int(sp.coeff);
    layer.heads.push_back(std::move(h));
  }
  layer.ff = ffn<T>(6, D);
  auto& W1 = layer.ff.W1;
  auto& W2 = layer.ff.W2;
  const std::array<long, 4> c = {7, 6, 4, 3};
  for (std::size_t u = 0; u < 4; ++u) {
    W1(u, s.scale()) = ScalarOps<T>::from_int(c[u]);
    W1(u, s.alpha()) = 4;
    W1(u, s.pos()) = -4;
    W2(s.gate(), u) = ScalarOps<T>::from_int(kPhiCoeff[u]);
  }
  W1(4, s.tag()) = 1;
  W2(s.gate(), 4) = 1;
  W1(5, s.scale()) = -1;
  W1(5, s.tag()) = 1;
  W2(s.gate(), 5) = -1;
  return layer;
}

// embedding <- embedding * delta_j; alpha and gate cleared
template <class T>
TransformerLayer<T> layer_apply_mask(const SlotMap& s) {
  const std::size_t D = s.D(), d = s.d;
  TransformerLayer<T> layer;
  layer.heads.push_back(zero_head<T>(D));
  layer.ff = ffn<T>(4 * d + 2, D);
  auto& W1 = layer.ff.W1;
  auto& W2 = layer.ff.W2;
  const std::array<long, 4> c = {2, 1, -1, -2};
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t k = 0; k < d; ++k) {
      const std::size_t u = t * d + k;
      W1(u, s.embed(k)) = 1;
      W1(u, s.gate()) = -4;
      W1(u, s.scale()) = ScalarOps<T>::from_int(c[t]);
      W2(s.embed(k), u) = ScalarOps<T>::from_int(-kPhiCoeff[t]);
    }
  W1(4 * d, s.alpha()) = 1;
  W2(s.alpha(), 4 * d) = -1;
  W1(4 * d + 1, s.gate()) = 1;
  W2(s.gate(), 4 * d + 1) = -1;
  return layer;
}

// alpha_j <- <h_j, sum of h_j' with w_j' = 1 - w_j / 2>
template <class T>
TransformerLayer<T> layer_inner_products(const SlotMap& s) {
  const std::size_t D = s.D(), d = s.d;
  TransformerLayer<T> layer;
  const std::array<long, 4> c = {10, 9, 7, 6};
  for (std::size_t m = 0; m < 4; ++m) {
    auto h = zero_head<T>(D);
    for (std::size_t k = 0; k < d; ++k) {
      h.Q(k, s.embed(k)) = 1;
      h.K(k, s.embed(k)) = 1;
    }
    h.Q(d, s.one()) = 1;
    h.Q(d + 1, s.one()) = 1;
    h.Q(d + 2, s.tag()) = -4;
    h.K(d, s.tag()) = -8;
    h.K(d + 1, s.scale()) = ScalarOps<T>::from_int(c[m]);
    h.K(d + 2, s.one()) = 1;
    h.V(s.alpha(), s.one()) = ScalarOps<T>::from_int(kPhiCoeff[m]);
    layer.heads.push_back(std::move(h));
  }
  layer.ff = zero_ffn<T>(D);
  return layer;
}

// alpha <- alpha of the next token; gate <- S w of the next token
template <class T>
TransformerLayer<T> layer_shift(const SlotMap& s) {
  const std::size_t D = s.D();
  TransformerLayer<T> layer;
  const std::array<long, 4> offset = {-2, -3, -5, -6};
  for (std::size_t m = 0; m < 4; ++m) {
    auto h = zero_head<T>(D);
    h.Q(0, s.one()) = 1;
    h.Q(1, s.pos()) = -4;
    h.K(0, s.alpha()) = 1;
    h.K(0, s.pos()) = 4;
    h.K(0, s.scale()) = ScalarOps<T>::from_int(offset[m]);
    h.K(1, s.one()) = 1;
    h.V(s.alpha_next(), s.one()) = ScalarOps<T>::from_int(kPhiCoeff[m]);
    layer.heads.push_back(std::move(h));
  }
  for (std::size_t m = 0; m < 4; ++m) {
    auto h = zero_head<T>(D);
    h.Q(0, s.one()) = 1;
    h.Q(1, s.scale()) = 1;
    h.Q(2, s.pos()) = -4;
    h.Q(2, s.data_count()) = 4;
    h.Q(2, s.scale()) = ScalarOps<T>::from_int(offset[m]);
    h.K(0, s.tag()) = 1;
    h.K(0, s.scale()) = -1;
    h.K(1, s.pos()) = 4;
    h.K(2, s.scale()) = 1;
    h.V(s.gate(), s.one()) = ScalarOps<T>::from_int(kPhiCoeff[m]);
    layer.heads.push_back(std::move(h));
  }
  layer.ff = ffn<T>(4, D);
  auto& W1 = layer.ff.W1;
  auto& W2 = layer.ff.W2;
  W1(0, s.alpha_next()) = 1;
  W1(1, s.alpha_next()) = -1;
  W1(2, s.alpha()) = 1;
  W1(3, s.alpha()) = -1;
  W2(s.alpha_next(), 0) = -1;
  W2(s.alpha_next(), 1) = 1;
  W2(s.alpha(), 0) = 1;
  W2(s.alpha(), 1) = -1;
  W2(s.alpha(), 2) = -1;
  W2(s.alpha(), 3) = 1;
  return layer;
}

// sum of rank-one contributions, then the positional part of the next token
template <class T>
TransformerLayer<T> layer_aggregate(const SlotMap& s) {
  const std::size_t D = s.D(), d = s.d;
  TransformerLayer<T> layer;
  const std::array<long, 4> offset = {6, 5, 3, 2};
  for (std::size_t m = 0; m < 4; ++m) {
    auto h = zero_head<T>(D);
    h.Q(0, s.one()) = 1;
    h.Q(1, s.gate()) = 8;
    h.K(0, s.alpha()) = 1;
    h.K(0, s.tag()) = 4;
    h.K(0, s.scale()) = ScalarOps<T>::from_int(offset[m]);
    h.K(1, s.one()) = 1;
    for (std::size_t k = 0; k < d; ++k) h.V(s.scratch(k), s.embed(k)) = ScalarOps<T>::from_int(kPhiCoeff[m]);
    layer.heads.push_back(std::move(h));
  }
  const std::size_t rows = s.data_count() + 1;  // every row before `one`
  const std::size_t tag_u = 2 * rows, scale_u = 2 * rows + 2;
  layer.ff = ffn<T>(2 * rows + 4, D);
  auto& W1 = layer.ff.W1;
  auto& W2 = layer.ff.W2;
  auto plus = [](std::size_t r) { return 2 * r; };
  auto minus = [](std::size_t r) { return 2 * r + 1; };
  for (std::size_t r = 0; r < rows; ++r) {
    W1(plus(r), r) = 1;
    W1(minus(r), r) = -1;
  }
  W1(tag_u, s.tag()) = 1;
  W1(tag_u + 1, s.tag()) = -1;
  W1(scale_u, s.scale()) = 1;
  W1(scale_u + 1, s.scale()) = -1;
  for (std::size_t k = 0; k < d; ++k) {
    W2(s.embed(k), plus(s.embed(k))) = -1;
    W2(s.embed(k), minus(s.embed(k))) = 1;
    W2(s.embed(k), plus(s.scratch(k))) = 1;
    W2(s.embed(k), minus(s.scratch(k))) = -1;
  }
  for (std::size_t r = d; r < rows; ++r) {
    W2(r, plus(r)) = -1;
    W2(r, minus(r)) = 1;
  }
  W2(s.tag(), tag_u) = -1;
  W2(s.tag(), tag_u + 1) = 1;
  W2(s.tag(), plus(s.gate())) = 1;
  W2(s.tag(), minus(s.gate())) = -1;
  W2(s.pos(), scale_u) = 1;
  W2(s.pos(), scale_u + 1) = -1;
  return layer;
}

// euaf(h) of the embedding into scratch
template <class T>
TransformerLayer<T> layer_euaf_copy(const SlotMap& s) {
  const std::size_t D = s.D(), d = s.d;
  TransformerLayer<T> layer;
  layer.heads.push_back(zero_head<T>(D));
  layer.ff = ffn<T>(d, D, Activation::euaf);
  for (std::size_t k = 0; k < d; ++k) {
    layer.ff.W1(k, s.embed(k)) = 1;
    layer.ff.W2(s.scratch(k), k) = 1;
  }
  return layer;
}

// four gated copies: h and euaf(h), each split by the sign of the tag
template <class T>
TransformerLayer<T> layer_euaf_split(const SlotMap& s) {
  const std::size_t D = s.D(), d = s.d;
  TransformerLayer<T> layer;
  layer.heads.push_back(zero_head<T>(D));
  layer.ff = ffn<T>(8 * d + 2, D);
  auto& W1 = layer.ff.W1;
  auto& W2 = layer.ff.W2;
  const std::size_t C = 8 * d, Cp = 8 * d + 1;
  W1(C, s.tag()) = 1;
  W1(Cp, s.scale()) = -1;
  W1(Cp, s.tag()) = -1;
  for (std::size_t k = 0; k < d; ++k) {
    const std::size_t A = k, Bu = d + k, Ap = 2 * d + k, Bp = 3 * d + k;
    const std::size_t P = 4 * d + k, M = 5 * d + k, P2 = 6 * d + k, M2 = 7 * d + k;
    W1(A, s.embed(k)) = -1;
    W1(A, s.tag()) = 1;
    W1(Bu, s.embed(k)) = 1;
    W1(Bu, s.tag()) = 1;
    W1(Ap, s.scratch(k)) = -1;
    W1(Ap, s.scale()) = -1;
    W1(Ap, s.tag()) = -1;
    W1(Bp, s.scratch(k)) = 1;
    W1(Bp, s.scale()) = -1;
    W1(Bp, s.tag()) = -1;
    W1(P, s.embed(k)) = 1;
    W1(M, s.embed(k)) = -1;
    W1(P2, s.scratch(k)) = 1;
    W1(M2, s.scratch(k)) = -1;

    W2(s.embed(k), P) = -1;
    W2(s.embed(k), M) = 1;
    W2(s.embed(k), A) = 1;
    W2(s.embed(k), C) = -1;
    W2(s.scratch(k), P2) = -1;
    W2(s.scratch(k), M2) = 1;
    W2(s.scratch(k), Bu) = 1;
    W2(s.scratch(k), C) = -1;
    W2(s.wide_scratch(k), Ap) = 1;
    W2(s.wide_scratch(k), Cp) = -1;
    W2(s.wide_scratch(d + k), Bp) = 1;
    W2(s.wide_scratch(d + k), Cp) = -1;
  }
  return layer;
}

// recombine the gated copies into the embedding and clear rows d..4d-1
template <class T>
TransformerLayer<T> layer_euaf_merge(const SlotMap& s) {
  const std::size_t D = s.D(), d = s.d, rows = 4 * d;
  TransformerLayer<T> layer;
  layer.heads.push_back(zero_head<T>(D));
  layer.ff = ffn<T>(2 * rows, D);
  auto& W1 = layer.ff.W1;
  auto& W2 = layer.ff.W2;
  auto plus = [](std::size_t r) { return r; };
  auto minus = [rows](std::size_t r) { return rows + r; };
  for (std::size_t r = 0; r < rows; ++r) {
    W1(plus(r), r) = 1;
    W1(minus(r), r) = -1;
  }
  for (std::size_t k = 0; k < d; ++k) {
    W2(k, plus(k)) = -2;
    W2(k, minus(k)) = 1;
    W2(k, plus(d + k)) = 1;
    W2(k, plus(2 * d + k)) = -1;
    W2(k, plus(3 * d + k)) = 1;
  }
  for (std::size_t r = d; r < rows; ++r) {
    W2(r, plus(r)) = -1;
    W2(r, minus(r)) = 1;
  }
  return layer;
}

template <class T>
void check_dims(const TransformerParams<T>& params, const Matrix<T>& H) {
  if (H.rows() != params.token_dim()) throw std::invalid_argument("token dimension does not match the transformer");
}

}  // namespace

template <class T>
std::size_t TransformerParams<T>::nonzeros() const {
  std::size_t n = 0;
  for (const auto& l : layers) {
    for (const auto& h : l.heads) n += h.Q.nonzeros() + h.K.nonzeros() + h.V.nonzeros();
    n += l.ff.W1.nonzeros() + l.ff.W2.nonzeros();
  }
  return n;
}

template <class T>
T TransformerParams<T>::max_abs_entry() const {
  T m(0);
  auto upd = [&m](const Matrix<T>& M) {
    T a = max_abs(M.data());
    if (a > m) m = a;
  };
  for (const auto& l : layers) {
    for (const auto& h : l.heads) {
      upd(h.Q);
      upd(h.K);
      upd(h.V);
    }
    upd(l.ff.W1);
    upd(l.ff.W2);
  }
  return m;
}

template <class T>
std::size_t TransformerParams<T>::max_heads() const {
  std::size_t m = 0;
  for (const auto& l : layers) m = std::max(m, l.heads.size());
  return m;
}

template <class T>
std::size_t TransformerParams<T>::max_ffn_width() const {
  std::size_t m = 0;
  for (const auto& l : layers) m = std::max(m, l.ff.width());
  return m;
}

template <class T>
template <class U>
TransformerParams<U> TransformerParams<T>::cast() const {
  TransformerParams<U> out;
  out.d = d;
  for (const auto& l : layers) {
    TransformerLayer<U> nl;
    for (const auto& h : l.heads) nl.heads.push_back({h.Q.template cast<U>(), h.K.template cast<U>(), h.V.template cast<U>()});
    nl.ff = {l.ff.W1.template cast<U>(), l.ff.W2.template cast<U>(), l.ff.activation};
    out.layers.push_back(std::move(nl));
  }
  return out;
}

template <class T>
TransformerParams<T> build_theta_star(std::size_t d) {
  if (d < 1) throw std::invalid_argument("build_theta_star: d must be positive");
  const SlotMap s(d);
  TransformerParams<T> p;
  p.d = d;
  p.layers.push_back(layer_negative_part<T>(s));
  p.layers.push_back(layer_selective_relu<T>(s));
  p.layers.push_back(layer_keep_mask<T>(s));
  p.layers.push_back(layer_apply_mask<T>(s));
  p.layers.push_back(layer_inner_products<T>(s));
  p.layers.push_back(layer_shift<T>(s));
  p.layers.push_back(layer_aggregate<T>(s));
  return p;
}

template <class T>
TransformerParams<T> build_theta_hash(std::size_t d) {
  if (d < 1) throw std::invalid_argument("build_theta_hash: d must be positive");
  const SlotMap s(d);
  TransformerParams<T> p;
  p.d = d;
  p.layers.push_back(layer_euaf_copy<T>(s));
  p.layers.push_back(layer_euaf_split<T>(s));
  p.layers.push_back(layer_euaf_merge<T>(s));
  p.layers.push_back(layer_keep_mask<T>(s));
  p.layers.push_back(layer_apply_mask<T>(s));
  p.layers.push_back(layer_inner_products<T>(s));
  p.layers.push_back(layer_shift<T>(s));
  p.layers.push_back(layer_aggregate<T>(s));
  return p;
}

const char* kernel_name(Kernel k) { return k == Kernel::reference ? "reference" : "optimized"; }

template <class T>
Matrix<T> apply_transformer(const TransformerParams<T>& params, const Matrix<T>& H, Kernel kernel) {
  check_dims(params, H);
  if (kernel == Kernel::reference) {
    Matrix<T> X = H;
    for (const auto& l : params.layers) X = ffn_layer(attention_layer<T>(X, l.heads), l.ff);
    return X;
  }
  const std::size_t D = H.rows(), n = H.cols();
  std::vector<T> x(D * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t r = 0; r < D; ++r) x[j * D + r] = H(r, j);
  for (const auto& l : params.layers) x = LayerPlan<T>(l.heads, l.ff, D).apply(x, n, false);
  Matrix<T> out(D, n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t r = 0; r < D; ++r) out(r, j) = x[j * D + r];
  return out;
}

template <class T>
Engine<T>::Engine(TransformerParams<T> params) : params_(std::move(params)) {
  const std::size_t D = params_.token_dim();
  for (const auto& l : params_.layers) plans_.emplace_back(l.heads, l.ff, D);
}

template <class T>
GenerationTrace<T> Engine<T>::generate(const Matrix<T>& H0, std::size_t K, const GenerateOptions& opts) const {
  check_dims(params_, H0);
  if (H0.cols() < 1) throw std::invalid_argument("generate: empty input");
  const std::size_t D = H0.rows();
  GenerationTrace<T> trace;

  std::vector<T> cols(D * H0.cols());
  for (std::size_t j = 0; j < H0.cols(); ++j)
    for (std::size_t r = 0; r < D; ++r) cols[j * D + r] = H0(r, j);

  auto to_matrix = [D](const std::vector<T>& x, std::size_t n) {
    Matrix<T> M(D, n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t r = 0; r < D; ++r) M(r, j) = x[j * D + r];
    return M;
  };

  for (std::size_t v = 0; v < K; ++v) {
    const std::size_t n = cols.size() / D;
    Vector<T> next(D);
    std::vector<Matrix<T>> captured;
    if (opts.kernel == Kernel::optimized) {
      std::vector<T> x = cols;
      for (std::size_t l = 0; l < plans_.size(); ++l) {
        const bool last = l + 1 == plans_.size() && !opts.capture_layers;
        x = plans_[l].apply(x, n, last);
        if (opts.capture_layers) captured.push_back(to_matrix(x, n));
      }
      std::copy(x.end() - static_cast<long>(D), x.end(), next.begin());
    } else {
      Matrix<T> X = to_matrix(cols, n);
      for (const auto& l : params_.layers) {
        X = ffn_layer(attention_layer<T>(X, l.heads), l.ff);
        if (opts.capture_layers) captured.push_back(X);
      }
      next = X.col(n - 1);
    }
    cols.insert(cols.end(), next.begin(), next.end());
    trace.tokens.push_back(std::move(next));
    if (opts.capture_layers) trace.layer_outputs.push_back(std::move(captured));
  }
  return trace;
}

template <class T>
GenerationTrace<T> generate(const TransformerParams<T>& params, const Matrix<T>& H0, std::size_t K,
                            const GenerateOptions& opts) {
  check_dims(params, H0);
  return Engine<T>(params).generate(H0, K, opts);
}

template <class T>
mpq_class required_scale(const Prompt<T>& prompt, long L, ScaleVariant variant) {
  mpq_class B;
  if constexpr (std::is_same_v<T, double>)
    B = mpq_class(prompt.B);
  else
    B = prompt.B;
  if (B < 1) B = 1;
  const long t = variant == ScaleVariant::compiled ? static_cast<long>(max_tag_multiplicity(prompt))
                                                   : static_cast<long>(prompt.length());
  return scale_bound(variant, prompt.d, B, L, t);
}

template <class T>
Emulation<T> emulate_network(const Engine<T>& engine, const Prompt<T>& prompt, std::span<const Vector<T>> data,
                             long L, const EmulateOptions& opts) {
  const auto& params = engine.params();
  if (L < 1) throw std::invalid_argument("emulate_network: L must be positive");
  if (data.empty()) throw std::invalid_argument("emulate_network: no data");
  if (prompt.d != params.d) throw std::invalid_argument("emulate_network: prompt dimension differs from the transformer");
  auto violations = validate_prompt(prompt);
  if (!violations.empty())
    throw PromptError("emulate_network: invalid prompt (" + std::string(violation_name(violations[0].kind)) +
                      " at token " + std::to_string(violations[0].token) + ")");
  for (const auto& z : data) {
    if (z.size() != prompt.d) throw PromptError("emulate_network: datum has wrong dimension");
    for (const auto& x : z)
      if (x < 0 || x > 1) throw PromptError("emulate_network: datum outside [0, 1]^d");
  }
  mpq_class S;
  if constexpr (std::is_same_v<T, double>) {
    if (prompt.S > std::ldexp(1.0, kFloatingScaleExponentLimit))
      throw ScaleError("emulate_network: S exceeds the floating backend limit 2^" +
                       std::to_string(kFloatingScaleExponentLimit));
    S = mpq_class(prompt.S);
  } else {
    S = prompt.S;
  }
  if (S < required_scale(prompt, L, opts.variant))
    throw ScaleError(std::string("emulate_network: S below the ") + scale_variant_name(opts.variant) + " bound");

  const std::size_t N = data.size();
  Matrix<T> H0 = input_matrix(prompt, data);
  auto trace = engine.generate(H0, N * static_cast<std::size_t>(L), GenerateOptions{opts.kernel, false});
  Emulation<T> out;
  out.outputs.assign(N, {});
  for (std::size_t l = 0; l < static_cast<std::size_t>(L); ++l)
    for (std::size_t i = 0; i < N; ++i) {
      const auto& col = trace.tokens[l * N + i];
      out.outputs[i].emplace_back(col.begin(), col.begin() + static_cast<long>(prompt.d));
    }
  out.generated = std::move(trace.tokens);
  return out;
}

template <class T>
Emulation<T> emulate_network(const TransformerParams<T>& params, const Prompt<T>& prompt,
                             std::span<const Vector<T>> data, long L, const EmulateOptions& opts) {
  return emulate_network(Engine<T>(params), prompt, data, L, opts);
}

template <class T>
T approximate_function(const TransformerParams<T>& params, const Prompt<T>& prompt, std::span<const T> x, long L,
                       const EmulateOptions& opts) {
  return approximate_function(Engine<T>(params), prompt, x, L, opts);
}

template <class T>
T approximate_function(const Engine<T>& engine, const Prompt<T>& prompt, std::span<const T> x, long L,
                       const EmulateOptions& opts) {
  const std::size_t p = x.size();
  if (p + 1 > prompt.d) throw std::invalid_argument("approximate_function: need p <= d - 1");
  Vector<T> z(prompt.d, T(0));
  std::copy(x.begin(), x.end(), z.begin());
  z[p] = T(1);
  std::vector<Vector<T>> data{z};
  auto em = emulate_network<T>(engine, prompt, data, L, opts);
  return em.outputs[0].back()[0];
}

template <class T>
void write_trace_jsonl(std::ostream& os, const GenerationTrace<T>& trace) {
  for (std::size_t v = 0; v < trace.tokens.size(); ++v) {
    auto tok = Token<T>::from_column(trace.tokens[v]);
    nlohmann::json u = nlohmann::json::array();
    for (const auto& x : tok.embedding) u.push_back(scalar_to_json(x));
    nlohmann::json rec = {{"step", v + 1}, {"token", {{"u", u}, {"w", tok.tag()}, {"j", tok.index()}}}};
    os << rec.dump() << '\n';
  }
}

#define PVM_INSTANTIATE(T)                                                                                    \
  template struct TransformerParams<T>;                                                                       \
  template TransformerParams<T> build_theta_star<T>(std::size_t);                                             \
  template TransformerParams<T> build_theta_hash<T>(std::size_t);                                             \
  template Matrix<T> apply_transformer<T>(const TransformerParams<T>&, const Matrix<T>&, Kernel);             \
  template GenerationTrace<T> generate<T>(const TransformerParams<T>&, const Matrix<T>&, std::size_t,         \
                                          const GenerateOptions&);                                            \
  template mpq_class required_scale<T>(const Prompt<T>&, long, ScaleVariant);                                 \
  template class Engine<T>;                                                                                    \
  template Emulation<T> emulate_network<T>(const Engine<T>&, const Prompt<T>&, std::span<const Vector<T>>,    \
                                           long, const EmulateOptions&);                                      \
  template T approximate_function<T>(const Engine<T>&, const Prompt<T>&, std::span<const T>, long,            \
                                     const EmulateOptions&);                                                  \
  template Emulation<T> emulate_network<T>(const TransformerParams<T>&, const Prompt<T>&,                     \
                                           std::span<const Vector<T>>, long, const EmulateOptions&);          \
  template T approximate_function<T>(const TransformerParams<T>&, const Prompt<T>&, std::span<const T>, long, \
                                     const EmulateOptions&);                                                  \
  template void write_trace_jsonl<T>(std::ostream&, const GenerationTrace<T>&);

PVM_INSTANTIATE(double)
PVM_INSTANTIATE(mpq_class)

template TransformerParams<double> TransformerParams<mpq_class>::cast<double>() const;
template TransformerParams<mpq_class> TransformerParams<double>::cast<mpq_class>() const;

}  // namespace pvm
