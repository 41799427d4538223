#include "pvm/prompt_compiler.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>

namespace pvm {

namespace {

template <class T>
mpq_class as_mpq(const T& v) {
  if constexpr (std::is_same_v<T, double>)
    return mpq_class(v);
  else
    return v;
}

}  // namespace

template <class T>
std::vector<std::size_t> CoarseNetwork<T>::ranks() const {
  std::vector<std::size_t> r;
  for (const auto& l : layers) r.push_back(l.size());
  return r;
}

template <class T>
std::size_t CoarseNetwork<T>::max_rank() const {
  std::size_t m = 0;
  for (const auto& l : layers) m = std::max(m, l.size());
  return m;
}

template <class T>
Matrix<T> CoarseNetwork<T>::weight(std::size_t layer) const {
  Matrix<T> W(d, d);
  for (const auto& f : layers.at(layer))
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) ScalarOps<T>::add_product(W(a, b), f.left[a], f.right[b]);
  return W;
}

template <class T>
template <class U>
CoarseNetwork<U> CoarseNetwork<T>::cast() const {
  CoarseNetwork<U> out;
  out.d = d;
  out.B = ScalarOps<U>::from_double(ScalarOps<T>::to_double(B));
  if constexpr (std::is_same_v<T, U>) out.B = B;
  for (const auto& l : layers) {
    std::vector<FactorPair<U>> nl;
    for (const auto& f : l)
      nl.push_back({cast_vector<U, T>(f.left), cast_vector<U, T>(f.right)});
    out.layers.push_back(std::move(nl));
  }
  return out;
}

double StandardNetwork::forward(std::span<const double> x) const {
  if (x.size() != p) throw std::invalid_argument("StandardNetwork::forward: input dimension");
  Vector<double> a(x.begin(), x.end());
  for (std::size_t l = 0; l < weights.size(); ++l) {
    Vector<double> z = matvec(weights[l], std::span<const double>(a));
    for (std::size_t k = 0; k < z.size(); ++k) z[k] += biases[l][k];
    if (l + 1 < weights.size())
      for (auto& v : z) v = relu(v);
    a = std::move(z);
  }
  return a.at(0);
}

std::vector<FactorPair<double>> factorize_weight(const Matrix<double>& W, double B) {
  const std::size_t d = W.rows();
  if (W.cols() != d) throw std::invalid_argument("factorize_weight: matrix must be square");
  Eigen::MatrixXd M(d, d);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) M(static_cast<long>(a), static_cast<long>(b)) = W(a, b);
  std::vector<FactorPair<double>> out;
  if (d == 0) return out;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  const double smax = sv.size() ? sv(0) : 0.0;
  if (smax > B * B * (1.0 + 1e-12)) throw std::invalid_argument("factorize_weight: operator norm exceeds B^2");
  if (smax == 0.0) return out;
  struct Item {
    double s;
    Vector<double> a, b;
  };
  std::vector<Item> items;
  for (long k = 0; k < sv.size(); ++k) {
    if (sv(k) < kRankTolerance * smax || sv(k) == 0.0) continue;
    Item it{sv(k), Vector<double>(d), Vector<double>(d)};
    for (std::size_t i = 0; i < d; ++i) {
      it.a[i] = svd.matrixU()(static_cast<long>(i), k);
      it.b[i] = svd.matrixV()(static_cast<long>(i), k);
    }
    for (std::size_t i = 0; i < d; ++i) {
      if (it.a[i] == 0.0) continue;
      if (it.a[i] < 0)
        for (std::size_t t = 0; t < d; ++t) it.a[t] = -it.a[t], it.b[t] = -it.b[t];
      break;
    }
    items.push_back(std::move(it));
  }
  std::stable_sort(items.begin(), items.end(), [](const Item& x, const Item& y) {
    if (x.s != y.s) return x.s > y.s;
    if (x.a != y.a) return x.a < y.a;
    return x.b < y.b;
  });
  for (auto& it : items) {
    const double r = std::sqrt(it.s);
    FactorPair<double> f{it.a, it.b};
    for (auto& v : f.left) v *= r;
    for (auto& v : f.right) v *= r;
    out.push_back(std::move(f));
  }
  return out;
}

CoarseNetwork<double> coarse_from_weights(std::span<const Matrix<double>> weights, double B) {
  CoarseNetwork<double> net;
  if (weights.empty()) throw std::invalid_argument("coarse_from_weights: no layers");
  net.d = weights[0].rows();
  double big = 0.0;
  for (const auto& W : weights) {
    Eigen::MatrixXd M(static_cast<long>(W.rows()), static_cast<long>(W.cols()));
    for (std::size_t a = 0; a < W.rows(); ++a)
      for (std::size_t b = 0; b < W.cols(); ++b) M(static_cast<long>(a), static_cast<long>(b)) = W(a, b);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(M);
    if (svd.singularValues().size()) big = std::max(big, svd.singularValues()(0));
  }
  const double bound = B > 0 ? B : std::sqrt(big) * (1.0 + 1e-12);
  for (const auto& W : weights) net.layers.push_back(factorize_weight(W, std::max(bound, 1.0)));
  if (B > 0) {
    net.B = B;
  } else {
    // the factor norms as computed, so that validation sees exactly these vectors
    double m = 1.0;
    for (const auto& l : net.layers)
      for (const auto& f : l) {
        double nl = 0, nr = 0;
        for (double v : f.left) nl += v * v;
        for (double v : f.right) nr += v * v;
        m = std::max({m, std::sqrt(nl), std::sqrt(nr)});
      }
    net.B = m;
  }
  return net;
}

template <class T>
T min_scale(std::size_t d, const mpq_class& B, long L, long t, ScaleVariant variant) {
  const int k = scale_exponent(variant, d, B, L, t);
  if constexpr (std::is_same_v<T, double>) {
    if (k > kFloatingScaleExponentLimit)
      throw ScaleError("min_scale: 2^" + std::to_string(k) + " exceeds the floating backend limit 2^" +
                       std::to_string(kFloatingScaleExponentLimit) + "; use the rational backend");
  }
  return ScalarOps<T>::pow2(k);
}

template <class T>
Prompt<T> compile_network(const CoarseNetwork<T>& net, const T& S) {
  const long L = net.depth();
  if (L < 1) throw std::invalid_argument("compile_network: network has no layers");
  if (as_mpq(S) < scale_bound(ScaleVariant::compiled, net.d, std::max(as_mpq(net.B), mpq_class(1)), L,
                              static_cast<long>(net.max_rank())))
    throw ScaleError("compile_network: S below the compiled bound");
  Prompt<T> P;
  P.d = net.d;
  P.L = L;
  P.S = S;
  P.B = net.B;
  long j = 1;
  for (long l = 1; l <= L; ++l)
    for (const auto& f : net.layers[static_cast<std::size_t>(l - 1)]) {
      if (f.left.size() != net.d || f.right.size() != net.d)
        throw std::invalid_argument("compile_network: factor has wrong dimension");
      P.tokens.push_back(make_prompt_token<T>(f.left, 2 * l - 1, j++, S));
      P.tokens.push_back(make_prompt_token<T>(f.right, 2 * l, j++, S));
    }
  return P;
}

std::vector<Matrix<double>> embedded_weights(const StandardNetwork& net, std::size_t d) {
  const std::size_t p = net.p, r = net.r;
  const long L = net.depth();
  if (L < 1) throw std::invalid_argument("embed_standard_nn: no layers");
  if (p + 1 > d || r + 1 > d) throw std::invalid_argument("embed_standard_nn: need p, r <= d - 1");
  std::vector<Matrix<double>> Ws;
  for (long l = 0; l < L; ++l) {
    const auto& Wb = net.weights[static_cast<std::size_t>(l)];
    const auto& bb = net.biases[static_cast<std::size_t>(l)];
    const std::size_t in = l == 0 ? p : r;  // input width, the constant 1 sits at index `in`
    Matrix<double> W(d, d);
    if (l + 1 == L) {
      if (Wb.rows() != 1 || Wb.cols() != in || bb.size() != 1)
        throw std::invalid_argument("embed_standard_nn: output layer shape");
      for (std::size_t c = 0; c < in; ++c) W(0, c) = Wb(0, c);
      W(0, in) = bb[0];
    } else {
      if (Wb.rows() != r || Wb.cols() != in || bb.size() != r)
        throw std::invalid_argument("embed_standard_nn: hidden layer shape");
      for (std::size_t a = 0; a < r; ++a) {
        for (std::size_t c = 0; c < in; ++c) W(a, c) = Wb(a, c);
        W(a, in) = bb[a];
      }
      W(r, in) = 1.0;
    }
    Ws.push_back(std::move(W));
  }
  return Ws;
}

CoarseNetwork<double> embed_standard_nn(const StandardNetwork& net, std::size_t d) {
  auto Ws = embedded_weights(net, d);
  return coarse_from_weights(Ws);
}

template <class T>
bool restrict_diversity_check(const Prompt<T>& P, std::size_t r) {
  for (const auto& t : P.tokens)
    for (std::size_t k = r; k < t.embedding.size(); ++k)
      if (!ScalarOps<T>::is_zero(t.embedding[k])) return false;
  return true;
}

template <class T>
std::vector<AgentBlock<T>> split_among_agents(const CoarseNetwork<T>& net, std::span<const AgentAssignment> plan,
                                              const T& S) {
  const long L = net.depth();
  for (const auto& a : plan)
    if (a.layer < 1 || a.layer > L) throw CapacityError("split_among_agents: agent layer outside [1, L]");
  for (long l = 1; l <= L; ++l) {
    std::size_t slots = 0;
    for (const auto& a : plan)
      if (a.layer == l) slots += a.length / 2;
    if (slots < net.layers[static_cast<std::size_t>(l - 1)].size())
      throw CapacityError("split_among_agents: layer " + std::to_string(l) + " needs " +
                          std::to_string(net.layers[static_cast<std::size_t>(l - 1)].size()) + " pair slots, has " +
                          std::to_string(slots));
  }
  std::vector<std::size_t> next(static_cast<std::size_t>(L), 0);
  const Vector<T> zero(net.d, T(0));
  std::vector<AgentBlock<T>> blocks;
  for (const auto& a : plan) {
    AgentBlock<T> blk;
    blk.layer = a.layer;
    const auto& factors = net.layers[static_cast<std::size_t>(a.layer - 1)];
    auto& cursor = next[static_cast<std::size_t>(a.layer - 1)];
    long j = 1;
    for (std::size_t s = 0; s < a.length / 2; ++s) {
      const bool real = cursor < factors.size();
      const Vector<T>& left = real ? factors[cursor].left : zero;
      const Vector<T>& right = real ? factors[cursor].right : zero;
      if (real) ++cursor;
      blk.tokens.push_back(make_prompt_token<T>(left, 2 * a.layer - 1, j++, S));
      blk.tokens.push_back(make_prompt_token<T>(right, 2 * a.layer, j++, S));
    }
    if (a.length % 2 == 1) blk.tokens.push_back(make_prompt_token<T>(zero, 2 * a.layer - 1, j++, S));
    blocks.push_back(std::move(blk));
  }
  return blocks;
}

template <class T>
nlohmann::json network_to_json(const CoarseNetwork<T>& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : net.layers) {
    nlohmann::json fl = nlohmann::json::array();
    for (const auto& f : l) {
      nlohmann::json a = nlohmann::json::array(), b = nlohmann::json::array();
      for (const auto& v : f.left) a.push_back(scalar_to_json(v));
      for (const auto& v : f.right) b.push_back(scalar_to_json(v));
      fl.push_back({{"left", a}, {"right", b}});
    }
    layers.push_back(fl);
  }
  return {{"d", net.d}, {"B", scalar_to_json(net.B)}, {"layers", layers}};
}

template <class T>
CoarseNetwork<T> network_from_json(const nlohmann::json& j) {
  CoarseNetwork<T> net;
  net.d = j.at("d").get<std::size_t>();
  net.B = scalar_from_json<T>(j.at("B"));
  for (const auto& l : j.at("layers")) {
    std::vector<FactorPair<T>> fl;
    for (const auto& f : l) {
      FactorPair<T> fp;
      for (const auto& v : f.at("left")) fp.left.push_back(scalar_from_json<T>(v));
      for (const auto& v : f.at("right")) fp.right.push_back(scalar_from_json<T>(v));
      if (fp.left.size() != net.d || fp.right.size() != net.d)
        throw std::invalid_argument("network_from_json: factor has wrong dimension");
      fl.push_back(std::move(fp));
    }
    net.layers.push_back(std::move(fl));
  }
  return net;
}

nlohmann::json standard_to_json(const StandardNetwork& net) {
  nlohmann::json Ws = nlohmann::json::array(), bs = nlohmann::json::array();
  for (const auto& W : net.weights) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t a = 0; a < W.rows(); ++a) {
      auto row = W.row(a);
      rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    Ws.push_back(rows);
  }
  for (const auto& b : net.biases) bs.push_back(b);
  return {{"p", net.p}, {"r", net.r}, {"weights", Ws}, {"biases", bs}};
}

StandardNetwork standard_from_json(const nlohmann::json& j) {
  StandardNetwork net;
  net.p = j.at("p").get<std::size_t>();
  net.r = j.at("r").get<std::size_t>();
  for (const auto& rows : j.at("weights")) {
    const std::size_t R = rows.size(), C = R ? rows[0].size() : 0;
    Matrix<double> W(R, C);
    for (std::size_t a = 0; a < R; ++a) {
      if (rows[a].size() != C) throw std::invalid_argument("standard_from_json: ragged weight matrix");
      for (std::size_t c = 0; c < C; ++c) W(a, c) = rows[a][c].get<double>();
    }
    net.weights.push_back(std::move(W));
  }
  for (const auto& b : j.at("biases")) net.biases.push_back(b.get<Vector<double>>());
  if (net.weights.size() != net.biases.size()) throw std::invalid_argument("standard_from_json: layer count");
  return net;
}

#define PVM_INSTANTIATE(T)                                                                                       \
  template struct CoarseNetwork<T>;                                                                              \
  template Prompt<T> compile_network<T>(const CoarseNetwork<T>&, const T&);                                      \
  template T min_scale<T>(std::size_t, const mpq_class&, long, long, ScaleVariant);                              \
  template bool restrict_diversity_check<T>(const Prompt<T>&, std::size_t);                                      \
  template std::vector<AgentBlock<T>> split_among_agents<T>(const CoarseNetwork<T>&,                             \
                                                            std::span<const AgentAssignment>, const T&);         \
  template nlohmann::json network_to_json<T>(const CoarseNetwork<T>&);                                           \
  template CoarseNetwork<T> network_from_json<T>(const nlohmann::json&);

PVM_INSTANTIATE(double)
PVM_INSTANTIATE(mpq_class)

template CoarseNetwork<mpq_class> CoarseNetwork<double>::cast<mpq_class>() const;
template CoarseNetwork<double> CoarseNetwork<mpq_class>::cast<double>() const;
template CoarseNetwork<double> CoarseNetwork<double>::cast<double>() const;
template CoarseNetwork<mpq_class> CoarseNetwork<mpq_class>::cast<mpq_class>() const;

}  // namespace pvm
