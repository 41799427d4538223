#include <doctest.h>

#include <cmath>

#include "pvm/prompt_compiler.hpp"
#include "pvm/random.hpp"
#include "pvm/reference_oracle.hpp"
#include "support.hpp"

using namespace pvm;
using pvm::test::mat;
using pvm::test::max_abs_diff;
using pvm::test::vec;

namespace {

using Q = mpq_class;

Matrix<double> reconstruct(const std::vector<FactorPair<double>>& fs, std::size_t d) {
  Matrix<double> W(d, d);
  for (const auto& f : fs)
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < d; ++c) W(r, c) += f.left[r] * f.right[c];
  return W;
}

double frobenius_diff(const Matrix<double>& a, const Matrix<double>& b) {
  double s = 0;
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) s += (a(r, c) - b(r, c)) * (a(r, c) - b(r, c));
  return std::sqrt(s);
}

double norm(const Vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

StandardNetwork random_standard(Rng& rng, std::size_t p, std::size_t r, long L) {
  StandardNetwork net;
  net.p = p;
  net.r = r;
  for (long l = 0; l < L; ++l) {
    const std::size_t in = l == 0 ? p : r, out = l + 1 == L ? 1 : r;
    Matrix<double> W(out, in);
    Vector<double> b(out);
    for (std::size_t a = 0; a < out; ++a) {
      for (std::size_t c = 0; c < in; ++c) W(a, c) = rng.uniform(-1, 1);
      b[a] = rng.uniform(-1, 1);
    }
    net.weights.push_back(W);
    net.biases.push_back(b);
  }
  return net;
}

CoarseNetwork<Q> dyadic_net(Rng& rng, std::size_t d, const std::vector<std::size_t>& ranks) {
  CoarseNetwork<Q> net;
  net.d = d;
  net.B = 1;
  for (auto r : ranks) {
    std::vector<FactorPair<Q>> layer;
    for (std::size_t k = 0; k < r; ++k) {
      FactorPair<Q> f;
      for (double x : rng.dyadic_ball(d, 10)) f.left.push_back(Q(x));
      for (double x : rng.dyadic_ball(d, 10)) f.right.push_back(Q(x));
      layer.push_back(f);
    }
    net.layers.push_back(layer);
  }
  return net;
}

}  // namespace

TEST_CASE("factorize identity") {
  auto fs = factorize_weight(Matrix<double>::identity(3), 1.0);
  REQUIRE(fs.size() == 3);
  std::vector<bool> seen(3, false);
  for (const auto& f : fs) {
    CHECK(f.left == f.right);
    CHECK(std::fabs(norm(f.left) - 1.0) < 1e-15);
    for (std::size_t k = 0; k < 3; ++k)
      if (std::fabs(f.left[k] - 1.0) < 1e-15) seen[k] = true;
  }
  CHECK(seen == std::vector<bool>{true, true, true});
  CHECK(max_abs_diff(reconstruct(fs, 3), Matrix<double>::identity(3)) < 1e-15);
}

TEST_CASE("factorize a scaled rank-one matrix") {
  Matrix<double> W(3, 3);
  W(0, 1) = 2;
  auto fs = factorize_weight(W, std::sqrt(2.0));
  REQUIRE(fs.size() == 1);
  CHECK(max_abs_diff(mat<double>(3, 1, {fs[0].left[0], fs[0].left[1], fs[0].left[2]}),
                     mat<double>(3, 1, {std::sqrt(2.0), 0, 0})) < 1e-15);
  CHECK(max_abs_diff(mat<double>(3, 1, {fs[0].right[0], fs[0].right[1], fs[0].right[2]}),
                     mat<double>(3, 1, {0, std::sqrt(2.0), 0})) < 1e-15);
}

TEST_CASE("factorize zero and oversized matrices") {
  CHECK(factorize_weight(Matrix<double>(4, 4), 1.0).empty());
  Matrix<double> W(2, 2);
  W(0, 0) = 5;
  CHECK_THROWS(factorize_weight(W, 2.0));
  CHECK_NOTHROW(factorize_weight(W, std::sqrt(5.0)));
}

TEST_CASE("factorization reconstructs and is deterministic") {
  Rng rng(41, 0);
  for (int t = 0; t < 200; ++t) {
    const std::size_t d = static_cast<std::size_t>(rng.uniform_int(1, 7));
    const double B = rng.uniform(0.5, 2.0);
    Matrix<double> W(d, d);
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < d; ++c) W(r, c) = rng.uniform(-1, 1);
    // scale below B^2 via the Frobenius norm, which bounds the operator norm
    double f = 0;
    for (double x : W.data()) f += x * x;
    f = std::sqrt(f);
    for (double& x : W.data()) x *= B * B / f * rng.uniform(0.1, 1.0);
    auto fs = factorize_weight(W, B);
    CHECK(frobenius_diff(reconstruct(fs, d), W) <= 1e-10);
    for (const auto& p : fs) {
      CHECK(norm(p.left) <= B * (1 + 1e-12));
      CHECK(norm(p.right) <= B * (1 + 1e-12));
      double first = 0;
      for (double x : p.left)
        if (x != 0) {
          first = x;
          break;
        }
      CHECK(first > 0);
    }
    auto again = factorize_weight(W, B);
    REQUIRE(again.size() == fs.size());
    for (std::size_t k = 0; k < fs.size(); ++k) {
      CHECK(again[k].left == fs[k].left);
      CHECK(again[k].right == fs[k].right);
    }
  }
}

TEST_CASE("coarse network from weights") {
  std::vector<Matrix<double>> Ws{Matrix<double>::identity(2), Matrix<double>(2, 2)};
  Ws[1](0, 1) = 4;
  auto net = coarse_from_weights(Ws);
  CHECK(net.depth() == 2);
  CHECK(net.ranks() == std::vector<std::size_t>{2, 1});
  CHECK(net.max_rank() == 2);
  CHECK(std::fabs(net.B - 2.0) < 1e-15);
  CHECK(max_abs_diff(net.weight(1), Ws[1]) < 1e-15);
  CHECK(coarse_from_weights(Ws, 3.0).B == 3.0);
}

TEST_CASE("compile examples") {
  CoarseNetwork<Q> net;
  net.d = 2;
  net.layers = {{{vec<Q>({1, 0}), vec<Q>({0, 0.5})}}};
  auto P = compile_network(net, Q(8));
  REQUIRE(P.length() == 2);
  CHECK(P.tokens[0].embedding == vec<Q>({1, 0}));
  CHECK(P.tokens[0].tag() == 1);
  CHECK(P.tokens[0].index() == 1);
  CHECK(P.tokens[1].embedding == vec<Q>({0, 0.5}));
  CHECK(P.tokens[1].tag() == 2);
  CHECK(P.tokens[1].index() == 2);
  CHECK(P.L == 1);

  CoarseNetwork<Q> late;
  late.d = 2;
  late.layers = {{}, {{vec<Q>({1, 0}), vec<Q>({0, 1})}}};
  auto P2 = compile_network(late, Q(8));
  REQUIRE(P2.length() == 2);
  CHECK(P2.tokens[0].tag() == 3);
  CHECK(P2.tokens[1].tag() == 4);
  CHECK(validate_prompt(P2).empty());

  std::vector<Matrix<double>> Ws{Matrix<double>::identity(2)};
  auto Pi = compile_network(coarse_from_weights(Ws), 4.0);
  CHECK(Pi.length() == 4);
  CHECK(validate_prompt(Pi).empty());
  CHECK_THROWS_AS(compile_network(coarse_from_weights(Ws), 2.0), ScaleError);
}

TEST_CASE("compile then extract round trip") {
  Rng rng(43, 0);
  for (int t = 0; t < 40; ++t) {
    const std::size_t d = static_cast<std::size_t>(rng.uniform_int(1, 6));
    std::vector<std::size_t> ranks;
    for (long l = rng.uniform_int(1, 3); l > 0; --l) ranks.push_back(static_cast<std::size_t>(rng.uniform_int(0, 3)));
    auto net = dyadic_net(rng, d, ranks);
    auto P = compile_network(net, Q(1 << 12));
    std::size_t total = 0;
    for (auto r : ranks) total += r;
    CHECK(P.length() == 2 * total);
    // the datum index matters only through the wrap term, which compiled prompts never trigger
    auto Ws = extract_virtual_weights(P, net.depth(), 2);
    for (std::size_t l = 0; l < ranks.size(); ++l) CHECK(Ws[l] == net.weight(l));

    auto fnet = net.cast<double>();
    auto fP = compile_network(fnet, 4096.0);
    auto fWs = extract_virtual_weights(fP, fnet.depth(), 2);
    for (std::size_t l = 0; l < ranks.size(); ++l) CHECK(max_abs_diff(fWs[l], fnet.weight(l)) <= 1e-10);
  }
}

TEST_CASE("min scale") {
  CHECK(min_scale<double>(4, 1, 2, 6, ScaleVariant::general) == 8192.0);
  CHECK(min_scale<double>(4, 1, 2, 2, ScaleVariant::compiled) == 8.0);
  CHECK(min_scale<Q>(2, 1, 7, 1, ScaleVariant::compiled) == 16);
  CHECK(min_scale<Q>(6, 2, 3, 10, ScaleVariant::general) ==
        ScalarOps<Q>::pow2(scale_exponent(ScaleVariant::general, 6, 2, 3, 10)));
  CHECK_THROWS_AS(min_scale<double>(6, 2, 3, 10, ScaleVariant::general), ScaleError);
}

TEST_CASE("standard network forward") {
  StandardNetwork net;
  net.p = 1;
  net.r = 1;
  net.weights = {mat<double>(1, 1, {1}), mat<double>(1, 1, {1})};
  net.biases = {{-0.5}, {0}};
  const double xs[] = {0, 0.25, 0.5, 1};
  const double want[] = {0, 0, 0, 0.5};
  for (int k = 0; k < 4; ++k) CHECK(net.forward(std::span<const double>(&xs[k], 1)) == want[k]);

  auto emb = embed_standard_nn(net, 3);
  for (int k = 0; k < 4; ++k) {
    Vector<double> z{xs[k], 1, 0};
    auto out = forward_coarse<double>(emb, z, Activation::relu);
    CHECK(std::fabs(out.back()[0] - want[k]) < 1e-12);
  }
}

TEST_CASE("embedding with zero weights is the bias cascade") {
  StandardNetwork net;
  net.p = 2;
  net.r = 2;
  net.weights = {Matrix<double>(2, 2), Matrix<double>(2, 2), Matrix<double>(1, 2)};
  net.biases = {{0.5, -1}, {0.25, 0.75}, {-0.3}};
  auto Ws = embedded_weights(net, 4);
  Vector<double> z{0.9, 0.1, 1, 0};
  auto out = forward_virtual<double>(Ws, z, Activation::relu);
  CHECK(out.back()[0] == -0.3);
  CHECK(out[0] == Vector<double>{0.5, -1, 1, 0});
  CHECK(out[1] == Vector<double>{0.25, 0.75, 1, 0});
}

TEST_CASE("embedding with zero biases is block padding") {
  Rng rng(47, 0);
  auto net = random_standard(rng, 2, 3, 2);
  for (auto& b : net.biases)
    for (auto& x : b) x = 0;
  auto Ws = embedded_weights(net, 5);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t c = 0; c < 2; ++c) CHECK(Ws[0](a, c) == net.weights[0](a, c));
  CHECK(Ws[0](3, 2) == 1.0);
  double rest = 0;
  for (std::size_t a = 0; a < 5; ++a)
    for (std::size_t c = 0; c < 5; ++c)
      if (!((a < 3 && c < 2) || (a == 3 && c == 2))) rest += std::fabs(Ws[0](a, c));
  CHECK(rest == 0.0);
}

TEST_CASE("embedded networks agree with the plain forward pass") {
  Rng rng(53, 0);
  for (int t = 0; t < 50; ++t) {
    const std::size_t d = 6;
    const std::size_t p = static_cast<std::size_t>(rng.uniform_int(1, 3));
    const std::size_t r = static_cast<std::size_t>(rng.uniform_int(1, 5));
    auto net = random_standard(rng, p, r, rng.uniform_int(1, 4));
    auto emb = embed_standard_nn(net, d);
    for (int k = 0; k < 10; ++k) {
      Vector<double> z(d, 0.0);
      for (std::size_t i = 0; i < p; ++i) z[i] = rng.uniform01();
      z[p] = 1;
      const double want = net.forward(std::span<const double>(z.data(), p));
      CHECK(std::fabs(forward_coarse<double>(emb, z, Activation::relu).back()[0] - want) < 1e-10);
    }
  }
  StandardNetwork wide = random_standard(rng, 1, 6, 2);
  CHECK_THROWS(embed_standard_nn(wide, 6));
}

TEST_CASE("diversity restriction check") {
  Rng rng(59, 0);
  CoarseNetwork<Q> net;
  net.d = 4;
  net.layers = {{{vec<Q>({0.5, 0.25, 0, 0}), vec<Q>({0, 1, 0, 0})}}};
  auto P = compile_network(net, Q(64));
  CHECK(restrict_diversity_check(P, 2));
  CHECK(restrict_diversity_check(P, 4));
  CHECK_FALSE(restrict_diversity_check(P, 1));
  P.tokens[1].embedding[2] = Q(1, 1000);
  CHECK_FALSE(restrict_diversity_check(P, 2));
  CHECK(restrict_diversity_check(P, 4));
}

TEST_CASE("split among agents") {
  Rng rng(61, 0);
  auto net = dyadic_net(rng, 3, {2, 1, 3});
  const Q S(1 << 10);
  auto P = compile_network(net, S);

  std::vector<AgentAssignment> exact{{1, 4}, {2, 2}, {3, 6}};
  auto blocks = split_among_agents<Q>(net, exact, S);
  REQUIRE(blocks.size() == 3);
  std::size_t j = 0;
  for (const auto& b : blocks)
    for (std::size_t k = 0; k < b.tokens.size(); ++k, ++j) {
      CHECK(b.tokens[k].embedding == P.tokens[j].embedding);
      CHECK(b.tokens[k].tag() == P.tokens[j].tag());
      CHECK(b.tokens[k].index() == static_cast<long>(k + 1));
    }

  std::vector<AgentAssignment> surplus{{3, 5}, {1, 2}, {1, 3}, {2, 4}, {3, 2}};
  auto sb = split_among_agents<Q>(net, surplus, S);
  REQUIRE(sb[0].tokens.size() == 5);
  CHECK(sb[0].tokens[4].embedding == Vector<Q>(3, Q(0)));
  CHECK(sb[0].tokens[4].tag() == 5);
  REQUIRE(sb[3].tokens.size() == 4);
  CHECK(sb[3].tokens[2].embedding == Vector<Q>(3, Q(0)));
  CHECK(sb[3].tokens[3].embedding == Vector<Q>(3, Q(0)));
  CHECK(sb[3].tokens[3].tag() == 4);

  auto C = concat_agents_prompt<Q>(sb, S, Q(1));
  auto Ws = extract_virtual_weights(C, 3, 2);
  for (std::size_t l = 0; l < 3; ++l) CHECK(Ws[l] == net.weight(l));

  std::vector<AgentAssignment> short_plan{{1, 3}, {2, 2}, {3, 6}};
  CHECK_THROWS_AS(split_among_agents<Q>(net, short_plan, S), CapacityError);
  std::vector<AgentAssignment> outside{{1, 4}, {2, 2}, {3, 6}, {4, 2}};
  CHECK_THROWS_AS(split_among_agents<Q>(net, outside, S), CapacityError);
}

TEST_CASE("network JSON round trips") {
  Rng rng(67, 0);
  auto net = dyadic_net(rng, 3, {1, 0, 2});
  auto back = network_from_json<Q>(nlohmann::json::parse(network_to_json(net).dump()));
  CHECK(back.d == net.d);
  CHECK(back.B == net.B);
  REQUIRE(back.depth() == net.depth());
  for (std::size_t l = 0; l < 3; ++l) CHECK(back.weight(l) == net.weight(l));

  auto sn = random_standard(rng, 2, 3, 3);
  auto sb = standard_from_json(nlohmann::json::parse(standard_to_json(sn).dump()));
  CHECK(sb.p == 2);
  CHECK(sb.r == 3);
  for (std::size_t l = 0; l < 3; ++l) {
    CHECK(sb.weights[l] == sn.weights[l]);
    CHECK(sb.biases[l] == sn.biases[l]);
  }
}
