#include <doctest.h>

#include "pvm/random.hpp"
#include "pvm/token_model.hpp"
#include "support.hpp"

using namespace pvm;
using pvm::test::q;
using pvm::test::vec;

namespace {

template <class T>
Vector<T> tail4(const Vector<T>& v) {
  return Vector<T>(v.end() - 4, v.end());
}

template <class T>
Prompt<T> small_prompt(const T& S) {
  Prompt<T> P;
  P.d = 2;
  P.L = 1;
  P.S = S;
  P.B = 1;
  P.tokens.push_back(make_prompt_token<T>(vec<T>({1, 0}), 1, 1, S));
  P.tokens.push_back(make_prompt_token<T>(vec<T>({0, 0.5}), 2, 2, S));
  return P;
}

bool has_kind(const std::vector<Violation>& vs, Violation::Kind k) {
  for (const auto& v : vs)
    if (v.kind == k) return true;
  return false;
}

// max(d t^{2L} B^{4L}, 2L) written out independently
mpq_class general_bound(std::size_t d, long B, long L, long T) {
  mpz_class v = static_cast<unsigned long>(d);
  for (long k = 0; k < 2 * L; ++k) v *= T;
  for (long k = 0; k < 4 * L; ++k) v *= B;
  return v > 2 * L ? mpq_class(v) : mpq_class(2 * L);
}

}  // namespace

TEST_CASE("positional encoding layout") {
  auto p = positional_encoding<double>(2, 3, 5, 8.0);
  CHECK(p.size() == 3 * 2 + 8);
  CHECK(tail4(p) == vec<double>({1, 8, 24, 40}));
  for (std::size_t k = 0; k + 4 < p.size(); ++k) CHECK(p[k] == 0.0);
  CHECK(tail4(positional_encoding<double>(3, -2, 9, 4.0)) == vec<double>({1, 4, -8, 36}));
  CHECK(tail4(positional_encoding<mpq_class>(1, 0, 7, mpq_class(16))) == vec<mpq_class>({1, 16, 0, 112}));
  CHECK_THROWS_AS(positional_encoding<double>(2, 1, 1, 0.0), PromptError);
}

TEST_CASE("prompt and data tokens") {
  auto e1 = vec<double>({1, 0, 0});
  auto t = make_prompt_token<double>(e1, 1, 1, 16.0);
  CHECK(t.embedding == e1);
  CHECK(tail4(t.pos) == vec<double>({1, 16, 16, 16}));
  CHECK(t.tag() == 1);
  CHECK(t.index() == 1);
  CHECK(t.scale() == 16.0);

  auto zero = make_prompt_token<double>(vec<double>({0, 0, 0}), 2, 2, 16.0);
  CHECK(zero.tag() == 2);
  CHECK_THROWS_AS(make_prompt_token<double>(e1, 0, 1, 16.0), PromptError);
  CHECK_THROWS_AS(make_prompt_token<double>(e1, 1, 0, 16.0), PromptError);

  auto z = make_data_token<double>(vec<double>({1, 1, 1}), 4, 16.0);
  CHECK(z.tag() == 0);
  CHECK(z.index() == 4);
  CHECK(tail4(z.pos) == vec<double>({1, 16, 0, 64}));
  CHECK(make_data_token<double>(vec<double>({0, 0, 0}), 1, 16.0).tag() == 0);
}

TEST_CASE("token column round trip") {
  auto t = make_prompt_token<mpq_class>(vec<mpq_class>({0.25, -0.5}), 3, 7, mpq_class(32));
  auto col = t.column();
  CHECK(col.size() == 16);
  CHECK(Token<mpq_class>::from_column(col) == t);
  CHECK_THROWS_AS(Token<double>::from_column(Vector<double>(9)), PromptError);
}

TEST_CASE("input matrix stacks prompt and data") {
  auto P = small_prompt<double>(16.0);
  std::vector<Vector<double>> data{vec<double>({0.5, 0.5})};
  auto H = input_matrix<double>(P, data);
  CHECK(H.rows() == 16);
  CHECK(H.cols() == 3);
  CHECK(tail4(H.col(2)) == vec<double>({1, 16, 0, 48}));
  std::vector<Vector<double>> bad{vec<double>({0.5})};
  CHECK_THROWS_AS(input_matrix<double>(P, bad), PromptError);
}

TEST_CASE("validate prompt") {
  auto P = small_prompt<double>(16.0);
  CHECK(validate_prompt(P).empty());

  auto wide = P;
  wide.tokens[0] = make_prompt_token<double>(wide.tokens[0].embedding, 3, 1, 16.0);
  auto v = validate_prompt(wide);
  REQUIRE(v.size() == 1);
  CHECK(v[0].kind == Violation::Kind::tag_range);
  CHECK(v[0].token == 1);
  CHECK(std::string(violation_name(v[0].kind)) == "w out of range");

  auto shuffled = P;
  std::swap(shuffled.tokens[0], shuffled.tokens[1]);
  CHECK(has_kind(validate_prompt(shuffled), Violation::Kind::index_order));

  auto big = P;
  big.tokens[0] = make_prompt_token<double>(vec<double>({1, 1}), 1, 1, 16.0);
  CHECK(has_kind(validate_prompt(big), Violation::Kind::norm));

  const double need = 64.0;
  CHECK(has_kind(validate_prompt(P, &need), Violation::Kind::scale));

  auto mixed = P;
  mixed.tokens[1] = make_prompt_token<double>(vec<double>({0, 0.5}), 2, 2, 32.0);
  CHECK(has_kind(validate_prompt(mixed), Violation::Kind::layout));
}

TEST_CASE("tag multiplicity") {
  auto P = small_prompt<double>(16.0);
  CHECK(max_tag_multiplicity(P) == 1);
  P.tokens.push_back(make_prompt_token<double>(vec<double>({0, 0}), 1, 3, 16.0));
  CHECK(max_tag_multiplicity(P) == 2);
}

TEST_CASE("append irrelevant tokens") {
  auto P = small_prompt<double>(16.0);
  CHECK(append_irrelevant<double>(P, {}).tokens == P.tokens);
  CHECK(append_irrelevant<double>(P, {}).L == P.L);

  std::vector<Vector<double>> two{vec<double>({0.5, 0}), vec<double>({0, -0.5})};
  auto A = append_irrelevant<double>(P, two);
  REQUIRE(A.length() == 4);
  CHECK(A.tokens[2].tag() == 3);
  CHECK(A.tokens[3].tag() == 4);
  CHECK(A.tokens[2].index() == 3);
  CHECK(A.tokens[3].index() == 4);
  CHECK(A.L == 2);

  auto three = two;
  three.push_back(vec<double>({0.1, 0.1}));
  auto B = append_irrelevant<double>(P, three);
  CHECK(B.tokens[4].tag() == 5);
  CHECK(B.L == 3);
  CHECK(validate_prompt(B).empty());

  std::vector<Vector<double>> outside{vec<double>({2, 0})};
  CHECK_THROWS_AS(append_irrelevant<double>(P, outside), PromptError);
}

TEST_CASE("prefix irrelevant tokens") {
  auto P = small_prompt<mpq_class>(mpq_class(16));
  Prompt<mpq_class> empty;
  empty.d = 2;
  auto R = prefix_irrelevant(empty, P, mpq_class(64));
  REQUIRE(R.length() == P.length());
  CHECK(R.S == 64);
  for (std::size_t j = 0; j < R.length(); ++j) {
    CHECK(R.tokens[j].embedding == P.tokens[j].embedding);
    CHECK(R.tokens[j].tag() == P.tokens[j].tag());
    CHECK(R.tokens[j].scale() == 64);
  }

  auto pre = small_prompt<mpq_class>(mpq_class(16));
  // d=2, L=2, T=4, B=1: bound is 2 * 4^4 = 512
  auto C = prefix_irrelevant(pre, P, mpq_class(512));
  REQUIRE(C.length() == 4);
  CHECK(C.L == 2);
  CHECK(C.tokens[2].tag() == 3);
  CHECK(C.tokens[2].index() == 3);
  CHECK(C.tokens[3].tag() == 4);
  CHECK(validate_prompt(C).empty());
  CHECK_THROWS_AS(prefix_irrelevant(pre, P, mpq_class(511)), ScaleError);
}

TEST_CASE("concatenate agent blocks") {
  const double S = 16.0;
  AgentBlock<double> a{{make_prompt_token<double>(vec<double>({1, 0}), 1, 1, S),
                        make_prompt_token<double>(vec<double>({0, 1}), 2, 2, S)},
                       1};
  AgentBlock<double> b{{make_prompt_token<double>(vec<double>({0.5, 0}), 3, 1, S),
                        make_prompt_token<double>(vec<double>({0, 0.5}), 4, 2, S)},
                       2};
  std::vector<AgentBlock<double>> one{a};
  auto H1 = concat_agents<double>(one, S);
  CHECK(H1.cols() == 2);
  CHECK(Token<double>::from_column(H1.col(1)).index() == 2);

  std::vector<AgentBlock<double>> both{b, a};
  auto H = concat_agents<double>(both, S);
  REQUIRE(H.cols() == 4);
  std::vector<long> tags, idx;
  for (std::size_t j = 0; j < 4; ++j) {
    auto t = Token<double>::from_column(H.col(j));
    tags.push_back(t.tag());
    idx.push_back(t.index());
  }
  CHECK(tags == std::vector<long>{3, 4, 1, 2});
  CHECK(idx == std::vector<long>{1, 2, 3, 4});
  auto P = concat_agents_prompt<double>(both, S, 1.0);
  CHECK(P.L == 2);
  CHECK(validate_prompt(P).empty());
}

TEST_CASE("scale bound examples") {
  CHECK(scale_bound(ScaleVariant::general, 4, 1, 2, 6) == 5184);
  CHECK(scale_exponent(ScaleVariant::general, 4, 1, 2, 6) == 13);
  CHECK(scale_bound(ScaleVariant::compiled, 4, 1, 2, 2) == 8);
  CHECK(scale_exponent(ScaleVariant::compiled, 4, 1, 2, 2) == 3);
  CHECK(scale_bound(ScaleVariant::compiled, 2, 1, 5, 1) == 10);
  CHECK(scale_bound(ScaleVariant::prefix, 2, 1, 2, 4) == 512);
  CHECK(scale_bound(ScaleVariant::prefix, 1, 1, 3, 1) == 7);
  CHECK(scale_bound(ScaleVariant::compiled, 3, 1, 1, 0) == 3);
  CHECK_THROWS(scale_bound(ScaleVariant::general, 0, 1, 1, 1));
  CHECK_THROWS(scale_bound(ScaleVariant::general, 2, q("1/2"), 1, 1));
  CHECK(parse_scale_variant(scale_variant_name(ScaleVariant::prefix)) == ScaleVariant::prefix);
}

TEST_CASE("general bound agrees with direct evaluation") {
  Rng rng(9, 0);
  for (int k = 0; k < 200; ++k) {
    const std::size_t d = static_cast<std::size_t>(rng.uniform_int(1, 8));
    const long B = rng.uniform_int(1, 3), L = rng.uniform_int(1, 4), T = rng.uniform_int(1, 12);
    const mpq_class want = general_bound(d, B, L, T);
    CHECK(scale_bound(ScaleVariant::general, d, B, L, T) == want);
    const int e = scale_exponent(ScaleVariant::general, d, B, L, T);
    CHECK(ScalarOps<mpq_class>::pow2(e) >= want);
    CHECK(ScalarOps<mpq_class>::pow2(e - 1) < want);
  }
}

TEST_CASE_TEMPLATE("prompt JSON round trip is exact", T, double, mpq_class) {
  Rng rng(13, 0);
  Prompt<T> P;
  P.d = 3;
  P.L = 2;
  P.S = ScalarOps<T>::pow2(10);
  P.B = 2;
  for (long j = 1; j <= 6; ++j) {
    Vector<T> u;
    for (double x : rng.dyadic_ball(3, 20)) u.push_back(ScalarOps<T>::from_double(x));
    P.tokens.push_back(make_prompt_token<T>(u, 1 + (j - 1) % 4, j, P.S));
  }
  P.tokens[1].embedding[0] = ScalarOps<T>::from_double(0.1);
  auto back = prompt_from_json<T>(nlohmann::json::parse(prompt_to_json(P).dump()));
  CHECK(back.d == P.d);
  CHECK(back.L == P.L);
  CHECK(back.S == P.S);
  CHECK(back.B == P.B);
  CHECK(back.tokens == P.tokens);
}

TEST_CASE("rational scalars survive JSON") {
  const mpq_class third = q("1/3");
  CHECK(scalar_from_json<mpq_class>(scalar_to_json(third)) == third);
  CHECK(scalar_from_json<double>(scalar_to_json(0.1)) == 0.1);
  CHECK_THROWS(scalar_from_json<double>(nlohmann::json::array()));
}
