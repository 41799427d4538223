#pragma once

#include <gmpxx.h>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace pvm {

enum class Backend { floating, rational };

const char* backend_name(Backend b);
Backend parse_backend(std::string_view s);

template <class T>
struct ScalarOps;

template <>
struct ScalarOps<double> {
  static constexpr Backend backend = Backend::floating;
  static double from_int(long long v) { return static_cast<double>(v); }
  static double ratio(long long num, long long den) {
    return static_cast<double>(num) / static_cast<double>(den);
  }
  static double from_double(double v) { return v; }
  static double to_double(double v) { return v; }
  static double pow2(int k) { return std::ldexp(1.0, k); }
  static bool is_zero(double v) { return v == 0.0; }
  static double floor(double v) { return std::floor(v); }
  static double abs(double v) { return std::fabs(v); }
  static bool finite(double v) { return std::isfinite(v); }
  static void add_product(double& acc, double a, double b) { acc += a * b; }
};

template <>
struct ScalarOps<mpq_class> {
  static constexpr Backend backend = Backend::rational;
  static mpq_class from_int(long long v) {
    mpq_class r;
    mpz_class z;
    mpz_set_si(z.get_mpz_t(), static_cast<long>(v));
    r = z;
    return r;
  }
  static mpq_class ratio(long long num, long long den) {
    mpq_class r(from_int(num) / from_int(den));
    r.canonicalize();
    return r;
  }
  // exact: every finite double is a dyadic rational
  static mpq_class from_double(double v) { return mpq_class(v); }
  static double to_double(const mpq_class& v) { return v.get_d(); }
  static mpq_class pow2(int k) {
    mpq_class r(1);
    if (k >= 0)
      mpz_mul_2exp(r.get_num_mpz_t(), r.get_num_mpz_t(), static_cast<mp_bitcnt_t>(k));
    else
      mpz_mul_2exp(r.get_den_mpz_t(), r.get_den_mpz_t(), static_cast<mp_bitcnt_t>(-k));
    return r;
  }
  static bool is_zero(const mpq_class& v) { return sgn(v) == 0; }
  static mpq_class floor(const mpq_class& v) {
    mpz_class q;
    mpz_fdiv_q(q.get_mpz_t(), v.get_num_mpz_t(), v.get_den_mpz_t());
    return mpq_class(q);
  }
  static mpq_class abs(const mpq_class& v) { return ::abs(v); }
  static bool finite(const mpq_class&) { return true; }
  static void add_product(mpq_class& acc, const mpq_class& a, const mpq_class& b) {
    thread_local mpq_class tmp;
    mpq_mul(tmp.get_mpq_t(), a.get_mpq_t(), b.get_mpq_t());
    mpq_add(acc.get_mpq_t(), acc.get_mpq_t(), tmp.get_mpq_t());
  }
};

// Text form used by the JSON and CSV writers: shortest round-trip decimal for
// doubles, and for rationals a JSON number when the value is an exact double,
// otherwise "num/den".
std::string format_double(double v);
std::string format_rational(const mpq_class& v);
mpq_class parse_rational(std::string_view s);

template <class T>
T scalar_cast(double v) {
  return ScalarOps<T>::from_double(v);
}

template <class T>
double to_double(const T& v) {
  return ScalarOps<T>::to_double(v);
}

}  // namespace pvm
