#include "pvm/random.hpp"

#include <cmath>
#include <stdexcept>

namespace pvm {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t instance) {
  std::uint64_t s = seed;
  const std::uint64_t a = splitmix64(s);
  std::uint64_t t = a ^ (instance * 0xd1342543de82ef95ULL + 1);
  return splitmix64(t);
}

double Rng::uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

long Rng::uniform_int(long lo, long hi) {
  if (hi < lo) throw std::invalid_argument("uniform_int: empty range");
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<long>(next());
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t x;
  do x = next();
  while (x >= limit);
  return lo + static_cast<long>(x % span);
}

long Rng::poisson(double lambda) {
  if (lambda < 0) throw std::invalid_argument("poisson: negative rate");
  // multiplication method, fine for the small rates used here
  const double limit = std::exp(-lambda);
  long k = 0;
  double prod = uniform01();
  while (prod > limit) {
    ++k;
    prod *= uniform01();
  }
  return k;
}

std::vector<double> Rng::dyadic_ball(std::size_t d, int bits) {
  const long q = 1L << bits;
  std::vector<double> v(d);
  for (;;) {
    double n2 = 0;
    for (auto& x : v) {
      x = std::ldexp(static_cast<double>(uniform_int(-q, q)), -bits);
      n2 += x * x;
    }
    if (n2 <= 1.0) return v;
  }
}

std::vector<double> Rng::dyadic_cube(std::size_t d, int bits) {
  const long q = 1L << bits;
  std::vector<double> v(d);
  for (auto& x : v) x = std::ldexp(static_cast<double>(uniform_int(0, q)), -bits);
  return v;
}

}  // namespace pvm
