#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace pvm {

// One step of splitmix64 on `state`.
std::uint64_t splitmix64(std::uint64_t& state);

// Seed of stream `instance` under run seed `seed`; instance k can be replayed
// alone.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t instance);

// mt19937_64 with distributions written out here so results do not depend on
// the standard library's implementation.
class Rng {
 public:
  Rng(std::uint64_t seed, std::uint64_t instance) : engine_(stream_seed(seed, instance)) {}

  std::uint64_t next() { return engine_(); }
  double uniform01();                  // [0, 1), 53 bits
  double uniform(double lo, double hi);
  long uniform_int(long lo, long hi);  // inclusive
  long poisson(double lambda);
  bool bernoulli(double p) { return uniform01() < p; }

  // Point of the unit ball on the grid 2^-bits, by rejection from the cube.
  std::vector<double> dyadic_ball(std::size_t d, int bits);
  // Point of [0, 1]^d on the grid 2^-bits.
  std::vector<double> dyadic_cube(std::size_t d, int bits);

 private:
  std::mt19937_64 engine_;
};

}  // namespace pvm
