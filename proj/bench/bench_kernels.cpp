#include <benchmark/benchmark.h>

#include <omp.h>

#include "pvm/experiments.hpp"
#include "pvm/transformer_vm.hpp"

using namespace pvm;

namespace {

template <class T>
GeneralInstance<T> instance(std::size_t d) {
  ExperimentConfig c;
  c.d_min = c.d_max = d;
  c.L_min = c.L_max = 2;
  c.N_min = c.N_max = 3;
  c.T_max = 10;
  return random_general_instance<T>(c, 0, ScalarOps<T>::backend == Backend::floating ? kFloatingScaleExponentLimit : 64);
}

template <class T>
void generate_steps(benchmark::State& state, Kernel kernel) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const int threads = static_cast<int>(state.range(1));
  const auto inst = instance<T>(d);
  const Engine<T> engine(build_theta_star<T>(d));
  const auto H = input_matrix<T>(inst.prompt, inst.data);
  const std::size_t K = inst.data.size() * static_cast<std::size_t>(inst.L);
  const int saved = omp_get_max_threads();
  omp_set_num_threads(threads);
  for (auto _ : state) {
    auto trace = engine.generate(H, K, {kernel, false});
    benchmark::DoNotOptimize(trace.tokens.back().data());
  }
  omp_set_num_threads(saved);
  state.counters["tokens"] = static_cast<double>(H.cols());
}

void BM_reference_double(benchmark::State& s) { generate_steps<double>(s, Kernel::reference); }
void BM_optimized_double(benchmark::State& s) { generate_steps<double>(s, Kernel::optimized); }
void BM_reference_rational(benchmark::State& s) { generate_steps<mpq_class>(s, Kernel::reference); }
void BM_optimized_rational(benchmark::State& s) { generate_steps<mpq_class>(s, Kernel::optimized); }

}  // namespace

BENCHMARK(BM_reference_double)->Args({2, 1})->Args({6, 1})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_optimized_double)->Args({2, 1})->Args({6, 1})->Args({6, 4})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_reference_rational)->Args({3, 1})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_optimized_rational)->Args({3, 1})->Args({3, 4})->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
