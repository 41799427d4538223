#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pvm/core_math.hpp"
#include "pvm/prompt_compiler.hpp"
#include "pvm/random.hpp"
#include "pvm/token_model.hpp"

namespace pvm {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  Backend backend = Backend::rational;
  Activation variant = Activation::relu;
  std::size_t samples = 200;
  std::string out;  // empty: write nothing

  // random instances
  std::size_t d_min = 2, d_max = 6;
  long L_min = 1, L_max = 3;
  long rank_max = 3;
  long B_min = 1, B_max = 2;
  std::size_t N_min = 1, N_max = 3;
  long T_max = 10;
  double edge_fraction = 0.25;  // general prompts forced to end with tag 1

  // sweep-length and diversity
  std::string target = "x2";
  std::vector<std::size_t> knots = {4, 8, 16, 32};
  std::size_t grid = 1001;
  std::size_t diversity_d = 8;

  // corrupt
  double lambda = 1.0;
  std::size_t corrupt_d = 6;
  double corrupt_B = 1.0;
  long force_K = -1;  // >= 0 replaces the Poisson draw
  std::size_t probes = 101;

  // agents
  std::size_t capacity_failures = 5;

  double tolerance() const { return backend == Backend::rational ? 0.0 : 1e-6; }
};

// Overlays the keys present in j onto base; unknown keys and bad ranges throw
// ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig base = {});
nlohmann::json config_to_json(const ExperimentConfig& c);
void check_config(const ExperimentConfig& c);

// --out, then PROMPTVM_OUT_DIR, then the config value.
std::string resolve_out_dir(const std::string& flag, const std::string& config_value);

struct CommandResult {
  int exit_code = 0;  // 0 pass, 1 assertion failure
  nlohmann::json stats;
  std::vector<std::string> files;
};

// ---- random instances (exact dyadic values, identical for both backends) ----

template <class T>
struct CompiledInstance {
  CoarseNetwork<T> net;
  Prompt<T> prompt;
  std::vector<Vector<T>> data;
  long L = 1;
  int scale_exponent = 0;  // S = 2^scale_exponent
  int resampled = 0;
};

template <class T>
struct GeneralInstance {
  Prompt<T> prompt;
  std::vector<Vector<T>> data;
  long L = 1;
  int scale_exponent = 0;  // S = 2^scale_exponent
  int resampled = 0;
};

// Factors B * v with v on the 2^-16 grid inside the unit ball.
template <class T>
CoarseNetwork<T> random_coarse_net(Rng& rng, std::size_t d, long L, long rank_max, long B);

// Draws are redone while the scale exponent exceeds max_exponent.
template <class T>
CompiledInstance<T> random_compiled_instance(const ExperimentConfig& c, std::uint64_t instance, int max_exponent);

template <class T>
GeneralInstance<T> random_general_instance(const ExperimentConfig& c, std::uint64_t instance, int max_exponent);

// Hat-function interpolant f(0) + sum_k c_k relu(x - k/r) of the target on the
// uniform knots, as a one-hidden-layer network with p = 1.
StandardNetwork interpolant(const std::string& target, std::size_t r);
double target_value(const std::string& target, double x);

// (W_1 = e_1 e_{p+1}^T, L = 1): f(x) = 1.
CoarseNetwork<double> constant_network(std::size_t d, std::size_t p);

// ---- commands ----
CommandResult cmd_verify(const ExperimentConfig& c);
CommandResult cmd_sweep_length(const ExperimentConfig& c);
CommandResult cmd_corrupt(const ExperimentConfig& c, const std::string& mode);  // "A", "B" or "both"
CommandResult cmd_diversity(const ExperimentConfig& c);
CommandResult cmd_agents(const ExperimentConfig& c);

}  // namespace pvm
