#include "pvm/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <climits>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numbers>
#include <sstream>

#include "pvm/reference_oracle.hpp"
#include "pvm/transformer_vm.hpp"

namespace pvm {

namespace {

constexpr int kGridBits = 16;
constexpr int kMaxResample = 10000;
// disjoint stream ranges per command
constexpr std::uint64_t kGeneralStream = 1'000'000;
constexpr std::uint64_t kCorruptStream = 2'000'000;
constexpr std::uint64_t kAgentStream = 3'000'000;
constexpr std::uint64_t kDiversityStream = 4'000'000;
constexpr std::uint64_t kPrefixStream = 5'000'000;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string write_file(const std::string& dir, const std::string& name, const std::string& content) {
  if (dir.empty()) return {};
  std::filesystem::create_directories(dir);
  const auto path = (std::filesystem::path(dir) / name).string();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path);
  f << content;
  return path;
}

std::string num(double v) { return format_double(v); }

template <class T>
int max_exponent_for() {
  return ScalarOps<T>::backend == Backend::floating ? kFloatingScaleExponentLimit : INT_MAX;
}

template <class T>
TransformerParams<T> build_for(Activation a, std::size_t d) {
  return a == Activation::relu ? build_theta_star<T>(d) : build_theta_hash<T>(d);
}

template <class T>
std::vector<Vector<T>> random_data(Rng& rng, std::size_t d, std::size_t N) {
  std::vector<Vector<T>> data;
  for (std::size_t i = 0; i < N; ++i) {
    auto z = rng.dyadic_cube(d, kGridBits);
    data.push_back(cast_vector<T, double>(z));
  }
  return data;
}

Vector<double> scaled_ball(Rng& rng, std::size_t d, double B) {
  auto v = rng.dyadic_ball(d, kGridBits);
  for (auto& x : v) x *= B;
  return v;
}

// least-squares slope of log(err) against log(r)
double loglog_slope(const std::vector<double>& r, const std::vector<double>& err) {
  const double n = static_cast<double>(r.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t k = 0; k < r.size(); ++k) {
    const double x = std::log(r[k]), y = std::log(err[k]);
    sx += x, sy += y, sxx += x * x, sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace

// ---------------------------------------------------------------- config

ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "backend") c.backend = parse_backend(v.get<std::string>());
      else if (key == "variant") c.variant = parse_activation(v.get<std::string>());
      else if (key == "samples") c.samples = v.get<std::size_t>();
      else if (key == "out") c.out = v.get<std::string>();
      else if (key == "d_min") c.d_min = v.get<std::size_t>();
      else if (key == "d_max") c.d_max = v.get<std::size_t>();
      else if (key == "L_min") c.L_min = v.get<long>();
      else if (key == "L_max") c.L_max = v.get<long>();
      else if (key == "rank_max") c.rank_max = v.get<long>();
      else if (key == "B_min") c.B_min = v.get<long>();
      else if (key == "B_max") c.B_max = v.get<long>();
      else if (key == "N_min") c.N_min = v.get<std::size_t>();
      else if (key == "N_max") c.N_max = v.get<std::size_t>();
      else if (key == "T_max") c.T_max = v.get<long>();
      else if (key == "edge_fraction") c.edge_fraction = v.get<double>();
      else if (key == "target") c.target = v.get<std::string>();
      else if (key == "knots") c.knots = v.get<std::vector<std::size_t>>();
      else if (key == "grid") c.grid = v.get<std::size_t>();
      else if (key == "diversity_d") c.diversity_d = v.get<std::size_t>();
      else if (key == "lambda") c.lambda = v.get<double>();
      else if (key == "corrupt_d") c.corrupt_d = v.get<std::size_t>();
      else if (key == "corrupt_B") c.corrupt_B = v.get<double>();
      else if (key == "force_K") c.force_K = v.get<long>();
      else if (key == "probes") c.probes = v.get<std::size_t>();
      else if (key == "capacity_failures") c.capacity_failures = v.get<std::size_t>();
      else throw ConfigError("unknown config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  check_config(c);
  return c;
}

nlohmann::json config_to_json(const ExperimentConfig& c) {
  return {{"seed", c.seed},
          {"backend", backend_name(c.backend)},
          {"variant", activation_name(c.variant)},
          {"samples", c.samples},
          {"d_min", c.d_min},
          {"d_max", c.d_max},
          {"L_min", c.L_min},
          {"L_max", c.L_max},
          {"rank_max", c.rank_max},
          {"B_min", c.B_min},
          {"B_max", c.B_max},
          {"N_min", c.N_min},
          {"N_max", c.N_max},
          {"T_max", c.T_max},
          {"edge_fraction", c.edge_fraction},
          {"target", c.target},
          {"knots", c.knots},
          {"grid", c.grid},
          {"diversity_d", c.diversity_d},
          {"lambda", c.lambda},
          {"corrupt_d", c.corrupt_d},
          {"corrupt_B", c.corrupt_B},
          {"force_K", c.force_K},
          {"probes", c.probes},
          {"capacity_failures", c.capacity_failures}};
}

void check_config(const ExperimentConfig& c) {
  auto need = [](bool ok, const char* msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(c.d_min >= 1 && c.d_min <= c.d_max && c.d_max <= 64, "need 1 <= d_min <= d_max <= 64");
  need(c.L_min >= 1 && c.L_min <= c.L_max && c.L_max <= 8, "need 1 <= L_min <= L_max <= 8");
  need(c.rank_max >= 0 && c.rank_max <= 64, "need 0 <= rank_max <= 64");
  need(c.B_min >= 1 && c.B_min <= c.B_max && c.B_max <= 16, "need 1 <= B_min <= B_max <= 16");
  need(c.N_min >= 1 && c.N_min <= c.N_max && c.N_max <= 64, "need 1 <= N_min <= N_max <= 64");
  need(c.T_max >= 1 && c.T_max <= 256, "need 1 <= T_max <= 256");
  need(c.edge_fraction >= 0 && c.edge_fraction <= 1, "edge_fraction must lie in [0, 1]");
  need(c.target == "x2" || c.target == "sin", "target must be x2 or sin");
  need(!c.knots.empty(), "knots must not be empty");
  for (auto r : c.knots) need(r >= 1 && r <= 256, "knot counts must lie in [1, 256]");
  need(c.grid >= 2, "grid needs at least 2 points");
  need(c.diversity_d >= 2 && c.diversity_d <= 64, "diversity_d must lie in [2, 64]");
  need(c.lambda >= 0 && c.lambda <= 20, "lambda must lie in [0, 20]");
  need(c.corrupt_d >= 3 && c.corrupt_d <= 64, "corrupt_d must lie in [3, 64]");
  need(c.corrupt_B >= 1 && c.corrupt_B <= 16, "corrupt_B must lie in [1, 16]");
  need(c.force_K >= -1 && c.force_K <= 64, "force_K must be -1 or in [0, 64]");
  need(c.probes >= 1, "probes must be positive");
  if (c.backend == Backend::floating) {
    const int k = scale_exponent(ScaleVariant::compiled, c.d_min, mpq_class(c.B_min), c.L_min, 1);
    if (k > kFloatingScaleExponentLimit)
      throw ConfigError("config overflow: even the smallest instance needs S = 2^" + std::to_string(k) +
                        " on the floating backend");
  }
}

std::string resolve_out_dir(const std::string& flag, const std::string& config_value) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("PROMPTVM_OUT_DIR"); env && *env) return env;
  return config_value;
}

// ---------------------------------------------------------------- instances

template <class T>
CoarseNetwork<T> random_coarse_net(Rng& rng, std::size_t d, long L, long rank_max, long B) {
  CoarseNetwork<T> net;
  net.d = d;
  net.B = ScalarOps<T>::from_int(B);
  for (long l = 0; l < L; ++l) {
    const long r = rng.uniform_int(0, rank_max);
    std::vector<FactorPair<T>> layer;
    for (long k = 0; k < r; ++k) {
      auto a = scaled_ball(rng, d, static_cast<double>(B));
      auto b = scaled_ball(rng, d, static_cast<double>(B));
      layer.push_back({cast_vector<T, double>(a), cast_vector<T, double>(b)});
    }
    net.layers.push_back(std::move(layer));
  }
  return net;
}

template <class T>
CompiledInstance<T> random_compiled_instance(const ExperimentConfig& c, std::uint64_t instance, int max_exponent) {
  Rng rng(c.seed, instance);
  CompiledInstance<T> out;
  for (int attempt = 0; attempt < kMaxResample; ++attempt) {
    const auto d = static_cast<std::size_t>(rng.uniform_int(static_cast<long>(c.d_min), static_cast<long>(c.d_max)));
    const long L = rng.uniform_int(c.L_min, c.L_max);
    const long B = rng.uniform_int(c.B_min, c.B_max);
    const auto N = static_cast<std::size_t>(rng.uniform_int(static_cast<long>(c.N_min), static_cast<long>(c.N_max)));
    auto net = random_coarse_net<T>(rng, d, L, c.rank_max, B);
    const int k = scale_exponent(ScaleVariant::compiled, d, mpq_class(B), L, static_cast<long>(net.max_rank()));
    if (k > max_exponent) {
      ++out.resampled;
      continue;
    }
    out.L = L;
    out.scale_exponent = k;
    out.prompt = compile_network(net, ScalarOps<T>::pow2(k));
    out.net = std::move(net);
    out.data = random_data<T>(rng, d, N);
    return out;
  }
  throw ConfigError("config overflow: no instance fits the floating scale limit");
}

template <class T>
GeneralInstance<T> random_general_instance(const ExperimentConfig& c, std::uint64_t instance, int max_exponent) {
  Rng rng(c.seed, instance);
  GeneralInstance<T> out;
  for (int attempt = 0; attempt < kMaxResample; ++attempt) {
    const auto d = static_cast<std::size_t>(rng.uniform_int(static_cast<long>(c.d_min), static_cast<long>(c.d_max)));
    const long L = rng.uniform_int(c.L_min, c.L_max);
    const long B = rng.uniform_int(c.B_min, c.B_max);
    const auto N = static_cast<std::size_t>(rng.uniform_int(static_cast<long>(c.N_min), static_cast<long>(c.N_max)));
    const long Tn = rng.uniform_int(1, c.T_max);
    const bool edge = rng.bernoulli(c.edge_fraction);
    std::vector<Vector<double>> us;
    std::vector<long> ws;
    for (long j = 1; j <= Tn; ++j) {
      us.push_back(scaled_ball(rng, d, static_cast<double>(B)));
      ws.push_back(rng.uniform_int(1, 2 * L));
    }
    if (edge) ws.back() = 1;
    const int k = scale_exponent(ScaleVariant::general, d, mpq_class(B), L, Tn);
    if (k > max_exponent) {
      ++out.resampled;
      continue;
    }
    const T S = ScalarOps<T>::pow2(k);
    out.prompt.d = d;
    out.prompt.L = L;
    out.prompt.S = S;
    out.prompt.B = ScalarOps<T>::from_int(B);
    for (long j = 1; j <= Tn; ++j)
      out.prompt.tokens.push_back(make_prompt_token<T>(cast_vector<T, double>(us[static_cast<std::size_t>(j - 1)]),
                                                       ws[static_cast<std::size_t>(j - 1)], j, S));
    out.L = L;
    out.scale_exponent = k;
    out.data = random_data<T>(rng, d, N);
    return out;
  }
  throw ConfigError("config overflow: no instance fits the floating scale limit");
}

double target_value(const std::string& target, double x) {
  if (target == "x2") return x * x;
  if (target == "sin") return std::sin(2 * std::numbers::pi * x);
  throw ConfigError("unknown target " + target);
}

StandardNetwork interpolant(const std::string& target, std::size_t r) {
  if (r < 1) throw std::invalid_argument("interpolant: need at least one knot");
  StandardNetwork net;
  net.p = 1;
  net.r = r;
  const double h = 1.0 / static_cast<double>(r);
  Matrix<double> W1(r, 1), W2(1, r);
  Vector<double> b1(r), b2(1, target_value(target, 0.0));
  double prev_slope = 0.0;
  for (std::size_t k = 0; k < r; ++k) {
    const double x0 = static_cast<double>(k) * h, x1 = static_cast<double>(k + 1) * h;
    const double slope = (target_value(target, x1) - target_value(target, x0)) / h;
    W1(k, 0) = 1.0;
    b1[k] = -x0;
    W2(0, k) = slope - prev_slope;
    prev_slope = slope;
  }
  net.weights = {W1, W2};
  net.biases = {b1, b2};
  return net;
}

CoarseNetwork<double> constant_network(std::size_t d, std::size_t p) {
  if (p + 1 > d) throw std::invalid_argument("constant_network: need p <= d - 1");
  CoarseNetwork<double> net;
  net.d = d;
  net.B = 1.0;
  Vector<double> a(d, 0.0), b(d, 0.0);
  a[0] = 1.0;
  b[p] = 1.0;
  net.layers.push_back({{a, b}});
  return net;
}

// ---------------------------------------------------------------- verify

namespace {

template <class T>
nlohmann::json verify_suite(const ExperimentConfig& c, bool general, nlohmann::json& instances, bool& ok) {
  const int max_exp = max_exponent_for<T>();
  std::vector<std::unique_ptr<Engine<T>>> engines(c.d_max + 1);
  for (std::size_t d = c.d_min; d <= c.d_max; ++d)
    engines[d] = std::make_unique<Engine<T>>(build_for<T>(c.variant, d));
  const auto variant = general ? ScaleVariant::general : ScaleVariant::compiled;
  const long n = static_cast<long>(c.samples);
  std::vector<nlohmann::json> rows(c.samples);
  std::vector<EquivalenceReport> reps(c.samples);
  std::vector<std::string> errors(c.samples);
  std::vector<int> resampled(c.samples, 0), edge(c.samples, 0);

#pragma omp parallel for schedule(dynamic)
  for (long k = 0; k < n; ++k) {
    const auto idx = static_cast<std::size_t>(k);
    try {
      Prompt<T> prompt;
      std::vector<Vector<T>> data;
      long L;
      int exp;
      if (general) {
        auto inst = random_general_instance<T>(c, kGeneralStream + idx, max_exp);
        prompt = std::move(inst.prompt), data = std::move(inst.data), L = inst.L, exp = inst.scale_exponent;
        resampled[idx] = inst.resampled;
      } else {
        auto inst = random_compiled_instance<T>(c, idx, max_exp);
        prompt = std::move(inst.prompt), data = std::move(inst.data), L = inst.L, exp = inst.scale_exponent;
        resampled[idx] = inst.resampled;
      }
      edge[idx] = !prompt.tokens.empty() && prompt.tokens.back().tag() == 1;
      reps[idx] = verify_equivalence<T>(*engines[prompt.d], prompt, data, L, c.tolerance(), c.variant,
                                        EmulateOptions{variant, Kernel::optimized});
      rows[idx] = {{"instance", idx},
                   {"d", prompt.d},
                   {"L", L},
                   {"N", data.size()},
                   {"T", prompt.length()},
                   {"scale_exponent", exp},
                   {"resampled", resampled[idx]},
                   {"edge_term", edge[idx] == 1},
                   {"report", report_to_json(reps[idx])}};
    } catch (const std::exception& e) {
      errors[idx] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw ConfigError(e);

  std::size_t passed = 0, exact = 0, refused = 0, resampled_total = 0, edges = 0;
  double max_error = 0.0;
  for (std::size_t k = 0; k < c.samples; ++k) {
    passed += reps[k].pass;
    exact += reps[k].exact;
    refused += reps[k].refused;
    resampled_total += static_cast<std::size_t>(resampled[k]);
    edges += static_cast<std::size_t>(edge[k]);
    max_error = std::max(max_error, reps[k].max_error);
    instances.push_back(rows[k]);
  }
  if (passed != c.samples) ok = false;
  return {{"instances", c.samples}, {"passed", passed},    {"exact", exact},
          {"refused", refused},     {"resampled", resampled_total}, {"edge_term_prompts", edges},
          {"max_error", max_error}, {"tolerance", c.tolerance()}};
}

template <class T>
CommandResult verify_all(const ExperimentConfig& c) {
  CommandResult res;
  bool ok = true;
  nlohmann::json file = {{"command", "verify"}, {"config", config_to_json(c)}};
  for (const bool general : {false, true}) {
    const char* name = general ? "general" : "compiled";
    const auto t0 = std::chrono::steady_clock::now();
    nlohmann::json instances = nlohmann::json::array();
    auto summary = verify_suite<T>(c, general, instances, ok);
    file["suites"][name] = summary;
    file["suites"][name]["cases"] = instances;
    res.stats[name] = summary;
    res.stats[name]["seconds"] = seconds_since(t0);
  }
  file["pass"] = ok;
  res.stats["pass"] = ok;
  res.exit_code = ok ? 0 : 1;
  const std::string fname =
      std::string("verify_") + activation_name(c.variant) + "_" + backend_name(c.backend) + ".json";
  if (auto p = write_file(c.out, fname, file.dump(2) + "\n"); !p.empty()) res.files.push_back(p);
  return res;
}

}  // namespace

CommandResult cmd_verify(const ExperimentConfig& c) {
  check_config(c);
  return c.backend == Backend::rational ? verify_all<mpq_class>(c) : verify_all<double>(c);
}

// ---------------------------------------------------------------- sweep-length

namespace {

struct SweepRow {
  std::size_t r = 0, T = 0;
  int scale_exponent = 0;
  double sup_error = 0, oracle_error = 0, gap = 0;
};

// Embeds, compiles and emulates the standard net on the grid; Θ* throughout.
template <class T>
SweepRow sweep_point(const StandardNetwork& net, const std::string& target, std::size_t d, std::size_t grid,
                     const Engine<T>& engine) {
  SweepRow row;
  row.r = net.r;
  auto coarse = embed_standard_nn(net, d);
  const long L = coarse.depth();
  const mpq_class B(coarse.B);
  row.scale_exponent = scale_exponent(ScaleVariant::compiled, d, B, L, static_cast<long>(coarse.max_rank()));
  const T S = min_scale<T>(d, B, L, static_cast<long>(coarse.max_rank()), ScaleVariant::compiled);
  const auto prompt = compile_network(coarse.cast<T>(), S);
  row.T = prompt.length();
  std::vector<double> fhat(grid), nn(grid), f(grid);
  const long n = static_cast<long>(grid);
  std::vector<std::string> errors(grid);
#pragma omp parallel for schedule(dynamic)
  for (long g = 0; g < n; ++g) {
    const auto idx = static_cast<std::size_t>(g);
    const double x = static_cast<double>(g) / static_cast<double>(grid - 1);
    try {
      const std::vector<T> xv{ScalarOps<T>::from_double(x)};
      fhat[idx] = ScalarOps<T>::to_double(
          approximate_function<T>(engine, prompt, xv, L, EmulateOptions{ScaleVariant::compiled, Kernel::optimized}));
    } catch (const std::exception& e) {
      errors[idx] = e.what();
    }
    const std::vector<double> xd{x};
    nn[idx] = net.forward(xd);
    f[idx] = target_value(target, x);
  }
  for (const auto& e : errors)
    if (!e.empty()) throw std::runtime_error(e);
  for (std::size_t g = 0; g < grid; ++g) {
    row.sup_error = std::max(row.sup_error, std::fabs(fhat[g] - f[g]));
    row.oracle_error = std::max(row.oracle_error, std::fabs(nn[g] - f[g]));
    row.gap = std::max(row.gap, std::fabs(fhat[g] - nn[g]));
  }
  return row;
}

template <class T>
std::vector<SweepRow> sweep_rows(const ExperimentConfig& c, std::span<const std::size_t> widths, std::size_t d) {
  const Engine<T> engine(build_theta_star<T>(d));
  std::vector<SweepRow> rows;
  for (auto r : widths) rows.push_back(sweep_point<T>(interpolant(c.target, r), c.target, d, c.grid, engine));
  return rows;
}

}  // namespace

CommandResult cmd_sweep_length(const ExperimentConfig& c) {
  check_config(c);
  CommandResult res;
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t d = *std::max_element(c.knots.begin(), c.knots.end()) + 1;
  auto rows = c.backend == Backend::rational ? sweep_rows<mpq_class>(c, c.knots, d) : sweep_rows<double>(c, c.knots, d);
  std::ostringstream csv;
  csv << "# schema=1\n" << "r,T,scale_exponent,sup_error,oracle_error,gap\n";
  bool ok = true;
  std::vector<double> rs, errs;
  nlohmann::json jrows = nlohmann::json::array();
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto& row = rows[k];
    csv << row.r << ',' << row.T << ',' << row.scale_exponent << ',' << num(row.sup_error) << ','
        << num(row.oracle_error) << ',' << num(row.gap) << '\n';
    if (row.gap > 1e-6) ok = false;
    if (k > 0 && c.knots[k] > c.knots[k - 1] && row.sup_error > rows[k - 1].sup_error) ok = false;
    rs.push_back(static_cast<double>(row.r));
    errs.push_back(row.sup_error);
    jrows.push_back({{"r", row.r},
                     {"T", row.T},
                     {"scale_exponent", row.scale_exponent},
                     {"sup_error", row.sup_error},
                     {"oracle_error", row.oracle_error},
                     {"gap", row.gap}});
  }
  res.stats = {{"d", d}, {"rows", jrows}, {"pass", ok}, {"seconds", seconds_since(t0)}};
  if (rows.size() >= 2) res.stats["loglog_slope"] = loglog_slope(rs, errs);
  res.exit_code = ok ? 0 : 1;
  if (auto p = write_file(c.out, "sweep_length_" + c.target + ".csv", csv.str()); !p.empty()) res.files.push_back(p);
  return res;
}

// ---------------------------------------------------------------- corrupt

namespace {

struct CorruptRow {
  std::string mode;
  std::size_t sample = 0;
  long K = 0;
  long depth = 0;
  Backend backend = Backend::floating;
  double x = 0, fhat = 0, error = 0;
  bool oracle_match = true;
};

// f-hat of the (possibly corrupted) constant-network prompt at x, with the
// oracle's value for the same prompt.
template <class T>
std::pair<double, double> corrupted_value(const Engine<T>& engine, const CoarseNetwork<double>& base,
                                          const std::vector<Vector<double>>& vs, int k, double x) {
  const T S = ScalarOps<T>::pow2(k);
  auto P0 = compile_network(base.cast<T>(), S);
  std::vector<Vector<T>> vt;
  for (const auto& v : vs) vt.push_back(cast_vector<T, double>(v));
  auto P = append_irrelevant<T>(P0, vt);
  const std::vector<T> xv{ScalarOps<T>::from_double(x)};
  const T fhat = approximate_function<T>(engine, P, xv, P.L, EmulateOptions{ScaleVariant::general, Kernel::optimized});
  Vector<T> z(P.d, T(0));
  z[0] = xv[0];
  z[1] = T(1);
  auto Ws = extract_virtual_weights(P, P.L, 1);
  const T want = forward_virtual<T>(Ws, z, Activation::relu).back()[0];
  return {ScalarOps<T>::to_double(fhat), ScalarOps<T>::to_double(want)};
}

}  // namespace

CommandResult cmd_corrupt(const ExperimentConfig& c, const std::string& mode) {
  check_config(c);
  if (mode != "A" && mode != "B" && mode != "both") throw ConfigError("corrupt mode must be A, B or both");
  CommandResult res;
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t d = c.corrupt_d, p = 1;
  const auto base = constant_network(d, p);
  const Engine<double> eng_f(build_theta_star<double>(d));
  const Engine<mpq_class> eng_q(build_theta_star<mpq_class>(d));
  std::vector<CorruptRow> rows;
  bool ok = true;
  const mpq_class B(std::max(1.0, c.corrupt_B));

  if (mode == "A" || mode == "both") {
    // uncorrupted control on the floating backend
    const int k0 = scale_exponent(ScaleVariant::general, d, B, 1, 2);
    double control_max = 0.0;
    for (std::size_t g = 0; g < c.probes; ++g) {
      const double x = c.probes == 1 ? 0.5 : static_cast<double>(g) / static_cast<double>(c.probes - 1);
      CorruptRow row{"control", g, 0, 1, Backend::floating, x, 0, 0, true};
      auto [fhat, want] = corrupted_value<double>(eng_f, base, {}, k0, x);
      row.fhat = fhat;
      row.error = std::fabs(fhat - 1.0);
      row.oracle_match = std::fabs(fhat - want) <= 1e-6;
      control_max = std::max(control_max, row.error);
      rows.push_back(row);
    }

    const long n = static_cast<long>(c.samples);
    std::vector<CorruptRow> sample_rows(c.samples);
    std::vector<std::string> errors(c.samples);
#pragma omp parallel for schedule(dynamic)
    for (long s = 0; s < n; ++s) {
      const auto idx = static_cast<std::size_t>(s);
      try {
        Rng rng(c.seed, kCorruptStream + idx);
        const long K = c.force_K >= 0 ? c.force_K : rng.poisson(c.lambda);
        std::vector<Vector<double>> vs;
        for (long k = 0; k < K; ++k) vs.push_back(scaled_ball(rng, d, c.corrupt_B));
        const double x = rng.dyadic_cube(1, kGridBits)[0];
        const long depth = 1 + (K + 1) / 2;
        const int k = scale_exponent(ScaleVariant::general, d, B, depth, 2 + K);
        const bool floating = c.backend == Backend::floating && k <= kFloatingScaleExponentLimit;
        CorruptRow row{"A", idx, K, depth, floating ? Backend::floating : Backend::rational, x, 0, 0, true};
        auto [fhat, want] = floating ? corrupted_value<double>(eng_f, base, vs, k, x)
                                     : corrupted_value<mpq_class>(eng_q, base, vs, k, x);
        row.fhat = fhat;
        row.error = std::fabs(fhat - 1.0);
        row.oracle_match = floating ? std::fabs(fhat - want) <= 1e-6 : fhat == want;
        sample_rows[idx] = row;
      } catch (const std::exception& e) {
        errors[idx] = e.what();
      }
    }
    for (const auto& e : errors)
      if (!e.empty()) throw std::runtime_error(e);
    double sum = 0.0;
    std::size_t mismatches = 0, k2 = 0;
    for (const auto& r : sample_rows) {
      sum += r.error;
      mismatches += !r.oracle_match;
      k2 += r.K == 2;
    }
    for (const auto& r : rows) mismatches += !r.oracle_match;
    rows.insert(rows.end(), sample_rows.begin(), sample_rows.end());
    const double mean = c.samples ? sum / static_cast<double>(c.samples) : 0.0;
    const double bound = c.lambda * c.lambda * std::exp(-c.lambda) / 2.0;
    res.stats["A"] = {{"samples", c.samples},   {"mean_error", mean},           {"bound", bound},
                      {"k2_count", k2},         {"control_max_error", control_max},
                      {"oracle_mismatches", mismatches}};
    if (mismatches > 0 || control_max > 1e-6) ok = false;
    if (c.force_K < 0 && mean < bound) ok = false;
    if (c.force_K == 0 && mean > 1e-6) ok = false;
  }

  if (mode == "B" || mode == "both") {
    // compiled constant net on coordinates {0, p}; prefixes live on the rest
    const std::size_t prefixes = 5;
    double err_min = INFINITY, err_max = 0.0;
    bool all_zero = true;
    for (std::size_t s = 0; s < prefixes; ++s) {
      Rng rng(c.seed, kPrefixStream + s);
      const long Lp = rng.uniform_int(1, 2);
      CoarseNetwork<double> pre;
      pre.d = d;
      pre.B = c.corrupt_B;
      for (long l = 0; l < Lp; ++l) {
        std::vector<FactorPair<double>> layer;
        const long r = rng.uniform_int(1, 2);
        for (long k = 0; k < r; ++k) {
          auto a = scaled_ball(rng, d, c.corrupt_B), b = scaled_ball(rng, d, c.corrupt_B);
          a[0] = a[p] = b[0] = b[p] = 0.0;
          layer.push_back({a, b});
        }
        pre.layers.push_back(std::move(layer));
      }
      auto base_q = base.cast<mpq_class>();
      auto pre_q = pre.cast<mpq_class>();
      const long T_total = 2 * static_cast<long>(pre.layers[0].size() + (Lp > 1 ? pre.layers[1].size() : 0)) + 2;
      const int k = scale_exponent(ScaleVariant::prefix, d, B, Lp + 1, T_total);
      const mpq_class S = ScalarOps<mpq_class>::pow2(k);
      auto prefix_prompt = compile_network(pre_q, S);
      auto P = compile_network(base_q, S);
      auto combined = prefix_irrelevant<mpq_class>(prefix_prompt, P, S);
      std::vector<CorruptRow> prow(c.probes);
      const long n = static_cast<long>(c.probes);
      std::vector<std::string> errors(c.probes);
#pragma omp parallel for schedule(dynamic)
      for (long g = 0; g < n; ++g) {
        const auto idx = static_cast<std::size_t>(g);
        try {
          const double x = c.probes == 1 ? 0.5 : static_cast<double>(g) / static_cast<double>(c.probes - 1);
          const std::vector<mpq_class> xv{mpq_class(x)};
          const mpq_class fhat = approximate_function<mpq_class>(eng_q, combined, xv, combined.L,
                                                                 EmulateOptions{ScaleVariant::prefix, Kernel::optimized});
          prow[idx] = {"B", s, static_cast<long>(prefix_prompt.length()), combined.L, Backend::rational, x,
                       fhat.get_d(), mpq_class(abs(fhat - 1)).get_d(), fhat == 0};
        } catch (const std::exception& e) {
          errors[idx] = e.what();
        }
      }
      for (const auto& e : errors)
        if (!e.empty()) throw std::runtime_error(e);
      for (const auto& r : prow) {
        all_zero = all_zero && r.oracle_match;
        err_min = std::min(err_min, r.error);
        err_max = std::max(err_max, r.error);
      }
      rows.insert(rows.end(), prow.begin(), prow.end());
    }
    res.stats["B"] = {{"prefixes", prefixes},
                      {"probes", c.probes},
                      {"all_zero", all_zero},
                      {"error_min", err_min},
                      {"error_max", err_max}};
    if (!all_zero || err_min != 1.0 || err_max != 1.0) ok = false;
  }

  std::ostringstream csv;
  csv << "# schema=1\n" << "mode,sample,K,depth,backend,x,fhat,error\n";
  for (const auto& r : rows)
    csv << r.mode << ',' << r.sample << ',' << r.K << ',' << r.depth << ',' << backend_name(r.backend) << ','
        << num(r.x) << ',' << num(r.fhat) << ',' << num(r.error) << '\n';
  res.stats["pass"] = ok;
  res.stats["seconds"] = seconds_since(t0);
  res.exit_code = ok ? 0 : 1;
  if (auto path = write_file(c.out, "corrupt.csv", csv.str()); !path.empty()) res.files.push_back(path);
  return res;
}

// ---------------------------------------------------------------- diversity

CommandResult cmd_diversity(const ExperimentConfig& c) {
  check_config(c);
  CommandResult res;
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t d = c.diversity_d;
  const std::size_t nets = std::min<std::size_t>(c.samples, 50);
  bool ok = true;
  std::ostringstream csv;
  csv << "# schema=1\n" << "r,nets,max_rank,rank_ok,width,T,sup_error\n";
  nlohmann::json jrows = nlohmann::json::array();
  double prev_err = INFINITY;
  for (std::size_t r = 1; r <= d; ++r) {
    std::size_t max_rank = 0;
    bool rank_ok = true;
    for (std::size_t s = 0; s < nets; ++s) {
      Rng rng(c.seed, kDiversityStream + 1000 * r + s);
      const long L = rng.uniform_int(c.L_min, c.L_max);
      const long B = rng.uniform_int(c.B_min, c.B_max);
      auto net = random_coarse_net<double>(rng, d, L, c.rank_max, B);
      for (auto& layer : net.layers)
        for (auto& f : layer)
          for (std::size_t k = r; k < d; ++k) f.left[k] = f.right[k] = 0.0;
      const int k = scale_exponent(ScaleVariant::compiled, d, mpq_class(B), L, static_cast<long>(net.max_rank()));
      auto P = compile_network(net, std::ldexp(1.0, k));
      if (!restrict_diversity_check(P, r)) rank_ok = false;
      for (std::size_t i = 1; i <= 2; ++i)
        for (const auto& W : extract_virtual_weights(P, L, i)) {
          const auto rk = numerical_rank(W, 1e-10);
          max_rank = std::max(max_rank, rk);
          if (rk > r) rank_ok = false;
        }
    }
    // best-effort interpolant: input at 0, constant at width, width + 1 = r coordinates
    std::string width = "", T = "", err = "";
    if (r >= 2) {
      const auto net = interpolant(c.target, r - 1);
      const auto coarse = embed_standard_nn(net, d);
      const long L = coarse.depth();
      const auto P = compile_network(coarse, std::ldexp(1.0, scale_exponent(ScaleVariant::compiled, d,
                                                                            mpq_class(coarse.B), L,
                                                                            static_cast<long>(coarse.max_rank()))));
      if (!restrict_diversity_check(P, r)) rank_ok = false;
      const int k = scale_exponent(ScaleVariant::compiled, d, mpq_class(coarse.B), L,
                                   static_cast<long>(coarse.max_rank()));
      SweepRow row = k <= kFloatingScaleExponentLimit
                         ? sweep_point<double>(net, c.target, d, c.grid, Engine<double>(build_theta_star<double>(d)))
                         : sweep_point<mpq_class>(net, c.target, d, c.grid,
                                                  Engine<mpq_class>(build_theta_star<mpq_class>(d)));
      width = std::to_string(r - 1);
      T = std::to_string(row.T);
      err = num(row.sup_error);
      if (row.sup_error > prev_err) ok = false;
      prev_err = row.sup_error;
      jrows.push_back({{"r", r}, {"max_rank", max_rank}, {"rank_ok", rank_ok}, {"sup_error", row.sup_error}});
    } else {
      jrows.push_back({{"r", r}, {"max_rank", max_rank}, {"rank_ok", rank_ok}});
    }
    if (!rank_ok) ok = false;
    csv << r << ',' << nets << ',' << max_rank << ',' << (rank_ok ? 1 : 0) << ',' << width << ',' << T << ',' << err
        << '\n';
  }
  res.stats = {{"d", d}, {"rows", jrows}, {"pass", ok}, {"seconds", seconds_since(t0)}};
  res.exit_code = ok ? 0 : 1;
  if (auto p = write_file(c.out, "diversity_" + c.target + ".csv", csv.str()); !p.empty()) res.files.push_back(p);
  return res;
}

// ---------------------------------------------------------------- agents

namespace {

struct AgentRow {
  std::size_t instance = 0, d = 0, agents = 0, T_mono = 0, T_concat = 0;
  long L = 0;
  double max_diff = 0;
  std::string status;
};

template <class T>
AgentRow agent_case(const ExperimentConfig& c, std::size_t idx, bool under_capacity,
                    const std::vector<std::unique_ptr<Engine<T>>>& engines) {
  Rng rng(c.seed, kAgentStream + idx);
  AgentRow row;
  row.instance = idx;
  for (int attempt = 0; attempt < kMaxResample; ++attempt) {
    const auto d = static_cast<std::size_t>(rng.uniform_int(static_cast<long>(c.d_min), static_cast<long>(c.d_max)));
    const long L = rng.uniform_int(c.L_min, c.L_max);
    const long B = rng.uniform_int(c.B_min, c.B_max);
    const auto N = static_cast<std::size_t>(rng.uniform_int(static_cast<long>(c.N_min), static_cast<long>(c.N_max)));
    auto net = random_coarse_net<T>(rng, d, L, std::max<long>(c.rank_max, under_capacity ? 1 : 0), B);
    if (under_capacity) {
      // make sure some layer has work, then give it one pair slot too few
      if (net.layers[0].empty())
        net.layers[0].push_back({cast_vector<T, double>(scaled_ball(rng, d, static_cast<double>(B))),
                                 cast_vector<T, double>(scaled_ball(rng, d, static_cast<double>(B)))});
    }
    std::vector<AgentAssignment> plan;
    for (long l = 1; l <= L; ++l) {
      const std::size_t need = net.layers[static_cast<std::size_t>(l - 1)].size();
      const long count = rng.uniform_int(1, 3);
      std::vector<AgentAssignment> mine;
      for (long a = 0; a < count; ++a)
        mine.push_back({l, static_cast<std::size_t>(rng.uniform_int(1, 2 * std::max<long>(c.rank_max, 1) + 1))});
      auto slots = [&] {
        std::size_t s = 0;
        for (const auto& a : mine) s += a.length / 2;
        return s;
      };
      while (slots() < need) mine[static_cast<std::size_t>(rng.uniform_int(0, count - 1))].length += 2;
      if (under_capacity && l == 1) {
        // shrink to need - 1 pair slots
        for (auto& a : mine) a.length = 1;
        mine[0].length = 2 * (need - 1) + 1;
      }
      plan.insert(plan.end(), mine.begin(), mine.end());
    }
    for (std::size_t k = plan.size(); k > 1; --k)
      std::swap(plan[k - 1], plan[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(k) - 1))]);
    row.d = d;
    row.L = L;
    row.agents = plan.size();
    // tag multiplicity of the concatenation
    std::vector<long> mult(static_cast<std::size_t>(2 * L + 1), 0);
    for (const auto& a : plan) {
      mult[static_cast<std::size_t>(2 * a.layer - 1)] += static_cast<long>((a.length + 1) / 2);
      mult[static_cast<std::size_t>(2 * a.layer)] += static_cast<long>(a.length / 2);
    }
    const long t = *std::max_element(mult.begin(), mult.end());
    const int k = scale_exponent(ScaleVariant::compiled, d, mpq_class(B), L, t);
    if (k > max_exponent_for<T>()) continue;
    const T S = ScalarOps<T>::pow2(k);
    std::vector<AgentBlock<T>> blocks;
    try {
      blocks = split_among_agents<T>(net, plan, S);
    } catch (const CapacityError&) {
      row.status = under_capacity ? "capacity_error" : "unexpected_capacity_error";
      return row;
    }
    if (under_capacity) {
      row.status = "capacity_not_detected";
      return row;
    }
    const auto mono = compile_network(net, S);
    const auto concat = concat_agents_prompt<T>(blocks, S, net.B);
    row.T_mono = mono.length();
    row.T_concat = concat.length();
    const auto data = random_data<T>(rng, d, N);
    const EmulateOptions opts{ScaleVariant::compiled, Kernel::optimized};
    const auto a = emulate_network<T>(*engines[d], mono, data, L, opts);
    const auto b = emulate_network<T>(*engines[d], concat, data, L, opts);
    bool identical = true;
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t l = 0; l < static_cast<std::size_t>(L); ++l)
        for (std::size_t q = 0; q < d; ++q) {
          if (a.outputs[i][l][q] == b.outputs[i][l][q]) continue;
          identical = false;
          row.max_diff = std::max(
              row.max_diff, ScalarOps<T>::to_double(ScalarOps<T>::abs(T(a.outputs[i][l][q] - b.outputs[i][l][q]))));
        }
    const double tol = ScalarOps<T>::backend == Backend::rational ? 0.0 : 1e-9;
    row.status = identical ? "identical" : row.max_diff <= tol ? "equal" : "mismatch";
    return row;
  }
  throw ConfigError("config overflow: no agent instance fits the floating scale limit");
}

template <class T>
CommandResult agents_all(const ExperimentConfig& c) {
  CommandResult res;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::unique_ptr<Engine<T>>> engines(c.d_max + 1);
  for (std::size_t d = c.d_min; d <= c.d_max; ++d)
    engines[d] = std::make_unique<Engine<T>>(build_theta_star<T>(d));
  const std::size_t total = c.samples + c.capacity_failures;
  std::vector<AgentRow> rows(total);
  std::vector<std::string> errors(total);
  const long n = static_cast<long>(total);
#pragma omp parallel for schedule(dynamic)
  for (long s = 0; s < n; ++s) {
    const auto idx = static_cast<std::size_t>(s);
    try {
      rows[idx] = agent_case<T>(c, idx, idx >= c.samples, engines);
    } catch (const std::exception& e) {
      errors[idx] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw ConfigError(e);
  std::ostringstream csv;
  csv << "# schema=1\n" << "instance,d,L,agents,T_mono,T_concat,max_diff,status\n";
  std::size_t equal = 0, identical = 0, capacity = 0;
  double max_diff = 0;
  for (const auto& r : rows) {
    csv << r.instance << ',' << r.d << ',' << r.L << ',' << r.agents << ',' << r.T_mono << ',' << r.T_concat << ','
        << num(r.max_diff) << ',' << r.status << '\n';
    identical += r.status == "identical";
    equal += r.status == "identical" || r.status == "equal";
    capacity += r.status == "capacity_error";
    max_diff = std::max(max_diff, r.max_diff);
  }
  const bool ok = equal == c.samples && capacity == c.capacity_failures;
  res.stats = {{"instances", c.samples},
               {"equal", equal},
               {"identical", identical},
               {"max_diff", max_diff},
               {"capacity_expected", c.capacity_failures},
               {"capacity_detected", capacity},
               {"pass", ok},
               {"seconds", seconds_since(t0)}};
  res.exit_code = ok ? 0 : 1;
  if (auto p = write_file(c.out, std::string("agents_") + backend_name(c.backend) + ".csv", csv.str()); !p.empty())
    res.files.push_back(p);
  return res;
}

}  // namespace

CommandResult cmd_agents(const ExperimentConfig& c) {
  check_config(c);
  return c.backend == Backend::rational ? agents_all<mpq_class>(c) : agents_all<double>(c);
}

#define PVM_INSTANTIATE(T)                                                                                     \
  template CoarseNetwork<T> random_coarse_net<T>(Rng&, std::size_t, long, long, long);                         \
  template CompiledInstance<T> random_compiled_instance<T>(const ExperimentConfig&, std::uint64_t, int);       \
  template GeneralInstance<T> random_general_instance<T>(const ExperimentConfig&, std::uint64_t, int);

PVM_INSTANTIATE(double)
PVM_INSTANTIATE(mpq_class)

}  // namespace pvm
