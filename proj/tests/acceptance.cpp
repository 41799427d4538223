// One line per acceptance criterion; exits nonzero when any criterion fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>

#include <fmt/format.h>

#include "pvm/experiments.hpp"
#include "pvm/prompt_compiler.hpp"
#include "pvm/reference_oracle.hpp"
#include "pvm/transformer_vm.hpp"

using namespace pvm;

namespace {

constexpr std::size_t kInstances = 200;
constexpr double kFloatTolerance = 1e-6;
constexpr double kRuntimeLimitSeconds = 60.0;

constexpr std::size_t kStandardNets = 100;
constexpr std::size_t kStandardInputs = 50;
constexpr std::size_t kStandardDim = 6;

constexpr std::size_t kPrefixProbes = 101;

constexpr double kPoissonLambda = 1.0;
constexpr std::size_t kPoissonSamples = 2000;
constexpr double kPoissonMeanFloor = 0.18;

constexpr std::size_t kDiversityDim = 8;
constexpr double kRankTolerance = 1e-10;

constexpr std::size_t kAgentPairs = 100;
constexpr double kAgentFloatTolerance = 1e-9;

constexpr double kSlopeLow = -2.5, kSlopeHigh = -1.5;
constexpr double kEmulationGap = 1e-6;

// measured once: nonzeros of the seven-layer transformer are 58 d + 215, largest ratio at d = 1
constexpr std::size_t kNonzerosPerDim = 273;
constexpr double kMaxEntry = 10.0;

int failures = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
  std::printf("[%s] %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct VerifyPair {
  CommandResult rational, floating;
  double rational_seconds = 0, floating_seconds = 0;
};

VerifyPair run_verify(Activation variant) {
  ExperimentConfig c;
  c.samples = kInstances;
  c.variant = variant;
  VerifyPair out;
  auto t0 = std::chrono::steady_clock::now();
  out.rational = cmd_verify(c);
  out.rational_seconds = seconds_since(t0);
  c.backend = Backend::floating;
  t0 = std::chrono::steady_clock::now();
  out.floating = cmd_verify(c);
  out.floating_seconds = seconds_since(t0);
  return out;
}

bool suite_ok(const VerifyPair& v, const char* suite, std::string& detail) {
  const auto& q = v.rational.stats[suite];
  const auto& f = v.floating.stats[suite];
  const std::size_t exact = q["exact"], fpass = f["passed"], qref = q["refused"], fref = f["refused"];
  const double fmax = f["max_error"];
  const double qs = q["seconds"], fs = f["seconds"];
  const bool ok = exact == kInstances && qref == 0 && fpass == kInstances && fref == 0 && fmax <= kFloatTolerance &&
                  qs <= kRuntimeLimitSeconds && fs <= kRuntimeLimitSeconds;
  detail = fmt::format("rational {}/{} exact ({:.1f} s), floating {}/{} within {:g}, max {:.3g} ({:.1f} s)", exact,
                       kInstances, qs, fpass, kInstances, kFloatTolerance, fmax, fs);
  return ok;
}

void compiled_and_general(const VerifyPair& v, const std::string& prefix) {
  std::string detail;
  bool ok = suite_ok(v, "compiled", detail);
  report(ok, prefix + "compiled_emulation", detail);
  ok = suite_ok(v, "general", detail);
  const std::size_t edges = v.rational.stats["general"]["edge_term_prompts"];
  ok = ok && edges > 0;
  report(ok, prefix + "general_prompt_emulation", detail + fmt::format(", {} prompts end with tag 1", edges));
}

StandardNetwork random_standard(Rng& rng) {
  StandardNetwork net;
  net.p = static_cast<std::size_t>(rng.uniform_int(1, 3));
  net.r = static_cast<std::size_t>(rng.uniform_int(1, static_cast<long>(kStandardDim) - 1));
  const long L = rng.uniform_int(1, 4);
  for (long l = 0; l < L; ++l) {
    const std::size_t in = l == 0 ? net.p : net.r, out = l + 1 == L ? 1 : net.r;
    Matrix<double> W(out, in);
    Vector<double> b(out);
    for (std::size_t a = 0; a < out; ++a) {
      for (std::size_t k = 0; k < in; ++k) W(a, k) = rng.uniform(-1, 1);
      b[a] = rng.uniform(-1, 1);
    }
    net.weights.push_back(std::move(W));
    net.biases.push_back(std::move(b));
  }
  return net;
}

void standard_nets() {
  const auto t0 = std::chrono::steady_clock::now();
  const Engine<double> engine(build_theta_star<double>(kStandardDim));
  double worst = 0;
  std::size_t refused = 0;
  for (std::size_t n = 0; n < kStandardNets; ++n) {
    Rng rng(2024, n);
    const auto net = random_standard(rng);
    const auto coarse = embed_standard_nn(net, kStandardDim);
    const long rbar = static_cast<long>(std::max<std::size_t>(coarse.max_rank(), 1));
    try {
      const double S = min_scale<double>(kStandardDim, mpq_class(coarse.B), coarse.depth(), rbar,
                                         ScaleVariant::compiled);
      const auto P = compile_network(coarse, S);
      for (std::size_t k = 0; k < kStandardInputs; ++k) {
        std::vector<double> x(net.p);
        for (auto& v : x) v = rng.uniform01();
        const double got = approximate_function<double>(engine, P, x, coarse.depth(),
                                                        {ScaleVariant::compiled, Kernel::optimized});
        worst = std::max(worst, std::fabs(got - net.forward(x)));
      }
    } catch (const ScaleError&) {
      ++refused;
    }
  }
  report(refused == 0 && worst <= kFloatTolerance, "standard_net_embedding",
         fmt::format("{} nets x {} inputs, max |f_hat - f| {:.3g} (tol {:g}), {} refused, {:.1f} s", kStandardNets,
                     kStandardInputs, worst, kFloatTolerance, refused, seconds_since(t0)));
}

void orthogonal_prefix() {
  ExperimentConfig c;
  c.probes = kPrefixProbes;
  const auto res = cmd_corrupt(c, "B");
  const auto& b = res.stats["B"];
  const bool all_zero = b["all_zero"];
  const double lo = b["error_min"], hi = b["error_max"];
  report(all_zero && lo == 1.0 && hi == 1.0, "orthogonal_prefix_annihilation",
         fmt::format("{} prefixes x {} probes, f_hat == 0 everywhere: {}, error range [{}, {}]",
                     b["prefixes"].get<std::size_t>(), kPrefixProbes, all_zero, lo, hi));
}

void poisson_corruption() {
  ExperimentConfig c;
  c.backend = Backend::floating;
  c.lambda = kPoissonLambda;
  c.samples = kPoissonSamples;
  const auto res = cmd_corrupt(c, "A");
  const auto& a = res.stats["A"];
  const double mean = a["mean_error"], control = a["control_max_error"];
  const std::size_t mismatches = a["oracle_mismatches"];
  report(mean >= kPoissonMeanFloor && control <= kFloatTolerance && mismatches == 0, "poisson_corruption",
         fmt::format("mean |f_hat - 1| {:.4f} >= {} over {} samples (K=2 drawn {} times), control max {:.3g}, "
                     "{} oracle mismatches",
                     mean, kPoissonMeanFloor, kPoissonSamples, a["k2_count"].get<std::size_t>(), control, mismatches));
}

void diversity_rank() {
  ExperimentConfig c;
  c.diversity_d = kDiversityDim;
  const auto res = cmd_diversity(c);
  bool ok = res.exit_code == 0;
  std::string ranks;
  for (const auto& row : res.stats["rows"]) {
    const std::size_t r = row["r"], m = row["max_rank"];
    ok = ok && row["rank_ok"].get<bool>() && m <= r;
    ranks += fmt::format("{}{}:{}", ranks.empty() ? "" : " ", r, m);
  }
  // independent spot check of the singular value gap on restricted random prompts
  std::size_t checked = 0;
  for (std::size_t t = 0; t < 200; ++t) {
    Rng rng(77, t);
    const std::size_t r = static_cast<std::size_t>(rng.uniform_int(1, static_cast<long>(kDiversityDim)));
    const long L = rng.uniform_int(1, 3), T = rng.uniform_int(1, 16);
    Prompt<double> P;
    P.d = kDiversityDim;
    P.L = L;
    P.S = 1 << 20;
    for (long j = 1; j <= T; ++j) {
      Vector<double> u(kDiversityDim, 0.0);
      const auto x = rng.dyadic_ball(r, 16);
      std::copy(x.begin(), x.end(), u.begin());
      P.tokens.push_back(make_prompt_token<double>(u, rng.uniform_int(1, 2 * L), j, P.S));
    }
    ok = ok && restrict_diversity_check(P, r);
    for (std::size_t i : {1u, 2u})
      for (const auto& W : extract_virtual_weights(P, L, i)) {
        const auto s = singular_values(W);
        ++checked;
        if (s[0] > 0)
          for (std::size_t k = r; k < s.size(); ++k) ok = ok && s[k] <= kRankTolerance * s[0];
      }
  }
  report(ok, "diversity_rank",
         fmt::format("d={} r:max_rank {}; {} extracted matrices with sigma_(r+1) <= {:g} sigma_1", kDiversityDim,
                     ranks, checked, kRankTolerance));
}

void agents() {
  ExperimentConfig c;
  c.samples = kAgentPairs;
  const auto q = cmd_agents(c);
  c.backend = Backend::floating;
  const auto f = cmd_agents(c);
  const std::size_t qi = q.stats["identical"], fe = f.stats["equal"], fi = f.stats["identical"];
  const std::size_t qc = q.stats["capacity_detected"], fc = f.stats["capacity_detected"];
  const double fmax = f.stats["max_diff"];
  report(qi == kAgentPairs && qc == c.capacity_failures, "multi_agent_equivalence_rational",
         fmt::format("{}/{} identical, {}/{} under-capacity plans rejected", qi, kAgentPairs, qc,
                     c.capacity_failures));
  report(fe == kAgentPairs && fc == c.capacity_failures, "multi_agent_equivalence_floating",
         fmt::format("{}/{} within {:g} ({} bit-identical), max diff {:.3g}, {}/{} under-capacity plans rejected", fe,
                     kAgentPairs, kAgentFloatTolerance, fi, fmax, fc, c.capacity_failures));
}

void sweep() {
  ExperimentConfig c;
  c.backend = Backend::floating;
  c.target = "x2";
  c.knots = {4, 8, 16, 32};
  const auto res = cmd_sweep_length(c);
  bool ok = true;
  double prev = INFINITY, max_gap = 0;
  std::string errs;
  for (const auto& row : res.stats["rows"]) {
    const double e = row["sup_error"], g = row["gap"];
    ok = ok && e < prev;
    prev = e;
    max_gap = std::max(max_gap, g);
    errs += fmt::format("{}{}:{:.4g}", errs.empty() ? "" : " ", row["r"].get<std::size_t>(), e);
  }
  const double slope = res.stats.value("loglog_slope", 0.0);
  ok = ok && slope >= kSlopeLow && slope <= kSlopeHigh && max_gap <= kEmulationGap;
  report(ok, "approximation_trend",
         fmt::format("sup error {}; slope {:.4f} in [{}, {}]; max |emulated - oracle| {:.3g}", errs, slope, kSlopeLow,
                     kSlopeHigh, max_gap));
}

void budget() {
  bool ok = true;
  std::size_t worst_ratio_d = 0;
  double worst_ratio = 0, worst_entry = 0;
  std::size_t heads = 0, width_slack = SIZE_MAX;
  for (std::size_t d = 1; d <= 64; ++d) {
    const auto star = build_theta_star<double>(d);
    const auto hash = build_theta_hash<double>(d);
    ok = ok && star.layers.size() == 7 && hash.layers.size() == 8;
    ok = ok && star.max_heads() <= 8 && star.max_ffn_width() <= 12 * d + 16;
    ok = ok && star.nonzeros() <= kNonzerosPerDim * d && star.max_abs_entry() <= kMaxEntry;
    for (const auto& l : star.layers) ok = ok && l.ff.activation == Activation::relu;
    ok = ok && hash.layers[0].ff.activation == Activation::euaf;
    for (std::size_t l = 1; l < hash.layers.size(); ++l) ok = ok && hash.layers[l].ff.activation == Activation::relu;
    const double ratio = static_cast<double>(star.nonzeros()) / static_cast<double>(d);
    if (ratio > worst_ratio) worst_ratio = ratio, worst_ratio_d = d;
    worst_entry = std::max(worst_entry, star.max_abs_entry());
    heads = std::max(heads, star.max_heads());
    width_slack = std::min(width_slack, 12 * d + 16 - star.max_ffn_width());
  }
  report(ok, "budget_regression",
         fmt::format("d=1..64: 7 and 8 layers, euaf only in layer 1 of the eight; max heads {}; FFN width slack >= {}; "
                     "nnz/d <= {:.0f} (d={}) <= {}; max entry {} <= {}",
                     heads, width_slack, worst_ratio, worst_ratio_d, kNonzerosPerDim, worst_entry, kMaxEntry));
}

}  // namespace

int main() {
  try {
    compiled_and_general(run_verify(Activation::relu), "");
    const auto euaf = run_verify(Activation::euaf);
    std::string a, b;
    const bool ok_c = suite_ok(euaf, "compiled", a), ok_g = suite_ok(euaf, "general", b);
    report(ok_c && ok_g, "euaf_variant", "compiled: " + a + "; general: " + b);
    standard_nets();
    orthogonal_prefix();
    poisson_corruption();
    diversity_rank();
    agents();
    sweep();
    budget();
  } catch (const std::exception& e) {
    std::printf("[FAIL] acceptance aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
