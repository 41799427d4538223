#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>

#include "pvm/experiments.hpp"

using namespace pvm;

namespace {

struct Flags {
  std::string config_path, out, backend, variant, mode = "both", target;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> samples;
};

ExperimentConfig load(const Flags& f) {
  ExperimentConfig c;
  if (!f.config_path.empty()) {
    std::ifstream in(f.config_path);
    if (!in) throw ConfigError("cannot read " + f.config_path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad config JSON: ") + e.what());
    }
    c = config_from_json(j);
  }
  try {
    if (f.seed) c.seed = *f.seed;
    if (f.samples) c.samples = *f.samples;
    if (!f.backend.empty()) c.backend = parse_backend(f.backend);
    if (!f.variant.empty()) c.variant = parse_activation(f.variant);
    if (!f.target.empty()) c.target = f.target;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.out = resolve_out_dir(f.out, c.out.empty() ? "results" : c.out);
  check_config(c);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-programmed transformer experiments"};
  app.require_subcommand(1);
  Flags f;
  auto add_common = [&f](CLI::App* sub) {
    sub->add_option("--config", f.config_path, "JSON config file");
    sub->add_option("--seed", f.seed, "64-bit seed");
    sub->add_option("--backend", f.backend, "floating or rational");
    sub->add_option("--out", f.out, "output directory (overrides PROMPTVM_OUT_DIR)");
    sub->add_option("--variant", f.variant, "relu or euaf");
    sub->add_option("--samples", f.samples, "instance count");
  };
  auto* verify = app.add_subcommand("verify", "random-instance equivalence sweep");
  auto* sweep = app.add_subcommand("sweep-length", "approximation error against prompt width");
  auto* corrupt = app.add_subcommand("corrupt", "irrelevant-token corruption");
  auto* diversity = app.add_subcommand("diversity", "rank of coordinate-restricted prompts");
  auto* agents = app.add_subcommand("agents", "multi-agent prompt concatenation");
  for (auto* s : {verify, sweep, corrupt, diversity, agents}) add_common(s);
  corrupt->add_option("--mode", f.mode, "A, B or both");
  sweep->add_option("--target", f.target, "x2 or sin");
  diversity->add_option("--target", f.target, "x2 or sin");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const ExperimentConfig c = load(f);
    CommandResult r;
    if (verify->parsed()) r = cmd_verify(c);
    else if (sweep->parsed()) r = cmd_sweep_length(c);
    else if (corrupt->parsed()) r = cmd_corrupt(c, f.mode);
    else if (diversity->parsed()) r = cmd_diversity(c);
    else r = cmd_agents(c);
    std::cout << r.stats.dump(2) << '\n';
    for (const auto& p : r.files) std::cerr << "wrote " << p << '\n';
    return r.exit_code;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ScaleError& e) {
    std::cerr << "scale error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
