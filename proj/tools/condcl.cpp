#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "condcl/commands.hpp"

namespace {

int run(const std::string& command, const std::optional<std::string>& config_path,
        const std::optional<std::string>& out_dir, const std::optional<std::uint64_t>& seed,
        const std::optional<std::size_t>& threads, const std::vector<std::string>& sets) {
  using namespace condcl;
  RunConfig rc;
  try {
    std::map<std::string, std::string> flags;
    for (const auto& s : sets) {
      auto [key, value] = RunConfig::parse_assignment(s);
      flags[key] = value;
    }
    if (seed) {
      flags["experiment.seed"] = std::to_string(*seed);
      flags["experiment.seeds"] = "";
    }
    if (threads) flags["experiment.threads"] = std::to_string(*threads);
    rc = config_path ? RunConfig::from_file(*config_path, flags) : RunConfig::from_overrides(flags);
    if (out_dir && std::filesystem::exists(*out_dir))
      throw ConfigError("output directory '" + *out_dir + "' already exists");
  } catch (const std::exception& e) {
    std::cerr << "condcl: " << e.what() << "\n";
    return kExitUsage;
  }

  CommandOutput out;
  try {
    out = command_table().at(command)(rc);
  } catch (const ConfigError& e) {
    std::cerr << "condcl " << command << ": " << e.what() << "\n";
    return kExitUsage;
  } catch (const BandwidthError& e) {
    std::cerr << "condcl " << command << ": " << e.what() << "\n";
    return kExitUsage;
  } catch (const UnknownFamilyError& e) {
    std::cerr << "condcl " << command << ": " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "condcl " << command << ": " << e.what() << "\n";
    return kExitCheckFailed;
  }

  const std::string dir = out_dir ? *out_dir : default_run_dir(rc.seeds().front());
  try {
    commit_run_dir(dir, rc, out);
  } catch (const std::exception& e) {
    std::cerr << "condcl: " << e.what() << "\n";
    return kExitUsage;
  }
  std::cout << out.log << "results in " << dir << "\n";
  return out.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional contrastive losses: checks, experiments and training"};
  app.require_subcommand(1);

  std::optional<std::string> config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "INI configuration file");
  app.add_option("--out", out_dir, "run directory to create (must not exist)");
  app.add_option("--seed", seed, "run with this single seed");
  app.add_option("--threads", threads, "worker threads");
  app.add_option("--set", sets, "override a key: section.key=value")->take_all();

  const std::vector<std::pair<std::string, std::string>> commands{
      {"gradcheck", "finite-difference check of every loss gradient"},
      {"decompose", "verify the alignment + uniformity decomposition on random batches"},
      {"converge", "Monte Carlo convergence of the batch loss to its limit"},
      {"train", "contrastive pre-training; writes checkpoint.ccl and history.csv"},
      {"probe", "linear probe of a trained and a random-init encoder"},
      {"compare", "train and probe every loss variant across seeds"},
      {"fixture", "write the binding parity fixture"},
  };
  std::string chosen;
  for (const auto& [name, help] : commands)
    app.add_subcommand(name, help)->fallthrough()->callback([&chosen, name = name] { chosen = name; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : condcl::kExitUsage;
  }
  return run(chosen, config_path, out_dir, seed, threads, sets);
}
