#ifndef VLGP_COMMANDS_HPP
#define VLGP_COMMANDS_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

namespace vlgp {

struct CommandOptions {
  std::filesystem::path config;  // JSON config file
  std::filesystem::path out;     // output directory
  std::optional<std::uint64_t> seed;  // overrides the config's seed
  int threads = 0;                    // 0: OpenMP default
};

/// Config: {"simulate": SimSpec}. Writes a dataset directory.
void cmd_simulate(const CommandOptions& opts);
/// Config: {"dataset": dir, "fit": FitConfig, "train_trials": [..]}.
/// Writes a fit artifact plus ELBO and rank-correlation traces.
void cmd_fit(const CommandOptions& opts);
/// Config: {"dataset", "artifact", "infer": {"mask": [..], "trials": [..], ...}}.
void cmd_infer(const CommandOptions& opts);
/// Config: {"dataset", "artifact", "lono": {"test_trials": [..], ...}}.
void cmd_lono(const CommandOptions& opts);
/// Config: {"dataset", "artifact", "evaluate": {...}}. Writes metrics.json
/// and plot-ready CSVs.
void cmd_evaluate(const CommandOptions& opts);

/// Dispatch by name (simulate, fit, infer, lono, evaluate).
void run_command(const std::string& name, const CommandOptions& opts);

}  // namespace vlgp

#endif  // VLGP_COMMANDS_HPP
