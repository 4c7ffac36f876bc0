// vlgp command-line front end. Everything goes through the C API.
#include <cstdint>
#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "vlgp/vlgp.h"

int main(int argc, char** argv) {
  CLI::App app{"Variational latent Gaussian process inference for spike trains"};
  app.set_version_flag("--version", std::string(vlgp_version()));
  app.require_subcommand(1);

  std::string config, out;
  std::uint64_t seed = 0;
  int threads = 0;
  for (const char* name : {"simulate", "fit", "infer", "lono", "evaluate"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config, "JSON configuration file")->required()->check(
        CLI::ExistingFile);
    sub->add_option("--out", out, "output directory")->required();
    sub->add_option("--seed", seed, "seed overriding the configuration");
    sub->add_option("--threads", threads, "worker threads (0: default)")
        ->check(CLI::NonNegativeNumber);
  }
  app.footer("Log verbosity: VLGP_LOG=trace|debug|info|warn|error|off (default warn).\n"
             "Exit codes: 0 success, 2 invalid input, 3 numerical failure.");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : VLGP_ERR_VALIDATION;
  }

  CLI::App* sub = app.get_subcommands().front();
  const bool has_seed = sub->count("--seed") > 0;
  const int rc = vlgp_run_command(sub->get_name().c_str(), config.c_str(), out.c_str(),
                                  has_seed ? 1 : 0, seed, threads);
  if (rc != VLGP_OK) std::fprintf(stderr, "vlgp %s: %s\n", sub->get_name().c_str(),
                                  vlgp_last_error());
  return rc;
}
