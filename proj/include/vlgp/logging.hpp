#ifndef VLGP_LOGGING_HPP
#define VLGP_LOGGING_HPP

namespace vlgp {

/// Log level from this environment variable: trace, debug, info, warn
/// (default), error, critical or off. Messages go to stderr.
inline constexpr const char* kLogEnvVar = "VLGP_LOG";

/// Installs the stderr logger once per process.
void init_logging();

}  // namespace vlgp

#endif  // VLGP_LOGGING_HPP
