#include "vlgp/logging.hpp"

#include <cstdlib>
#include <mutex>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "vlgp/common.hpp"

#ifndef VLGP_VERSION_STRING
#define VLGP_VERSION_STRING "0.1.0"
#endif

namespace vlgp {

const char* version_string() { return VLGP_VERSION_STRING; }

void init_logging() {
  static std::once_flag once;
  std::call_once(once, [] {
    auto logger = spdlog::stderr_color_mt("vlgp");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
    spdlog::level::level_enum level = spdlog::level::warn;
    if (const char* env = std::getenv(kLogEnvVar)) {
      const auto parsed = spdlog::level::from_str(env);
      // from_str maps unknown names to off; only accept it when asked for.
      if (parsed != spdlog::level::off || std::string(env) == "off") level = parsed;
    }
    spdlog::set_level(level);
  });
}

}  // namespace vlgp
