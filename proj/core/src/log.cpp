#include "log.hpp"

#include "xmodal/log.hpp"

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <string>

namespace xmodal {

namespace detail {

spdlog::logger& log() {
  static const std::shared_ptr<spdlog::logger> logger = [] {
    auto l = std::make_shared<spdlog::logger>("xmodal", std::make_shared<spdlog::sinks::stderr_sink_mt>());
    l->set_pattern("[%H:%M:%S.%e] [%l] %v");
    const char* env = std::getenv("XMODAL_LOG");
    l->set_level(spdlog::level::from_str(env ? env : "warn"));
    return l;
  }();
  return *logger;
}

}  // namespace detail

bool set_log_level(std::string_view level) {
  const std::string name(level);
  const auto parsed = spdlog::level::from_str(name);
  // from_str maps unknown names to "off"; only accept a real "off".
  if (parsed == spdlog::level::off && name != "off") return false;
  detail::log().set_level(parsed);
  return true;
}

void configure_logging_from_env(std::string_view fallback) {
  const char* env = std::getenv("XMODAL_LOG");
  if (!(env && set_log_level(env))) set_log_level(fallback);
}

}  // namespace xmodal
