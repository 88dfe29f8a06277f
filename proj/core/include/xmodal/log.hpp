#pragma once

#include <string_view>

namespace xmodal {

/// Sets the library's stderr log level: "trace", "debug", "info", "warn",
/// "error" or "off". Unknown names leave the level unchanged and return false.
bool set_log_level(std::string_view level);

/// Applies XMODAL_LOG if set, else `fallback`.
void configure_logging_from_env(std::string_view fallback = "warn");

}  // namespace xmodal
