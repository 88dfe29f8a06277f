#pragma once

#include <spdlog/logger.h>

#include <memory>

namespace xmodal::detail {

/// The library logger; always writes to stderr.
spdlog::logger& log();

}  // namespace xmodal::detail
