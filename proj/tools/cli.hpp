#pragma once

#include <string>
#include <vector>

namespace xmodal::cli {

/// Runs one subcommand. args[0] is the program name.
/// Returns 0 on success, 1 on a domain error, 2 on a usage error.
int dispatch(const std::vector<std::string>& args);

}  // namespace xmodal::cli
