#pragma once

#include <atomic>
#include <ostream>
#include <string>
#include <vector>

#include "pilotgrid/subprocess.hpp"

namespace pilotgrid::cli {

/// Set by the executable's signal handlers; polled by launcher and service.
extern std::atomic<bool> g_stop;

/// Runs one invocation. `args` excludes the program name. Returns 0 on
/// success, 1 on a user error and 2 on an internal error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
        const Environment& env);

}  // namespace pilotgrid::cli
