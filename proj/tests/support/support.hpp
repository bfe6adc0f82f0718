#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "pilotgrid/subprocess.hpp"

namespace testsupport {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction unless
/// PILOTGRID_KEEP_TMP is set.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

/// Path of the built pilotgrid executable.
fs::path cli_binary();

/// Current environment with the CLI on PATH and the project activated.
pilotgrid::Environment project_env(const fs::path& project);

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

/// Runs the CLI to completion.
CliResult run_cli(const std::vector<std::string>& args, const pilotgrid::Environment& env);

/// Starts the CLI in the background.
pilotgrid::Process start_cli(const std::vector<std::string>& args, const pilotgrid::Environment& env,
                             const fs::path& log_stem);

/// Polls `pred` until it holds or `seconds` pass.
bool wait_until(const std::function<bool()>& pred, double seconds, double poll_seconds = 0.05);

/// Waits for `proc` up to `seconds`; kills it and returns false on timeout.
bool wait_exit(pilotgrid::Process& proc, double seconds);

void write_script(const fs::path& path, const std::string& body);
std::string slurp(const fs::path& path);

}  // namespace testsupport

#include "pilotgrid/task_model.hpp"

namespace pilotgrid {
inline void PrintTo(TaskState s, std::ostream* os) { *os << to_string(s); }
}  // namespace pilotgrid
