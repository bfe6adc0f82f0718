#pragma once

#include <sys/types.h>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace pilotgrid {

using Environment = std::map<std::string, std::string>;

struct ExitStatus {
  enum class Kind { Exited, Signalled };
  Kind kind = Kind::Exited;
  int code = 0;    // Exited
  int signal = 0;  // Signalled

  bool success() const { return kind == Kind::Exited && code == 0; }
};

struct ProcessSpec {
  std::vector<std::string> argv;  // argv[0] without '/' is looked up on PATH
  std::filesystem::path cwd;      // empty: inherit
  Environment env;                // complete environment of the child
  std::filesystem::path stdout_path;  // empty: /dev/null
  std::filesystem::path stderr_path;  // empty: /dev/null
  bool append_output = false;
  /// SIGKILL the child when the spawning thread exits (Linux only).
  bool die_with_parent = false;
};

/// A child process leader of its own process group. Signals go to the whole
/// group. Destroying a still-running Process kills and reaps it.
class Process {
 public:
  /// Throws Error(SpawnFailure) when fork or exec fails.
  static Process spawn(const ProcessSpec& spec);

  Process(Process&& other) noexcept;
  Process& operator=(Process&& other) noexcept;
  Process(const Process&) = delete;
  Process& operator=(const Process&) = delete;
  ~Process();

  pid_t pid() const { return pid_; }
  /// Non-blocking; returns the status once the child has exited.
  std::optional<ExitStatus> poll();
  ExitStatus wait();
  void signal(int sig);
  bool finished() const { return status_.has_value(); }
  const std::optional<ExitStatus>& status() const { return status_; }

 private:
  explicit Process(pid_t pid) : pid_(pid) {}
  void reset() noexcept;

  pid_t pid_ = -1;
  std::optional<ExitStatus> status_;
};

Environment current_environment();
std::optional<std::filesystem::path> find_executable(std::string_view name);
std::string shell_quote(std::string_view word);
/// Last `max_bytes` bytes of a file; empty when unreadable.
std::string read_tail(const std::filesystem::path& file, std::size_t max_bytes);
bool process_alive(pid_t pid);
std::string host_name();

}  // namespace pilotgrid
