#include "pilotgrid/subprocess.hpp"

#include <fcntl.h>
#include <sys/prctl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pilotgrid/error.hpp"

extern char** environ;

namespace pilotgrid {

namespace fs = std::filesystem;

namespace {

ExitStatus decode(int raw) {
  if (WIFSIGNALED(raw)) return {ExitStatus::Kind::Signalled, 0, WTERMSIG(raw)};
  return {ExitStatus::Kind::Exited, WEXITSTATUS(raw), 0};
}

[[noreturn]] void child_fail(int fd, int err) {
  [[maybe_unused]] auto n = ::write(fd, &err, sizeof err);
  _exit(127);
}

}  // namespace

Process Process::spawn(const ProcessSpec& spec) {
  if (spec.argv.empty()) throw Error(ErrorCode::SpawnFailure, "empty command");
  std::string program = spec.argv.front();
  if (program.find('/') == std::string::npos) {
    auto found = find_executable(program);
    if (!found) throw Error(ErrorCode::SpawnFailure, "'" + program + "' not found on PATH", program);
    program = found->string();
  }

  // Everything the child touches is prepared before fork.
  std::vector<std::string> env_strings;
  for (const auto& [k, v] : spec.env) env_strings.push_back(k + "=" + v);
  std::vector<char*> envp;
  for (auto& s : env_strings) envp.push_back(s.data());
  envp.push_back(nullptr);
  std::vector<std::string> args = spec.argv;
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  const std::string cwd = spec.cwd.string();
  const std::string out = spec.stdout_path.empty() ? "/dev/null" : spec.stdout_path.string();
  const std::string err = spec.stderr_path.empty() ? "/dev/null" : spec.stderr_path.string();
  const int out_flags = O_WRONLY | O_CREAT | (spec.append_output ? O_APPEND : O_TRUNC) | O_CLOEXEC;

  int pipefd[2];
  if (::pipe2(pipefd, O_CLOEXEC) != 0) {
    throw Error(ErrorCode::SpawnFailure, std::string("pipe: ") + std::strerror(errno));
  }
  const pid_t parent = ::getpid();
  const pid_t pid = ::fork();
  if (pid < 0) {
    ::close(pipefd[0]);
    ::close(pipefd[1]);
    throw Error(ErrorCode::SpawnFailure, std::string("fork: ") + std::strerror(errno));
  }
  if (pid == 0) {
    ::setpgid(0, 0);
    if (spec.die_with_parent) {
      ::prctl(PR_SET_PDEATHSIG, SIGKILL);
      if (::getppid() != parent) _exit(127);
    }
    sigset_t none;
    sigemptyset(&none);
    sigprocmask(SIG_SETMASK, &none, nullptr);
    ::signal(SIGTERM, SIG_DFL);
    ::signal(SIGINT, SIG_DFL);
    ::signal(SIGPIPE, SIG_DFL);
    if (!cwd.empty() && ::chdir(cwd.c_str()) != 0) child_fail(pipefd[1], errno);
    const int in_fd = ::open("/dev/null", O_RDONLY);
    const int out_fd = ::open(out.c_str(), out_flags, 0644);
    const int err_fd = out == err ? out_fd : ::open(err.c_str(), out_flags, 0644);
    if (in_fd < 0 || out_fd < 0 || err_fd < 0) child_fail(pipefd[1], errno);
    ::dup2(in_fd, 0);
    ::dup2(out_fd, 1);
    ::dup2(err_fd, 2);
    ::execve(program.c_str(), argv.data(), envp.data());
    child_fail(pipefd[1], errno);
  }
  ::setpgid(pid, pid);
  ::close(pipefd[1]);
  int child_errno = 0;
  ssize_t n;
  do {
    n = ::read(pipefd[0], &child_errno, sizeof child_errno);
  } while (n < 0 && errno == EINTR);
  ::close(pipefd[0]);
  Process proc(pid);
  if (n > 0) {
    proc.wait();
    throw Error(ErrorCode::SpawnFailure,
                "cannot start '" + program + "': " + std::strerror(child_errno), program);
  }
  return proc;
}

Process::Process(Process&& other) noexcept : pid_(other.pid_), status_(other.status_) {
  other.pid_ = -1;
}

Process& Process::operator=(Process&& other) noexcept {
  if (this != &other) {
    reset();
    pid_ = other.pid_;
    status_ = other.status_;
    other.pid_ = -1;
  }
  return *this;
}

Process::~Process() { reset(); }

void Process::reset() noexcept {
  if (pid_ > 0 && !status_) {
    ::kill(-pid_, SIGKILL);
    ::kill(pid_, SIGKILL);
    int raw = 0;
    while (::waitpid(pid_, &raw, 0) < 0 && errno == EINTR) {
    }
  }
  pid_ = -1;
  status_.reset();
}

std::optional<ExitStatus> Process::poll() {
  if (status_ || pid_ <= 0) return status_;
  int raw = 0;
  const pid_t r = ::waitpid(pid_, &raw, WNOHANG);
  if (r == pid_) status_ = decode(raw);
  return status_;
}

ExitStatus Process::wait() {
  if (status_) return *status_;
  int raw = 0;
  pid_t r;
  do {
    r = ::waitpid(pid_, &raw, 0);
  } while (r < 0 && errno == EINTR);
  status_ = r == pid_ ? decode(raw) : ExitStatus{ExitStatus::Kind::Signalled, 0, SIGKILL};
  return *status_;
}

void Process::signal(int sig) {
  if (pid_ <= 0 || status_) return;
  if (::kill(-pid_, sig) != 0) ::kill(pid_, sig);
}

Environment current_environment() {
  Environment env;
  for (char** e = environ; e && *e; ++e) {
    std::string_view kv(*e);
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos) continue;
    env.emplace(std::string(kv.substr(0, eq)), std::string(kv.substr(eq + 1)));
  }
  return env;
}

std::optional<fs::path> find_executable(std::string_view name) {
  if (name.empty()) return std::nullopt;
  if (name.find('/') != std::string_view::npos) {
    fs::path p(name);
    if (::access(p.c_str(), X_OK) == 0 && !fs::is_directory(p)) return p;
    return std::nullopt;
  }
  const char* path = std::getenv("PATH");
  std::stringstream ss(path ? path : "/usr/bin:/bin");
  for (std::string dir; std::getline(ss, dir, ':');) {
    if (dir.empty()) dir = ".";
    fs::path p = fs::path(dir) / std::string(name);
    if (::access(p.c_str(), X_OK) == 0 && !fs::is_directory(p)) return p;
  }
  return std::nullopt;
}

std::string shell_quote(std::string_view word) {
  if (!word.empty() && word.find_first_not_of("ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz"
                                              "0123456789_-+=/.,:@%") == std::string_view::npos) {
    return std::string(word);
  }
  std::string out = "'";
  for (char c : word) {
    if (c == '\'') {
      out += "'\\''";
    } else {
      out += c;
    }
  }
  return out + "'";
}

std::string read_tail(const fs::path& file, std::size_t max_bytes) {
  std::ifstream in(file, std::ios::binary | std::ios::ate);
  if (!in) return {};
  const auto size = static_cast<std::size_t>(in.tellg());
  const auto take = std::min(size, max_bytes);
  in.seekg(static_cast<std::streamoff>(size - take));
  std::string buf(take, '\0');
  in.read(buf.data(), static_cast<std::streamsize>(take));
  return buf;
}

bool process_alive(pid_t pid) {
  if (pid <= 0) return false;
  if (::kill(pid, 0) == 0) {
    // A zombie still answers kill(0); treat it as gone.
    std::ifstream stat("/proc/" + std::to_string(pid) + "/stat");
    std::string line;
    if (std::getline(stat, line)) {
      const auto close = line.rfind(')');
      if (close != std::string::npos && close + 2 < line.size() && line[close + 2] == 'Z') {
        return false;
      }
    }
    return true;
  }
  return errno == EPERM;
}

std::string host_name() {
  char buf[256] = {};
  if (::gethostname(buf, sizeof buf - 1) != 0) return "localhost";
  return buf;
}

}  // namespace pilotgrid
