#include "support.hpp"

#include <signal.h>
#include <sys/stat.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "pilotgrid/project.hpp"

namespace testsupport {

TempDir::TempDir() {
  std::random_device rd;
  static std::atomic<int> counter{0};
  for (;;) {
    auto p = fs::temp_directory_path() /
             ("pilotgrid-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++) +
              "-" + std::to_string(rd() % 100000));
    if (fs::create_directory(p)) {
      path_ = p;
      return;
    }
  }
}

TempDir::~TempDir() {
  if (std::getenv("PILOTGRID_KEEP_TMP")) return;
  std::error_code ec;
  fs::remove_all(path_, ec);
}

fs::path cli_binary() { return PILOTGRID_BIN; }

pilotgrid::Environment project_env(const fs::path& project) {
  auto env = pilotgrid::current_environment();
  env["PATH"] = cli_binary().parent_path().string() + ":" + env["PATH"];
  env[pilotgrid::kEnvDbPath] = project.string();
  return env;
}

CliResult run_cli(const std::vector<std::string>& args, const pilotgrid::Environment& env) {
  TempDir tmp;
  pilotgrid::ProcessSpec spec;
  spec.argv = {cli_binary().string()};
  spec.argv.insert(spec.argv.end(), args.begin(), args.end());
  spec.env = env;
  spec.stdout_path = tmp / "out";
  spec.stderr_path = tmp / "err";
  auto proc = pilotgrid::Process::spawn(spec);
  auto st = proc.wait();
  CliResult r;
  r.code = st.kind == pilotgrid::ExitStatus::Kind::Exited ? st.code : 128 + st.signal;
  r.out = slurp(tmp / "out");
  r.err = slurp(tmp / "err");
  return r;
}

pilotgrid::Process start_cli(const std::vector<std::string>& args, const pilotgrid::Environment& env,
                             const fs::path& log_stem) {
  pilotgrid::ProcessSpec spec;
  spec.argv = {cli_binary().string()};
  spec.argv.insert(spec.argv.end(), args.begin(), args.end());
  spec.env = env;
  spec.stdout_path = log_stem.string() + ".out";
  spec.stderr_path = log_stem.string() + ".err";
  return pilotgrid::Process::spawn(spec);
}

bool wait_until(const std::function<bool()>& pred, double seconds, double poll_seconds) {
  const auto deadline = std::chrono::steady_clock::now() +
                        std::chrono::microseconds(static_cast<long>(seconds * 1e6));
  for (;;) {
    if (pred()) return true;
    if (std::chrono::steady_clock::now() > deadline) return false;
    std::this_thread::sleep_for(std::chrono::microseconds(static_cast<long>(poll_seconds * 1e6)));
  }
}

bool wait_exit(pilotgrid::Process& proc, double seconds) {
  if (wait_until([&] { return proc.poll().has_value(); }, seconds)) return true;
  proc.signal(SIGKILL);
  proc.wait();
  return false;
}

void write_script(const fs::path& path, const std::string& body) {
  std::ofstream out(path);
  out << "#!/bin/sh\n" << body;
  out.close();
  ::chmod(path.c_str(), 0755);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace testsupport
