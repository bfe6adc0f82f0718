#include <csignal>
#include <iostream>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "pilotgrid/cli.hpp"

namespace {

void on_signal(int) { pilotgrid::cli::g_stop.store(true); }

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);

  auto logger = spdlog::stderr_color_mt("pilotgrid");
  spdlog::set_default_logger(logger);
  if (const char* lvl = std::getenv("PILOTGRID_LOG_LEVEL"))
    spdlog::set_level(spdlog::level::from_str(lvl));
  else
    spdlog::set_level(spdlog::level::warn);

  std::vector<std::string> args(argv + 1, argv + argc);
  return pilotgrid::cli::run(args, std::cout, std::cerr, pilotgrid::current_environment());
}
