#pragma once

#include <filesystem>
#include <string>

#include "pilotgrid/subprocess.hpp"
#include "pilotgrid/task_store.hpp"

namespace pilotgrid {

/// Variable naming the active project directory.
inline constexpr const char* kEnvDbPath = "PILOTGRID_DB_PATH";

struct Settings {
  std::string platform = "local";
  int local_nodes = 4;
  std::string launch_template = "local";
  int transition_workers = 4;
  double lease_seconds = 120.0;
  double launcher_cycle_seconds = 1.0;
  double service_cycle_seconds = 10.0;
  std::string client_dir;  // scheduler client binaries; empty: PATH
};

/// On-disk layout of one project:
///   store/pilotgrid.sqlite3  log/  data/  templates/*.tmpl
///   policy.json  settings.json  job-template.sh
class Project {
 public:
  /// Throws AlreadyExists unless `root` is absent or an empty directory.
  static Project init(const std::filesystem::path& root);
  /// Throws StoreUnreachable when `root` holds no store.
  static Project open(const std::filesystem::path& root);
  /// The project named by PILOTGRID_DB_PATH. Throws StoreUnreachable.
  static Project active(const Environment& env);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path store_path() const { return root_ / "store" / "pilotgrid.sqlite3"; }
  std::filesystem::path log_dir() const { return root_ / "log"; }
  std::filesystem::path data_dir() const { return root_ / "data"; }
  std::filesystem::path templates_dir() const { return root_ / "templates"; }
  std::filesystem::path policy_path() const { return root_ / "policy.json"; }
  std::filesystem::path settings_path() const { return root_ / "settings.json"; }
  std::filesystem::path batch_template_path() const { return root_ / "job-template.sh"; }
  std::filesystem::path scheduler_dir() const { return root_ / "log" / "scheduler"; }

  TaskStore store(TaskStore::Options options = {}) const;
  Settings settings() const;
  std::string batch_template() const;

 private:
  explicit Project(std::filesystem::path root) : root_(std::move(root)) {}
  std::filesystem::path root_;
};

}  // namespace pilotgrid
