#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "pilotgrid/batch_job.hpp"
#include "pilotgrid/platform.hpp"
#include "pilotgrid/task_model.hpp"
#include "pilotgrid/task_store.hpp"

namespace pilotgrid {

/// One whole node in serial-mode packing units; divisible by every packing
/// count from 1 to 16.
inline constexpr int kNodeUnits = 720720;

inline int packing_units(int node_packing_count) { return kNodeUnits / node_packing_count; }

struct Assignment {
  Uuid task;
  std::vector<std::string> nodes;
  int slots_per_node = 1;  // serial: packing units taken on the node

  friend bool operator==(const Assignment&, const Assignment&) = default;
};

struct PlanOptions {
  /// Cycles each task has already waited; drives the aging guard.
  const std::unordered_map<Uuid, int>* waited_cycles = nullptr;
  int aging_cycles = 5;
};

/// First-fit descending. `idle` capacity_slots are free packing units in
/// serial mode and 1 (free) in per-task-launch mode.
std::vector<Assignment> plan_assignments(std::span<const Task> runnable, const NodeSet& idle,
                                         JobMode mode, const PlanOptions& options = {});

struct ExitOutcome {
  enum class Kind { Exited, Signalled, Timeout, Killed };
  Kind kind = Kind::Exited;
  int code = 0;
  int signal = 0;
};

struct ExitRecord {
  TaskState state;
  std::string message;
};

/// State recorded when a RUNNING task's process ends.
ExitRecord handle_exit(const Task& task, const ExitOutcome& exit, std::string_view stderr_text);

/// "<project>/data/<workflow>/<name>_<id8>"
std::filesystem::path task_work_dir(const std::filesystem::path& project, const Task& task);

/// Lease owner string of a launcher: "host:pid:nonce".
std::string make_owner_id();
/// True when `owner` names a process on this host that no longer exists.
bool owner_is_dead(const std::string& owner);

struct LauncherOptions {
  JobMode mode = JobMode::Serial;
  std::optional<Uuid> batch_tag;
  std::optional<std::string> wf_filter;
  std::filesystem::path project_dir;
  std::string launch_template = "local";
  std::string owner;  // empty: make_owner_id()
  double cycle_seconds = 1.0;
  double tick_seconds = 0.02;
  double lease_seconds = 120.0;
  double kill_grace_seconds = 10.0;
  int transition_workers = 4;
  int aging_cycles = 5;
  Environment base_env;  // empty: current environment
  const std::atomic<bool>* stop = nullptr;
};

struct LaunchSummary {
  int dispatched = 0;
  int run_done = 0;
  int run_error = 0;
  int timed_out = 0;
  int killed = 0;
  std::string reason;  // "idle", "walltime", "signal"
};

/// The pilot executor for one allocation.
class Launcher {
 public:
  Launcher(TaskStore& store, NodeSet nodes, LauncherOptions options);
  ~Launcher();
  Launcher(const Launcher&) = delete;
  Launcher& operator=(const Launcher&) = delete;

  LaunchSummary run();
  const std::string& owner() const;
  std::filesystem::path dispatch_log() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Reads the dispatch log written by a launcher.
struct DispatchEvent {
  enum class Kind { Start, End };
  Kind kind = Kind::Start;
  Uuid task;
  std::vector<std::string> nodes;
  int units = 0;
  Timestamp at;
  int attempt = 0;
};
std::vector<DispatchEvent> read_dispatch_log(const std::filesystem::path& file);

}  // namespace pilotgrid
