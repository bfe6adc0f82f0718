#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pilotgrid/time.hpp"
#include "pilotgrid/uuid.hpp"

namespace pilotgrid {

enum class TaskState {
  CREATED,
  AWAITING_PARENTS,
  READY,
  STAGED_IN,
  PREPROCESSED,
  RUNNING,
  RUN_DONE,
  RUN_ERROR,
  RUN_TIMEOUT,
  POSTPROCESSED,
  STAGED_OUT,
  JOB_FINISHED,
  RESTART_READY,
  FAILED,
  USER_KILLED,
};

inline constexpr std::array kAllStates{
    TaskState::CREATED,      TaskState::AWAITING_PARENTS, TaskState::READY,
    TaskState::STAGED_IN,    TaskState::PREPROCESSED,     TaskState::RUNNING,
    TaskState::RUN_DONE,     TaskState::RUN_ERROR,        TaskState::RUN_TIMEOUT,
    TaskState::POSTPROCESSED, TaskState::STAGED_OUT,      TaskState::JOB_FINISHED,
    TaskState::RESTART_READY, TaskState::FAILED,          TaskState::USER_KILLED,
};

std::string_view to_string(TaskState s);
std::optional<TaskState> parse_state(std::string_view text);

/// JOB_FINISHED, FAILED and USER_KILLED. FAILED keeps one manual exit edge
/// (FAILED -> RESTART_READY).
bool is_terminal(TaskState s);

/// Outgoing edges of the transition graph.
std::span<const TaskState> successors(TaskState s);

bool validate_transition(TaskState from, TaskState to);

/// Bytes of stderr kept in a provenance message.
inline constexpr std::size_t kMaxTailBytes = 2048;

/// Last `kMaxTailBytes` bytes of `text`.
std::string tail_bytes(std::string_view text, std::size_t limit = kMaxTailBytes);

struct StateEvent {
  Timestamp at;
  TaskState state = TaskState::CREATED;
  std::string message;

  friend bool operator==(const StateEvent&, const StateEvent&) = default;
};

struct Lease {
  std::string owner;
  Timestamp expires;
  double seconds = 120.0;
  bool renewable = true;

  bool live_at(Timestamp t) const { return expires > t; }
  friend bool operator==(const Lease&, const Lease&) = default;
};

struct ErrorPolicy {
  enum class Kind { Fail, Retry, Handler };
  Kind kind = Kind::Fail;
  int max_attempts = 1;  // Retry only

  static ErrorPolicy fail() { return {}; }
  static ErrorPolicy retry(int max_attempts) { return {Kind::Retry, max_attempts}; }
  static ErrorPolicy handler() { return {Kind::Handler, 1}; }

  /// "fail", "retry:N", "handler"
  std::string str() const;
  static ErrorPolicy parse(std::string_view text);

  friend bool operator==(const ErrorPolicy&, const ErrorPolicy&) = default;
};

struct AppDefinition {
  std::string name;
  std::string executable;
  std::optional<std::string> preprocess;
  std::optional<std::string> postprocess;
  ErrorPolicy error_policy;

  /// Throws Error(InvalidField).
  void validate() const;
  friend bool operator==(const AppDefinition&, const AppDefinition&) = default;
};

/// User-settable task fields, with the defaults applied when a field is omitted.
struct TaskSpec {
  std::string name;
  std::string workflow = "default";
  std::string application;
  std::string args;
  std::map<std::string, std::string> environment;
  int num_nodes = 1;
  int ranks_per_node = 1;
  int node_packing_count = 1;
  double wall_time_minutes = 0.0;  // 0 = unknown
  std::string input_files;         // space-delimited glob patterns
  std::vector<std::string> stage_in_sources;
  std::string stage_out_patterns;
  std::string stage_out_dest;

  /// Throws Error(InvalidField) when a field or the packing invariant is violated.
  void validate() const;
};

struct Task {
  Uuid id;
  std::string name;
  std::string workflow;
  std::string application;
  std::string args;
  std::map<std::string, std::string> environment;
  int num_nodes = 1;
  int ranks_per_node = 1;
  int node_packing_count = 1;
  double wall_time_minutes = 0.0;
  std::string input_files;
  std::vector<std::string> stage_in_sources;
  std::string stage_out_patterns;
  std::string stage_out_dest;
  TaskState state = TaskState::CREATED;
  std::vector<StateEvent> state_history;
  std::optional<Lease> lease;
  std::optional<Uuid> batch_tag;
  std::string work_dir;

  Timestamp created_at() const { return state_history.front().at; }
  Timestamp last_event_at() const { return state_history.back().at; }
  /// Times the task has been launched (RUNNING events in the history).
  int attempts() const;
  bool uses_mpi() const { return num_nodes > 1 || ranks_per_node > 1; }
  std::vector<std::string> input_patterns() const;

  friend bool operator==(const Task&, const Task&) = default;
};

/// A CREATED task with a one-event history.
Task new_task(const TaskSpec& spec, Timestamp at, std::optional<Uuid> id = std::nullopt);

/// Value-semantic transition. Throws IllegalTransition or TimestampRegression.
Task advance(const Task& task, TaskState to, std::string message, Timestamp at);

/// READY when nothing is pending, else AWAITING_PARENTS. Throws NotNew.
TaskState classify_new(const Task& task, std::size_t unfinished_parent_count);

/// Onward state for a RUN_ERROR / RUN_TIMEOUT task, or nullopt when the
/// application's handler hook has to decide.
std::optional<TaskState> resolve_error_policy(const Task& task, const ErrorPolicy& policy);

/// Provenance message for an abnormal exit.
std::string exit_message(int exit_code, std::string_view stderr_text);
std::string signal_message(int signal, std::string_view stderr_text);

/// Replays `history` through validate_transition; false on any illegal edge,
/// a non-CREATED first event, or a timestamp regression.
bool history_is_consistent(std::span<const StateEvent> history);

}  // namespace pilotgrid
