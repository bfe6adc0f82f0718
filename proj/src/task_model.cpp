#include "pilotgrid/task_model.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <sstream>

#include "pilotgrid/error.hpp"

namespace pilotgrid {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::IllegalTransition: return "IllegalTransition";
    case ErrorCode::TimestampRegression: return "TimestampRegression";
    case ErrorCode::NotNew: return "NotNew";
    case ErrorCode::InvalidField: return "InvalidField";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::UnknownApplication: return "UnknownApplication";
    case ErrorCode::DuplicateApp: return "DuplicateApp";
    case ErrorCode::UnknownId: return "UnknownId";
    case ErrorCode::AmbiguousPrefix: return "AmbiguousPrefix";
    case ErrorCode::CycleDetected: return "CycleDetected";
    case ErrorCode::ChildAlreadyStarted: return "ChildAlreadyStarted";
    case ErrorCode::BasenameCollision: return "BasenameCollision";
    case ErrorCode::AlreadyTerminal: return "AlreadyTerminal";
    case ErrorCode::MissingEnvironment: return "MissingEnvironment";
    case ErrorCode::SpawnFailure: return "SpawnFailure";
    case ErrorCode::UnknownTemplate: return "UnknownTemplate";
    case ErrorCode::UnboundPlaceholder: return "UnboundPlaceholder";
    case ErrorCode::SubmitFailure: return "SubmitFailure";
    case ErrorCode::CorruptHistory: return "CorruptHistory";
    case ErrorCode::AlreadyExists: return "AlreadyExists";
    case ErrorCode::StoreUnreachable: return "StoreUnreachable";
    case ErrorCode::InvalidPolicy: return "InvalidPolicy";
    case ErrorCode::ServiceLocked: return "ServiceLocked";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

std::string_view to_string(TaskState s) {
  switch (s) {
    case TaskState::CREATED: return "CREATED";
    case TaskState::AWAITING_PARENTS: return "AWAITING_PARENTS";
    case TaskState::READY: return "READY";
    case TaskState::STAGED_IN: return "STAGED_IN";
    case TaskState::PREPROCESSED: return "PREPROCESSED";
    case TaskState::RUNNING: return "RUNNING";
    case TaskState::RUN_DONE: return "RUN_DONE";
    case TaskState::RUN_ERROR: return "RUN_ERROR";
    case TaskState::RUN_TIMEOUT: return "RUN_TIMEOUT";
    case TaskState::POSTPROCESSED: return "POSTPROCESSED";
    case TaskState::STAGED_OUT: return "STAGED_OUT";
    case TaskState::JOB_FINISHED: return "JOB_FINISHED";
    case TaskState::RESTART_READY: return "RESTART_READY";
    case TaskState::FAILED: return "FAILED";
    case TaskState::USER_KILLED: return "USER_KILLED";
  }
  return "UNKNOWN";
}

std::optional<TaskState> parse_state(std::string_view text) {
  for (auto s : kAllStates) {
    if (to_string(s) == text) return s;
  }
  return std::nullopt;
}

bool is_terminal(TaskState s) {
  return s == TaskState::JOB_FINISHED || s == TaskState::FAILED || s == TaskState::USER_KILLED;
}

namespace {

using enum TaskState;

// Every non-terminal state can also be killed.
constexpr std::array kFromCreated{AWAITING_PARENTS, READY, USER_KILLED};
constexpr std::array kFromAwaiting{READY, FAILED, USER_KILLED};
// READY -> AWAITING_PARENTS re-classifies a task that gains a parent.
constexpr std::array kFromReady{STAGED_IN, AWAITING_PARENTS, FAILED, USER_KILLED};
constexpr std::array kFromStagedIn{PREPROCESSED, FAILED, USER_KILLED};
constexpr std::array kFromPreprocessed{RUNNING, USER_KILLED};
constexpr std::array kFromRunning{RUN_DONE, RUN_ERROR, RUN_TIMEOUT, USER_KILLED};
constexpr std::array kFromRunDone{POSTPROCESSED, FAILED, USER_KILLED};
constexpr std::array kFromRunError{RESTART_READY, FAILED, USER_KILLED};
constexpr std::array kFromRunTimeout{RESTART_READY, FAILED, USER_KILLED};
constexpr std::array kFromPostprocessed{STAGED_OUT, FAILED, USER_KILLED};
constexpr std::array kFromStagedOut{JOB_FINISHED, USER_KILLED};
constexpr std::array kFromRestartReady{STAGED_IN, FAILED, USER_KILLED};
constexpr std::array kFromFailed{RESTART_READY};

}  // namespace

std::span<const TaskState> successors(TaskState s) {
  switch (s) {
    case CREATED: return kFromCreated;
    case AWAITING_PARENTS: return kFromAwaiting;
    case READY: return kFromReady;
    case STAGED_IN: return kFromStagedIn;
    case PREPROCESSED: return kFromPreprocessed;
    case RUNNING: return kFromRunning;
    case RUN_DONE: return kFromRunDone;
    case RUN_ERROR: return kFromRunError;
    case RUN_TIMEOUT: return kFromRunTimeout;
    case POSTPROCESSED: return kFromPostprocessed;
    case STAGED_OUT: return kFromStagedOut;
    case RESTART_READY: return kFromRestartReady;
    case FAILED: return kFromFailed;
    case JOB_FINISHED:
    case USER_KILLED: return {};
  }
  return {};
}

bool validate_transition(TaskState from, TaskState to) {
  const auto next = successors(from);
  return std::find(next.begin(), next.end(), to) != next.end();
}

std::string tail_bytes(std::string_view text, std::size_t limit) {
  if (text.size() <= limit) return std::string(text);
  return std::string(text.substr(text.size() - limit));
}

std::string ErrorPolicy::str() const {
  switch (kind) {
    case Kind::Fail: return "fail";
    case Kind::Retry: return "retry:" + std::to_string(max_attempts);
    case Kind::Handler: return "handler";
  }
  return "fail";
}

ErrorPolicy ErrorPolicy::parse(std::string_view text) {
  if (text == "fail") return fail();
  if (text == "handler") return handler();
  if (text.starts_with("retry")) {
    auto rest = text.substr(5);
    int n = 0;
    if (!rest.empty() && (rest.front() == ':' || rest.front() == '=')) {
      rest.remove_prefix(1);
      auto [ptr, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), n);
      if (ec == std::errc{} && ptr == rest.data() + rest.size() && n > 0) return retry(n);
    }
  }
  throw Error(ErrorCode::InvalidField,
              "error policy must be fail, handler or retry:N (N > 0), got '" + std::string(text) +
                  "'");
}

void AppDefinition::validate() const {
  if (name.empty()) throw Error(ErrorCode::InvalidField, "application name is empty");
  if (executable.empty()) {
    throw Error(ErrorCode::InvalidField, "application '" + name + "' has no executable", name);
  }
  if (error_policy.kind == ErrorPolicy::Kind::Retry && error_policy.max_attempts < 1) {
    throw Error(ErrorCode::InvalidField, "retry policy needs max_attempts >= 1", name);
  }
}

void TaskSpec::validate() const {
  auto invalid = [](const std::string& what) { throw Error(ErrorCode::InvalidField, what); };
  if (name.empty()) invalid("task name is empty");
  if (application.empty()) invalid("task '" + name + "' has no application");
  if (num_nodes < 1) invalid("num_nodes must be positive");
  if (ranks_per_node < 1) invalid("ranks_per_node must be positive");
  if (node_packing_count < 1) invalid("node_packing_count must be positive");
  if (wall_time_minutes < 0) invalid("wall_time_minutes must be non-negative");
  if (node_packing_count > 1 && (num_nodes > 1 || ranks_per_node > 1)) {
    invalid("node_packing_count > 1 requires num_nodes = 1 and ranks_per_node = 1");
  }
}

int Task::attempts() const {
  return static_cast<int>(std::count_if(state_history.begin(), state_history.end(),
                                        [](const StateEvent& e) { return e.state == RUNNING; }));
}

std::vector<std::string> Task::input_patterns() const {
  std::vector<std::string> out;
  std::istringstream is(input_files);
  for (std::string p; is >> p;) out.push_back(p);
  return out;
}

Task new_task(const TaskSpec& spec, Timestamp at, std::optional<Uuid> id) {
  spec.validate();
  Task t;
  t.id = id ? *id : Uuid::random();
  t.name = spec.name;
  t.workflow = spec.workflow;
  t.application = spec.application;
  t.args = spec.args;
  t.environment = spec.environment;
  t.num_nodes = spec.num_nodes;
  t.ranks_per_node = spec.ranks_per_node;
  t.node_packing_count = spec.node_packing_count;
  t.wall_time_minutes = spec.wall_time_minutes;
  t.input_files = spec.input_files;
  t.stage_in_sources = spec.stage_in_sources;
  t.stage_out_patterns = spec.stage_out_patterns;
  t.stage_out_dest = spec.stage_out_dest;
  t.state = CREATED;
  t.state_history.push_back({at, CREATED, "task created"});
  return t;
}

Task advance(const Task& task, TaskState to, std::string message, Timestamp at) {
  if (!validate_transition(task.state, to)) {
    throw Error(ErrorCode::IllegalTransition,
                std::string(to_string(task.state)) + " -> " + std::string(to_string(to)) +
                    " for task " + task.id.str(),
                task.id.str());
  }
  if (!task.state_history.empty() && at < task.state_history.back().at) {
    throw Error(ErrorCode::TimestampRegression,
                "event at " + format_iso8601(at) + " precedes " +
                    format_iso8601(task.state_history.back().at) + " for task " + task.id.str(),
                task.id.str());
  }
  Task next = task;
  next.state = to;
  next.state_history.push_back({at, to, std::move(message)});
  return next;
}

TaskState classify_new(const Task& task, std::size_t unfinished_parent_count) {
  if (task.state != CREATED) {
    throw Error(ErrorCode::NotNew,
                "task " + task.id.str() + " is " + std::string(to_string(task.state)),
                task.id.str());
  }
  return unfinished_parent_count == 0 ? READY : AWAITING_PARENTS;
}

std::optional<TaskState> resolve_error_policy(const Task& task, const ErrorPolicy& policy) {
  const bool timeout = task.state == RUN_TIMEOUT;
  switch (policy.kind) {
    case ErrorPolicy::Kind::Fail:
      return timeout ? RESTART_READY : FAILED;
    case ErrorPolicy::Kind::Retry:
      return task.attempts() < policy.max_attempts ? RESTART_READY : FAILED;
    case ErrorPolicy::Kind::Handler:
      return std::nullopt;
  }
  return FAILED;
}

namespace {

std::string_view rstrip(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace

std::string exit_message(int exit_code, std::string_view stderr_text) {
  stderr_text = rstrip(stderr_text);
  std::string msg = "exit code " + std::to_string(exit_code);
  if (!stderr_text.empty()) msg += "; stderr tail: " + tail_bytes(stderr_text);
  return msg;
}

std::string signal_message(int signal, std::string_view stderr_text) {
  stderr_text = rstrip(stderr_text);
  std::string msg = "terminated by signal " + std::to_string(signal);
  if (!stderr_text.empty()) msg += "; stderr tail: " + tail_bytes(stderr_text);
  return msg;
}

bool history_is_consistent(std::span<const StateEvent> history) {
  if (history.empty() || history.front().state != CREATED) return false;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (!validate_transition(history[i - 1].state, history[i].state)) return false;
    if (history[i].at < history[i - 1].at) return false;
  }
  return true;
}

}  // namespace pilotgrid
