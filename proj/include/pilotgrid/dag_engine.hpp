#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pilotgrid/task_model.hpp"
#include "pilotgrid/task_store.hpp"

namespace pilotgrid {

using StateUpdate = std::pair<Uuid, TaskState>;

/// A file flowing along a DAG edge into the child's work directory.
struct StagedInput {
  std::filesystem::path source;
  std::string destination;  // basename inside the child's work_dir

  friend bool operator==(const StagedInput&, const StagedInput&) = default;
};

/// `*`, `?` and `[...]` on a basename; no directory recursion.
bool glob_match(std::string_view pattern, std::string_view name);

/// Files the launcher itself writes into a work directory (task stdout and
/// stderr, hook logs). Never treated as task outputs.
bool is_runtime_file(std::string_view name);

/// Files from every parent's work_dir matching any of the child's
/// input_files patterns, sorted by destination name. Runtime files and the
/// symlinks a parent received as its own inputs are skipped. Throws BasenameCollision
/// when two parents export the same filename.
std::vector<StagedInput> resolve_inputs(const Task& child, std::span<const Task> parents);

/// Symlinks each input into `work_dir`, copying when linking fails.
void materialize_inputs(std::span<const StagedInput> inputs, const std::filesystem::path& work_dir);

/// Transaction-level DAG operations, for callers composing them with other
/// store mutations. Each returns the state changes it applied.
namespace dag {

DependencyEdge add_dependency(Txn& txn, const Uuid& parent, const Uuid& child,
                              std::vector<StateUpdate>* applied = nullptr);
std::vector<StateUpdate> on_parent_terminal(Txn& txn, const Uuid& parent);
std::vector<Uuid> kill(Txn& txn, const Uuid& target, bool recursive);
Uuid spawn(Txn& txn, const TaskSpec& spec, std::span<const Uuid> parents);
std::vector<StateUpdate> refresh(Txn& txn);

}  // namespace dag

/// Dependency bookkeeping on top of a store. Stateless between calls; every
/// operation is one store transaction.
class DagEngine {
 public:
  explicit DagEngine(TaskStore& store) : store_(store) {}

  DependencyEdge add_dependency(const Uuid& parent, const Uuid& child);
  std::vector<StateUpdate> on_parent_terminal(const Uuid& parent);
  std::vector<Uuid> kill(const Uuid& target, bool recursive);
  Uuid spawn(const TaskSpec& spec, std::optional<Uuid> parent = std::nullopt);
  Uuid spawn(const TaskSpec& spec, std::span<const Uuid> parents);
  /// Classifies CREATED tasks and re-evaluates AWAITING_PARENTS ones.
  std::vector<StateUpdate> refresh();

 private:
  TaskStore& store_;
};

}  // namespace pilotgrid
