#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pilotgrid/batch_job.hpp"
#include "pilotgrid/task_model.hpp"
#include "pilotgrid/time.hpp"
#include "pilotgrid/uuid.hpp"

namespace pilotgrid {

/// Conjunction of optional clauses; the default-constructed filter matches
/// every task.
struct TaskFilter {
  std::vector<TaskState> states;
  std::optional<std::string> name_contains;
  std::optional<std::string> workflow;
  std::optional<std::string> application;
  std::optional<int> min_nodes;
  std::optional<int> max_nodes;
  std::optional<int> max_ranks_per_node;
  std::optional<Uuid> batch_tag;
  bool untagged = false;                  // batch_tag is null
  std::optional<std::string> lock_owner;  // live lease held by this owner
  bool unlocked = false;                  // no live lease
  std::vector<Uuid> ids;
};

struct StateChange {
  Uuid id;
  TaskState to;
  std::string message;
  Timestamp at;
  std::optional<std::string> work_dir;
};

struct DependencyEdge {
  Uuid parent;
  Uuid child;
  friend bool operator==(const DependencyEdge&, const DependencyEdge&) = default;
};

/// Low-level access inside one store transaction. Obtained from
/// TaskStore::write / TaskStore::read and valid only for that call.
class Txn {
 public:
  Timestamp now() const { return now_; }

  std::optional<Task> get(const Uuid& id);
  Task require(const Uuid& id);  // throws UnknownId
  std::vector<Task> query(const TaskFilter& filter, std::optional<std::size_t> limit = {});
  std::size_t count(const TaskFilter& filter);
  std::optional<AppDefinition> find_app(std::string_view name);

  /// Validates CREATED state, duplicate id and the application reference.
  void insert(const Task& task);
  /// Checks the edge against the stored state and appends the event. Tasks
  /// reaching a terminal state lose their lease.
  Task apply(const StateChange& change);
  void set_batch_tag(const Uuid& id, std::optional<Uuid> tag);
  void set_lease(const Uuid& id, std::optional<Lease> lease);
  void remove(const Uuid& id);

  void add_edge(const DependencyEdge& edge);
  bool has_edge(const DependencyEdge& edge);
  std::vector<Uuid> parents(const Uuid& child);
  std::vector<Uuid> children(const Uuid& parent);
  std::vector<DependencyEdge> edges();

  void put_batch_job(const BatchJobSpec& job);
  std::optional<BatchJobSpec> get_batch_job(const Uuid& id);
  std::vector<BatchJobSpec> batch_jobs(bool live_only);

  /// Named advisory lock with expiry (e.g. the single service instance).
  bool try_lock(const std::string& name, const std::string& owner, double ttl_seconds,
                const std::function<bool(const std::string&)>& owner_dead = {});
  void unlock(const std::string& name, const std::string& owner);

 private:
  friend class TaskStore;
  struct Connection;
  Txn(Connection& conn, Timestamp now) : conn_(conn), now_(now) {}
  Connection& conn_;
  Timestamp now_;
};

struct StoreOptions {
  Clock clock = system_clock();
  double busy_timeout_seconds = 60.0;
};

/// Persistent, multi-process task store. Each instance owns one database
/// connection; share a store across threads only with external
/// serialization.
class TaskStore {
 public:
  using Options = StoreOptions;

  /// Creates the database file (and schema) if absent.
  static TaskStore create(const std::filesystem::path& db_file, Options options = {});
  /// Throws StoreUnreachable when the file does not exist or cannot be opened.
  static TaskStore open(const std::filesystem::path& db_file, Options options = {});

  TaskStore(TaskStore&&) noexcept;
  TaskStore& operator=(TaskStore&&) noexcept;
  ~TaskStore();

  const std::filesystem::path& path() const;
  Timestamp now() const;

  void register_app(const AppDefinition& app);  // DuplicateApp
  std::optional<AppDefinition> find_app(std::string_view name);
  std::vector<AppDefinition> apps();

  /// One atomic group; ids returned in input order.
  std::vector<Uuid> insert(std::span<const Task> tasks);
  /// Matching tasks ordered by creation time, ties by id.
  std::vector<Task> query(const TaskFilter& filter = {});
  std::optional<Task> get(const Uuid& id);
  std::size_t count(const TaskFilter& filter = {});
  /// Resolves a unique id prefix. Throws UnknownId / AmbiguousPrefix.
  Uuid resolve_prefix(std::string_view prefix);

  /// All-or-nothing. Returns the number of changes applied.
  std::size_t update_batch(std::span<const StateChange> changes);

  /// Stamps up to `limit` unleased matching tasks with a lease for `owner`.
  std::vector<Task> acquire(const TaskFilter& filter, std::size_t limit, const std::string& owner,
                            double lease_seconds);
  /// renew: push back every live lease of `owner`; otherwise clear all of them.
  std::size_t renew_or_release(const std::string& owner, bool renew);
  std::size_t release(const std::string& owner, std::span<const Uuid> ids);
  /// Distinct owners currently recorded on any task.
  std::vector<std::string> lease_owners();

  std::vector<std::vector<StateEvent>> histories(const TaskFilter& filter = {});

  template <class F>
  auto write(F&& fn) -> decltype(fn(std::declval<Txn&>()));
  template <class F>
  auto read(F&& fn) -> decltype(fn(std::declval<Txn&>()));

 private:
  struct Impl;
  explicit TaskStore(std::unique_ptr<Impl> impl);
  void begin(bool write);
  void commit();
  void rollback() noexcept;
  Txn make_txn();

  std::unique_ptr<Impl> impl_;
};

template <class F>
auto TaskStore::write(F&& fn) -> decltype(fn(std::declval<Txn&>())) {
  begin(true);
  try {
    Txn txn = make_txn();
    if constexpr (std::is_void_v<decltype(fn(txn))>) {
      fn(txn);
      commit();
    } else {
      auto result = fn(txn);
      commit();
      return result;
    }
  } catch (...) {
    rollback();
    throw;
  }
}

template <class F>
auto TaskStore::read(F&& fn) -> decltype(fn(std::declval<Txn&>())) {
  begin(false);
  try {
    Txn txn = make_txn();
    if constexpr (std::is_void_v<decltype(fn(txn))>) {
      fn(txn);
      commit();
    } else {
      auto result = fn(txn);
      commit();
      return result;
    }
  } catch (...) {
    rollback();
    throw;
  }
}

}  // namespace pilotgrid
