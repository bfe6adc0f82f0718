#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pilotgrid/batch_job.hpp"
#include "pilotgrid/platform.hpp"
#include "pilotgrid/task_model.hpp"
#include "pilotgrid/task_store.hpp"

namespace pilotgrid {

struct NodeRange {
  int lo = 1;
  int hi = 1;
  double min_hours = 0.5;
  double max_hours = 1.0;

  friend bool operator==(const NodeRange&, const NodeRange&) = default;
};

struct QueueRule {
  std::string queue_name;
  int max_queued = 1;
  std::vector<NodeRange> ranges;

  friend bool operator==(const QueueRule&, const QueueRule&) = default;
};

struct QueuePolicy {
  std::vector<QueueRule> queues;

  /// Throws InvalidPolicy.
  void validate() const;
  const QueueRule* find(std::string_view queue) const;
  int max_nodes() const;

  /// JSON array of {"queue", "max_queued", "ranges": [[[lo,hi],[min_h,max_h]], ...]}.
  static QueuePolicy parse(std::string_view json_text);
  static QueuePolicy load(const std::filesystem::path& file);
  std::string dump() const;
};

/// Estimates are padded by this factor; unknown estimates take the range minimum.
inline constexpr double kWalltimeSafety = 1.25;

/// Tasks the service may pack: READY or RESTART_READY, no live lease, untagged.
std::vector<Task> eligible(TaskStore& store);

struct PackResult {
  std::vector<BatchJobSpec> specs;  // ids left nil; assigned at submission
  std::vector<Uuid> leftover;
  std::vector<std::string> warnings;
};

/// Greedy packing into elastic batch jobs; see README for the algorithm.
PackResult pack(std::span<const Task> tasks, const QueuePolicy& policy,
                const std::map<std::string, int>& queued_now);

/// Default batch script: runs the launcher for the job's tag.
std::string default_batch_template();
/// Placeholders {num_nodes}, {walltime_minutes}, {queue}, {batch_tag}, {job_mode}.
std::string render_batch_script(std::string_view script_template, const BatchJobSpec& spec);

/// Live jobs (pending-submit or queued) per queue.
std::map<std::string, int> queued_counts(TaskStore& store);

struct SubmitOptions {
  std::string script_template = default_batch_template();
};

/// Packs, tags, renders and submits. Specs the adapter rejects are rolled back.
std::vector<BatchJobSpec> submit_cycle(TaskStore& store, const QueuePolicy& policy,
                                       SchedulerAdapter& adapter, const SubmitOptions& options = {});

struct ReconcileAction {
  Uuid job;
  BatchStatus status;
  std::vector<Uuid> untagged;
};

/// Tasks that have not started running; the only ones reconcile untags.
bool is_unstarted(TaskState s);

/// Polls live jobs and untags the unstarted tasks of jobs that are gone.
/// Pending-submit rows older than `pending_stale_seconds` with no scheduler
/// id are treated as vanished.
std::vector<ReconcileAction> reconcile(TaskStore& store, SchedulerAdapter& adapter,
                                       double pending_stale_seconds = 60.0);

struct ServiceOptions {
  double cycle_seconds = 10.0;
  bool dry_run = false;
  bool once = false;
  std::string script_template = default_batch_template();
  std::string owner;  // empty: host:pid:nonce
  const std::atomic<bool>* stop = nullptr;
};

struct CycleReport {
  std::vector<ReconcileAction> reconciled;
  std::vector<BatchJobSpec> submitted;
  PackResult dry_run;
};

/// The single per-store service instance.
class Service {
 public:
  /// Throws ServiceLocked when another live service holds the store.
  Service(TaskStore& store, QueuePolicy policy, SchedulerAdapter& adapter, ServiceOptions options);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  CycleReport cycle();
  /// Cycles until stopped (or once).
  void run();

 private:
  void hold_lock();

  TaskStore& store_;
  QueuePolicy policy_;
  SchedulerAdapter& adapter_;
  ServiceOptions options_;
};

}  // namespace pilotgrid
