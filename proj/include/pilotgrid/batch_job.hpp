#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pilotgrid/time.hpp"
#include "pilotgrid/uuid.hpp"

namespace pilotgrid {

enum class JobMode { Serial, PerTaskLaunch };

/// "serial" / "mpi", the launcher's --job-mode spelling.
std::string_view to_string(JobMode m);
JobMode parse_job_mode(std::string_view text);

enum class BatchStatus { PendingSubmit, Queued, Running, Finished, Vanished };

std::string_view to_string(BatchStatus s);
BatchStatus parse_batch_status(std::string_view text);

inline bool is_live(BatchStatus s) {
  return s == BatchStatus::PendingSubmit || s == BatchStatus::Queued || s == BatchStatus::Running;
}

/// One elastic launcher allocation. `id` doubles as the batch tag stamped on
/// its tasks.
struct BatchJobSpec {
  Uuid id;
  std::string queue_name;
  int num_nodes = 1;
  double walltime_minutes = 0.0;
  JobMode job_mode = JobMode::Serial;
  std::vector<Uuid> task_ids;
  /// Planned start offset (minutes into the job) of each task, parallel to task_ids.
  std::vector<double> planned_starts;
  std::optional<std::string> scheduler_id;
  BatchStatus status = BatchStatus::PendingSubmit;
  Timestamp created{};

  friend bool operator==(const BatchJobSpec&, const BatchJobSpec&) = default;
};

}  // namespace pilotgrid
