#pragma once

#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <utility>
#include <vector>

#include "pilotgrid/task_model.hpp"
#include "pilotgrid/time.hpp"

namespace pilotgrid {

/// Per-state step functions: (timestamp, count) at every change.
using StepSeries = std::vector<std::pair<Timestamp, int>>;
using StateSeries = std::map<TaskState, StepSeries>;

/// Event-sourced replay of task histories. Every state has an entry, empty
/// when the state was never occupied. Throws CorruptHistory when a history
/// goes back in time.
StateSeries process_job_times(std::span<const std::vector<StateEvent>> histories);

/// Value of a step series at `t` (0 before the first point).
int value_at(const StepSeries& series, Timestamp t);

struct Utilization {
  std::vector<std::pair<Timestamp, double>> points;
  double mean = 0.0;  // time-weighted over [begin, end]
  Timestamp begin{};
  Timestamp end{};
};

/// RUNNING count / workers clipped to [0, 1]. The default window runs from
/// the first RUNNING event to the last change of the RUNNING count.
Utilization utilization(const StateSeries& series, int workers,
                        std::optional<std::pair<Timestamp, Timestamp>> window = std::nullopt);

struct Throughput {
  double tasks_per_node_hour = 0.0;
  double tasks_per_second = 0.0;
};

Throughput throughput(long completed, double span_minutes, int nodes);

/// efficiency(n) = (T(n) / T(base)) / (n / base), base = smallest node count.
std::map<int, double> weak_scaling(const std::map<int, double>& tasks_per_hour);

/// "timestamp,state,count" rows, ISO-8601 UTC timestamps.
void write_state_csv(std::ostream& out, const StateSeries& series);
/// "timestamp,utilization" rows.
void write_utilization_csv(std::ostream& out, const Utilization& u);

/// Discrete-event model of the completion/refill loop between a launcher and
/// a client that polls for finished tasks and submits replacements:
/// completions are committed at the end of each batch window, the client
/// polls on a fixed period and inserts one new task per finished one, and the
/// launcher picks new tasks up on its next refresh.
struct RecoveryModel {
  int workers = 8;
  int total_tasks = 64;
  double batch_window_seconds = 1.0;
  double poll_seconds = 2.0;
  double refresh_seconds = 1.0;
  /// Duration of the i-th task.
  std::function<double(int)> duration = [](int) { return 10.0; };
  Timestamp origin = from_micros(0);
};

/// Synthetic state histories produced by the model, one per task.
std::vector<std::vector<StateEvent>> simulate_recovery(const RecoveryModel& model);

/// Next multiple of `period` at or after `t` seconds.
double next_tick(double t, double period);

}  // namespace pilotgrid
