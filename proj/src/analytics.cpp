#include "pilotgrid/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

#include "pilotgrid/error.hpp"

namespace pilotgrid {

StateSeries process_job_times(std::span<const std::vector<StateEvent>> histories) {
  struct Move {
    Timestamp at;
    std::optional<TaskState> from;
    TaskState to;
  };
  std::vector<Move> moves;
  for (const auto& h : histories) {
    for (std::size_t i = 0; i < h.size(); ++i) {
      if (i > 0 && h[i].at < h[i - 1].at)
        throw Error(ErrorCode::CorruptHistory,
                    "history goes back in time at " + format_iso8601(h[i].at));
      moves.push_back({h[i].at, i == 0 ? std::nullopt : std::optional(h[i - 1].state), h[i].state});
    }
  }
  std::stable_sort(moves.begin(), moves.end(),
                   [](const Move& a, const Move& b) { return a.at < b.at; });

  StateSeries series;
  std::map<TaskState, int> count;
  for (auto s : kAllStates) {
    series[s];
    count[s] = 0;
  }
  std::size_t i = 0;
  while (i < moves.size()) {
    const auto t = moves[i].at;
    for (; i < moves.size() && moves[i].at == t; ++i) {
      if (moves[i].from) --count[*moves[i].from];
      ++count[moves[i].to];
    }
    for (auto s : kAllStates) {
      auto& pts = series[s];
      const int last = pts.empty() ? 0 : pts.back().second;
      if (count[s] != last) pts.emplace_back(t, count[s]);
    }
  }
  return series;
}

int value_at(const StepSeries& series, Timestamp t) {
  auto it = std::upper_bound(series.begin(), series.end(), t,
                             [](Timestamp x, const auto& p) { return x < p.first; });
  if (it == series.begin()) return 0;
  return std::prev(it)->second;
}

Utilization utilization(const StateSeries& series, int workers,
                        std::optional<std::pair<Timestamp, Timestamp>> window) {
  if (workers < 1) throw Error(ErrorCode::InvalidField, "workers must be positive", "workers");
  Utilization u;
  static const StepSeries kEmpty;
  auto it = series.find(TaskState::RUNNING);
  const StepSeries& running = it == series.end() ? kEmpty : it->second;
  if (window) {
    u.begin = window->first;
    u.end = window->second;
  } else {
    if (running.empty()) return u;
    u.begin = running.front().first;
    u.end = running.back().first;
  }
  auto frac = [&](int n) { return std::clamp(static_cast<double>(n) / workers, 0.0, 1.0); };

  u.points.emplace_back(u.begin, frac(value_at(running, u.begin)));
  for (const auto& [t, n] : running)
    if (t > u.begin && t <= u.end) u.points.emplace_back(t, frac(n));

  const double span = seconds_between(u.begin, u.end);
  if (span <= 0) {
    u.mean = u.points.front().second;
    return u;
  }
  double area = 0;
  for (std::size_t i = 0; i < u.points.size(); ++i) {
    const auto next = i + 1 < u.points.size() ? u.points[i + 1].first : u.end;
    area += u.points[i].second * seconds_between(u.points[i].first, next);
  }
  u.mean = area / span;
  return u;
}

Throughput throughput(long completed, double span_minutes, int nodes) {
  if (!(span_minutes > 0)) throw Error(ErrorCode::InvalidField, "span must be positive", "span");
  if (nodes < 1) throw Error(ErrorCode::InvalidField, "nodes must be positive", "nodes");
  if (completed <= 0) return {};
  const double c = static_cast<double>(completed);
  return {c / (nodes * span_minutes / 60.0), c / (span_minutes * 60.0)};
}

std::map<int, double> weak_scaling(const std::map<int, double>& tasks_per_hour) {
  std::map<int, double> out;
  if (tasks_per_hour.empty()) return out;
  const auto [base, t0] = *tasks_per_hour.begin();
  for (const auto& [n, t] : tasks_per_hour)
    out[n] = (t / t0) / (static_cast<double>(n) / base);
  return out;
}

void write_state_csv(std::ostream& out, const StateSeries& series) {
  struct Row {
    Timestamp at;
    std::size_t order;
    TaskState state;
    int count;
  };
  std::vector<Row> rows;
  for (std::size_t k = 0; k < kAllStates.size(); ++k) {
    auto it = series.find(kAllStates[k]);
    if (it == series.end()) continue;
    for (const auto& [t, n] : it->second) rows.push_back({t, k, kAllStates[k], n});
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    return a.at != b.at ? a.at < b.at : a.order < b.order;
  });
  out << "timestamp,state,count\n";
  for (const auto& r : rows) out << format_iso8601(r.at) << ',' << to_string(r.state) << ',' << r.count << '\n';
}

void write_utilization_csv(std::ostream& out, const Utilization& u) {
  out << "timestamp,utilization\n";
  for (const auto& [t, f] : u.points) out << format_iso8601(t) << ',' << f << '\n';
}

double next_tick(double t, double period) {
  if (period <= 0) return t;
  const double k = std::ceil(t / period - 1e-9);
  return std::max(t, k * period);
}

std::vector<std::vector<StateEvent>> simulate_recovery(const RecoveryModel& model) {
  std::vector<std::vector<StateEvent>> out;
  auto at = [&](double s) { return plus_seconds(model.origin, s); };
  auto start_task = [&](double inserted, double dispatched, int index) {
    std::vector<StateEvent> h{{at(inserted), TaskState::CREATED, ""},
                              {at(inserted), TaskState::READY, ""},
                              {at(dispatched), TaskState::STAGED_IN, ""},
                              {at(dispatched), TaskState::PREPROCESSED, ""},
                              {at(dispatched), TaskState::RUNNING, ""}};
    out.push_back(std::move(h));
    return dispatched + model.duration(index);
  };

  using Entry = std::pair<double, int>;  // finish time, task index
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> running;
  int next = 0;
  for (; next < std::min(model.workers, model.total_tasks); ++next)
    running.push({start_task(0.0, 0.0, next), next});

  while (!running.empty()) {
    auto [finish, idx] = running.top();
    running.pop();
    const double committed = next_tick(finish, model.batch_window_seconds);
    auto& h = out[static_cast<std::size_t>(idx)];
    h.push_back({at(finish), TaskState::RUN_DONE, ""});
    h.push_back({at(committed), TaskState::POSTPROCESSED, ""});
    h.push_back({at(committed), TaskState::STAGED_OUT, ""});
    h.push_back({at(committed), TaskState::JOB_FINISHED, ""});
    if (next >= model.total_tasks) continue;
    const double inserted = next_tick(committed, model.poll_seconds);
    const double dispatched = next_tick(inserted, model.refresh_seconds);
    const int id = next++;
    running.push({start_task(inserted, dispatched, id), id});
  }
  return out;
}

}  // namespace pilotgrid
