#include <random>

#include <gtest/gtest.h>

#include "pilotgrid/analytics.hpp"
#include "pilotgrid/error.hpp"
#include "support.hpp"

using namespace pilotgrid;
using enum TaskState;

namespace {

const Timestamp t0 = from_micros(1'700'000'000'000'000);
Timestamp at(double s) { return plus_seconds(t0, s); }

std::vector<StateEvent> run_history(double start, double end) {
  return {{at(0), CREATED, ""},      {at(0), READY, ""},         {at(start), STAGED_IN, ""},
          {at(start), PREPROCESSED, ""}, {at(start), RUNNING, ""}, {at(end), RUN_DONE, ""},
          {at(end), POSTPROCESSED, ""}, {at(end), STAGED_OUT, ""}, {at(end), JOB_FINISHED, ""}};
}

// Brute force: the state each history is in at time t.
int occupancy(const std::vector<std::vector<StateEvent>>& hs, TaskState s, Timestamp t) {
  int n = 0;
  for (const auto& h : hs) {
    std::optional<TaskState> cur;
    for (const auto& e : h)
      if (e.at <= t) cur = e.state;
    if (cur == s) ++n;
  }
  return n;
}

}  // namespace

TEST(Analytics, ReplayMatchesBruteForce) {
  std::mt19937 rng(3);
  for (int round = 0; round < 50; ++round) {
    std::vector<std::vector<StateEvent>> hs;
    for (int i = 0; i < 20; ++i) {
      const double s = rng() % 20, d = 1 + rng() % 10;
      auto h = run_history(s, s + d);
      h.resize(3 + rng() % 7);  // some tasks stop early
      hs.push_back(h);
    }
    auto series = process_job_times(hs);
    for (double t = 0; t <= 31; t += 0.5)
      for (auto s : kAllStates)
        ASSERT_EQ(value_at(series.at(s), at(t)), occupancy(hs, s, at(t)))
            << to_string(s) << " at " << t;
  }
}

TEST(Analytics, SeriesCoalescesSameTimestamp) {
  std::vector<std::vector<StateEvent>> hs{run_history(1, 2)};
  auto series = process_job_times(hs);
  // READY, STAGED_IN and PREPROCESSED at t=1 collapse to one change each
  ASSERT_EQ(series.at(RUNNING).size(), 2u);
  EXPECT_EQ(series.at(RUNNING)[0], std::make_pair(at(1), 1));
  EXPECT_EQ(series.at(RUNNING)[1], std::make_pair(at(2), 0));
  EXPECT_TRUE(series.at(STAGED_IN).empty());
  EXPECT_TRUE(series.at(FAILED).empty());
}

TEST(Analytics, CorruptHistoryRejected) {
  std::vector<std::vector<StateEvent>> hs{{{at(5), CREATED, ""}, {at(4), READY, ""}}};
  try {
    process_job_times(hs);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CorruptHistory);
  }
}

TEST(Analytics, UtilizationStepFunction) {
  // two workers: one busy 0-10, the other 5-10
  std::vector<std::vector<StateEvent>> hs{run_history(0, 10), run_history(5, 10)};
  auto u = utilization(process_job_times(hs), 2);
  EXPECT_EQ(u.begin, at(0));
  EXPECT_EQ(u.end, at(10));
  EXPECT_DOUBLE_EQ(u.mean, (0.5 * 5 + 1.0 * 5) / 10);
  ASSERT_EQ(u.points.size(), 3u);
  EXPECT_DOUBLE_EQ(u.points[1].second, 1.0);

  auto clipped = utilization(process_job_times(hs), 1);
  EXPECT_DOUBLE_EQ(clipped.mean, 1.0);

  auto windowed = utilization(process_job_times(hs), 2, std::make_pair(at(0), at(20)));
  EXPECT_DOUBLE_EQ(windowed.mean, 7.5 / 20);

  EXPECT_THROW(utilization(process_job_times(hs), 0), Error);
  EXPECT_EQ(utilization(process_job_times({}), 4).mean, 0.0);
}

TEST(Analytics, ThroughputAndScaling) {
  auto t = throughput(120, 30, 4);
  EXPECT_DOUBLE_EQ(t.tasks_per_node_hour, 60.0);
  EXPECT_DOUBLE_EQ(t.tasks_per_second, 120.0 / 1800);
  EXPECT_THROW(throughput(1, 0, 1), Error);
  EXPECT_THROW(throughput(1, 1, 0), Error);
  EXPECT_EQ(throughput(0, 1, 1).tasks_per_second, 0.0);

  auto eff = weak_scaling({{2, 10.0}, {4, 20.0}, {8, 30.0}});
  EXPECT_DOUBLE_EQ(eff.at(2), 1.0);
  EXPECT_DOUBLE_EQ(eff.at(4), 1.0);
  EXPECT_DOUBLE_EQ(eff.at(8), 0.75);
  // the throughput divisor is the caller's choice of node count
  EXPECT_NEAR(throughput(5328, 60, 1024).tasks_per_node_hour, 5.20, 0.01);
}

TEST(Analytics, CsvOutput) {
  std::vector<std::vector<StateEvent>> hs{run_history(1, 2)};
  std::ostringstream csv;
  write_state_csv(csv, process_job_times(hs));
  const auto text = csv.str();
  EXPECT_TRUE(text.starts_with("timestamp,state,count\n"));
  EXPECT_NE(text.find(format_iso8601(at(1)) + ",RUNNING,1\n"), std::string::npos);
  EXPECT_NE(text.find(format_iso8601(at(2)) + ",RUNNING,0\n"), std::string::npos);

  std::ostringstream u;
  write_utilization_csv(u, utilization(process_job_times(hs), 2));
  EXPECT_EQ(u.str(), "timestamp,utilization\n" + format_iso8601(at(1)) + ",0.5\n" +
                         format_iso8601(at(2)) + ",0\n");
}

TEST(Analytics, NextTick) {
  EXPECT_DOUBLE_EQ(next_tick(0, 2), 0);
  EXPECT_DOUBLE_EQ(next_tick(0.1, 2), 2);
  EXPECT_DOUBLE_EQ(next_tick(4, 2), 4);
  EXPECT_DOUBLE_EQ(next_tick(3.3, 0), 3.3);
}

TEST(Analytics, RecoverySimulation) {
  RecoveryModel m;
  m.workers = 2;
  m.total_tasks = 4;
  m.batch_window_seconds = 1;
  m.poll_seconds = 2;
  m.refresh_seconds = 1;
  m.duration = [](int) { return 3.5; };
  m.origin = at(0);
  auto hs = simulate_recovery(m);
  ASSERT_EQ(hs.size(), 4u);
  for (const auto& h : hs) {
    EXPECT_TRUE(history_is_consistent(h));
    EXPECT_EQ(h.back().state, JOB_FINISHED);
  }
  // finish 3.5 -> commit 4 -> poll 4 -> dispatch 4
  EXPECT_EQ(hs[2].front().at, at(4));
  auto u = utilization(process_job_times(hs), 2);
  // busy 0-3.5 and 4-7.5 on both workers
  EXPECT_NEAR(u.mean, 7.0 / 7.5, 1e-9);

  m.poll_seconds = 5;
  auto slow = utilization(process_job_times(simulate_recovery(m)), 2);
  EXPECT_LT(slow.mean, u.mean);
}
