// End-to-end acceptance suite. Prints one PASS/FAIL line per criterion.

#include <signal.h>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include <gtest/gtest.h>
#include <spdlog/spdlog.h>

#include "pilotgrid/analytics.hpp"
#include "pilotgrid/dag_engine.hpp"
#include "pilotgrid/error.hpp"
#include "pilotgrid/launcher.hpp"
#include "pilotgrid/project.hpp"
#include "pilotgrid/scheduler_service.hpp"
#include "support.hpp"

using namespace pilotgrid;
using testsupport::TempDir;
namespace fs = std::filesystem;

namespace {

std::vector<fs::path> dispatch_logs(const Project& p) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(p.log_dir()))
    if (e.path().filename().string().starts_with("dispatch-")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<DispatchEvent> all_dispatch_events(const Project& p) {
  std::vector<DispatchEvent> out;
  for (const auto& f : dispatch_logs(p))
    for (auto& e : read_dispatch_log(f)) out.push_back(std::move(e));
  return out;
}

std::string fmt_seconds(double s) {
  std::ostringstream o;
  o.precision(3);
  o << std::fixed << s;
  return o.str();
}

/// 200 sleep tasks, uniform 1-3 s, packing 2. `args_for(i, secs)` builds the argument string.
std::vector<Uuid> add_sleep_workload(TaskStore& store, const std::string& app, int count,
                                     unsigned seed,
                                     const std::function<std::string(int, const std::string&)>& args_for) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> secs(1.0, 3.0);
  return store.write([&](Txn& txn) {
    std::vector<Uuid> ids;
    for (int i = 0; i < count; ++i) {
      TaskSpec s;
      s.name = "t" + std::to_string(i);
      s.workflow = "bench";
      s.application = app;
      s.node_packing_count = 2;
      s.args = args_for(i, fmt_seconds(secs(rng)));
      ids.push_back(dag::spawn(txn, s, {}));
    }
    return ids;
  });
}

bool has_message(const Task& t, TaskState s, std::string_view needle) {
  for (const auto& e : t.state_history)
    if (e.state == s && e.message.find(needle) != std::string::npos) return true;
  return false;
}

std::optional<Timestamp> first_event(const Task& t, TaskState s) {
  for (const auto& e : t.state_history)
    if (e.state == s) return e.at;
  return std::nullopt;
}

int count_events(const Task& t, TaskState s) {
  return static_cast<int>(std::count_if(t.state_history.begin(), t.state_history.end(),
                                        [&](const StateEvent& e) { return e.state == s; }));
}

}  // namespace

// 1. Metric arithmetic against reported figures.
TEST(Acceptance, Criterion1_MetricArithmetic) {
  // 5328 tasks in 54.31 min on 1024 nodes, reported as 5.75 tasks/node-hour
  EXPECT_NEAR(throughput(5328, 54.31, 1024).tasks_per_node_hour, 5.75, 0.01);
  // 1600 tasks in 9 min 56 s (9.933 min) on 128 nodes, reported as about 2.7 tasks/s
  EXPECT_NEAR(throughput(1600, 9.933, 128).tasks_per_second, 2.68, 0.01);
  // 7.64-fold throughput increase from 128 to 1024 nodes, reported as 96% efficiency
  auto eff = weak_scaling({{128, 1.0}, {1024, 7.64}});
  EXPECT_NEAR(eff.at(1024), 0.955, 0.005);
  EXPECT_DOUBLE_EQ(eff.at(128), 1.0);
}

// 2. Desk run with two concurrent launchers.
TEST(Acceptance, Criterion2_DeskRunUtilization) {
  TempDir tmp;
  auto project = Project::init(tmp / "proj");
  auto store = project.store();
  store.register_app({"sleep", "/bin/sleep", {}, {}, ErrorPolicy::fail()});
  auto ids = add_sleep_workload(store, "sleep", 200, 2024, [](int, const std::string& s) { return s; });

  auto env = testsupport::project_env(project.root());
  auto l1 = testsupport::start_cli({"launcher", "--nodes", "2"}, env, tmp / "l1");
  auto l2 = testsupport::start_cli({"launcher", "--nodes", "2"}, env, tmp / "l2");
  ASSERT_TRUE(testsupport::wait_exit(l1, 120)) << "first launcher did not finish";
  ASSERT_TRUE(testsupport::wait_exit(l2, 120)) << "second launcher did not finish";
  EXPECT_TRUE(l1.status()->success()) << testsupport::slurp(tmp / "l1.err");
  EXPECT_TRUE(l2.status()->success()) << testsupport::slurp(tmp / "l2.err");

  for (const auto& t : store.query())
    EXPECT_EQ(t.state, TaskState::JOB_FINISHED) << t.name;

  auto series = process_job_times(store.histories());
  auto u = utilization(series, 8);
  std::cout << "    mean utilization " << u.mean << " over "
            << seconds_between(u.begin, u.end) << " s\n";
  EXPECT_GE(u.mean, 0.90);

  // every task dispatched exactly once, by exactly one launcher
  auto logs = dispatch_logs(project);
  ASSERT_EQ(logs.size(), 2u);
  std::map<Uuid, int> starts;
  std::map<Uuid, std::set<std::size_t>> owners;
  for (std::size_t i = 0; i < logs.size(); ++i) {
    int n = 0;
    for (const auto& e : read_dispatch_log(logs[i])) {
      if (e.kind != DispatchEvent::Kind::Start) continue;
      ++starts[e.task];
      owners[e.task].insert(i);
      ++n;
    }
    EXPECT_GT(n, 0) << "launcher " << i << " ran nothing";
  }
  int violations = 0;
  for (const auto& id : ids)
    if (starts[id] != 1 || owners[id].size() != 1) ++violations;
  EXPECT_EQ(violations, 0);
  for (const auto& t : store.query()) EXPECT_EQ(count_events(t, TaskState::RUNNING), 1) << t.name;
}

// 3. Injected failures under the fail and retry policies.
TEST(Acceptance, Criterion3_FaultTolerance) {
  TempDir tmp;
  testsupport::write_script(tmp / "flaky.sh",
                            "sleep \"$1\"\n"
                            "case \"$2\" in\n"
                            "  fail) echo \"injected failure\" >&2; exit 3 ;;\n"
                            "  transient)\n"
                            "    if [ ! -e .attempted ]; then\n"
                            "      touch .attempted; echo \"transient failure\" >&2; exit 4\n"
                            "    fi ;;\n"
                            "esac\n");
  const auto flaky = (tmp / "flaky.sh").string();

  auto fail_proj = Project::init(tmp / "fail");
  auto retry_proj = Project::init(tmp / "retry");
  auto fail_store = fail_proj.store();
  auto retry_store = retry_proj.store();
  fail_store.register_app({"flaky", flaky, {}, {}, ErrorPolicy::fail()});
  retry_store.register_app({"flaky", flaky, {}, {}, ErrorPolicy::retry(2)});

  std::mt19937 rng(7);
  std::vector<int> order(200);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::set<int> injected(order.begin(), order.begin() + 20);

  auto fail_ids = add_sleep_workload(fail_store, "flaky", 200, 11, [&](int i, const std::string& s) {
    return s + (injected.count(i) ? " fail" : " ok");
  });
  add_sleep_workload(retry_store, "flaky", 200, 12, [&](int i, const std::string& s) {
    return s + (injected.count(i) ? " transient" : " ok");
  });

  auto l1 = testsupport::start_cli({"launcher", "--nodes", "4"},
                                   testsupport::project_env(fail_proj.root()), tmp / "l1");
  auto l2 = testsupport::start_cli({"launcher", "--nodes", "4"},
                                   testsupport::project_env(retry_proj.root()), tmp / "l2");
  ASSERT_TRUE(testsupport::wait_exit(l1, 120));
  ASSERT_TRUE(testsupport::wait_exit(l2, 120));

  std::set<Uuid> expected_failed;
  for (int i : injected) expected_failed.insert(fail_ids[static_cast<std::size_t>(i)]);
  std::set<Uuid> failed;
  for (const auto& t : fail_store.query()) {
    if (t.state == TaskState::FAILED) {
      failed.insert(t.id);
      EXPECT_TRUE(has_message(t, TaskState::RUN_ERROR, "exit code 3")) << t.name;
      EXPECT_TRUE(has_message(t, TaskState::RUN_ERROR, "injected failure")) << t.name;
    } else {
      EXPECT_EQ(t.state, TaskState::JOB_FINISHED) << t.name;
    }
  }
  EXPECT_EQ(failed, expected_failed);

  int finished = 0, retried = 0;
  for (const auto& t : retry_store.query()) {
    if (t.state == TaskState::JOB_FINISHED) ++finished;
    if (count_events(t, TaskState::RESTART_READY) > 0) ++retried;
  }
  EXPECT_EQ(finished, 200);
  EXPECT_EQ(retried, 20);
}

// 4. Hard-killed launcher, then a second launcher finishes the work.
TEST(Acceptance, Criterion4_CrashRestart) {
  TempDir tmp;
  auto project = Project::init(tmp / "proj");
  auto store = project.store();
  store.register_app({"sleep", "/bin/sleep", {}, {}, ErrorPolicy::fail()});
  add_sleep_workload(store, "sleep", 40, 99, [](int, const std::string& s) { return s; });
  auto env = testsupport::project_env(project.root());

  auto first = testsupport::start_cli({"launcher", "--nodes", "4"}, env, tmp / "first");
  TaskFilter done;
  done.states = {TaskState::JOB_FINISHED};
  TaskFilter running;
  running.states = {TaskState::RUNNING};
  ASSERT_TRUE(testsupport::wait_until(
      [&] { return store.count(done) >= 8 && store.count(running) >= 4; }, 30));
  ::kill(first.pid(), SIGKILL);
  first.wait();

  std::set<Uuid> in_flight;
  for (const auto& t : store.query(running)) in_flight.insert(t.id);
  ASSERT_FALSE(in_flight.empty());

  auto second = testsupport::start_cli({"launcher", "--nodes", "4"}, env, tmp / "second");
  ASSERT_TRUE(testsupport::wait_exit(second, 60));
  EXPECT_TRUE(second.status()->success()) << testsupport::slurp(tmp / "second.err");

  auto events = all_dispatch_events(project);
  for (const auto& t : store.query()) {
    EXPECT_EQ(t.state, TaskState::JOB_FINISHED) << t.name;
    EXPECT_TRUE(history_is_consistent(t.state_history)) << t.name;
    if (in_flight.count(t.id)) EXPECT_EQ(count_events(t, TaskState::RUN_TIMEOUT), 1) << t.name;
    auto done_at = first_event(t, TaskState::RUN_DONE);
    ASSERT_TRUE(done_at) << t.name;
    int late_starts = 0;
    for (const auto& e : events)
      if (e.task == t.id && e.kind == DispatchEvent::Kind::Start && e.at > *done_at) ++late_starts;
    EXPECT_EQ(late_starts, 0) << t.name << " executed again after RUN_DONE";
  }
}

// 5. Diamond DAG: data flow, ordering and the listing layout.
TEST(Acceptance, Criterion5_DiamondDag) {
  TempDir tmp;
  testsupport::write_script(tmp / "generate.sh", "sleep 0.2\necho generated > A.out\n");
  testsupport::write_script(tmp / "simulate.sh", "sleep \"$1\"\necho \"$2\" > \"$2.out\"\n");
  testsupport::write_script(tmp / "reduce.sh", "for f in *.out; do if [ -L \"$f\" ]; then echo \"$f\"; fi; done > inputs.txt\n");

  auto project = Project::init(tmp / "proj");
  auto store = project.store();
  store.register_app({"generate", (tmp / "generate.sh").string(), {}, {}, ErrorPolicy::fail()});
  store.register_app({"simulate", (tmp / "simulate.sh").string(), {}, {}, ErrorPolicy::fail()});
  store.register_app({"reduce", (tmp / "reduce.sh").string(), {}, {}, ErrorPolicy::fail()});

  struct Node {
    const char* id;
    const char* name;
    const char* app;
    const char* args;
  };
  const Node nodes[] = {
      {"d487a785-3ff1-4702-aff9-d6f1f88dd795", "A", "generate", ""},
      {"94905135-b47d-439f-9561-6c16290112db", "B", "simulate", "0.3 B"},
      {"c04942d2-4926-4324-ad6e-b9c729d9f62b", "C", "simulate", "8 C"},
      {"19b130c3-50df-497c-a740-8c987c6b8e19", "D", "simulate", "8 D"},
      {"15df7441-4fb9-4537-af96-5f91453b7f3a", "E", "reduce", ""},
  };
  std::map<std::string, Uuid> id;
  for (const auto& n : nodes) {
    TaskSpec s;
    s.name = n.name;
    s.workflow = "sample";
    s.application = n.app;
    s.args = n.args;
    if (std::string(n.name) == "E") s.input_files = "*.out";
    const auto uid = Uuid::from_string(n.id);
    id[n.name] = uid;
    store.write([&](Txn& txn) {
      txn.insert(new_task(s, txn.now(), uid));
      const std::string name = n.name;
      if (name == "A") {
        txn.apply({uid, TaskState::READY, "no pending parents", txn.now(), std::nullopt});
      } else if (name == "E") {
        for (const char* p : {"B", "C", "D"}) dag::add_dependency(txn, id[p], uid);
      } else {
        dag::add_dependency(txn, id["A"], uid);
      }
    });
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }

  const std::string expected =
      "                              job_id | name | workflow | application |            state\n"
      "---------------------------------------------------------------------------------------\n"
      "d487a785-3ff1-4702-aff9-d6f1f88dd795 | A    | sample   | generate    | JOB_FINISHED\n"
      "94905135-b47d-439f-9561-6c16290112db | B    | sample   | simulate    | JOB_FINISHED\n"
      "c04942d2-4926-4324-ad6e-b9c729d9f62b | C    | sample   | simulate    | RUNNING\n"
      "19b130c3-50df-497c-a740-8c987c6b8e19 | D    | sample   | simulate    | RUNNING\n"
      "15df7441-4fb9-4537-af96-5f91453b7f3a | E    | sample   | reduce      | AWAITING_PARENTS\n";

  auto env = testsupport::project_env(project.root());
  auto launcher = testsupport::start_cli({"launcher", "--nodes", "4"}, env, tmp / "launcher");
  std::string last;
  const bool matched = testsupport::wait_until(
      [&] {
        last = testsupport::run_cli({"ls", "--wf", "sample"}, env).out;
        return last == expected;
      },
      20, 0.1);
  EXPECT_TRUE(matched) << "last listing:\n" << last;
  ASSERT_TRUE(testsupport::wait_exit(launcher, 60));

  std::map<std::string, Task> task;
  for (const auto& t : store.query()) task.emplace(t.name, t);
  for (const auto& [name, t] : task) ASSERT_EQ(t.state, TaskState::JOB_FINISHED) << name;

  Timestamp parents_end{};
  for (const char* p : {"B", "C", "D"})
    parents_end = std::max(parents_end, *first_event(task.at(p), TaskState::JOB_FINISHED));
  EXPECT_GT(*first_event(task.at("E"), TaskState::RUNNING), parents_end);

  std::vector<Task> parents{task.at("B"), task.at("C"), task.at("D")};
  auto inputs = resolve_inputs(task.at("E"), parents);
  std::vector<std::string> names;
  for (const auto& in : inputs) names.push_back(in.destination);
  EXPECT_EQ(names, (std::vector<std::string>{"B.out", "C.out", "D.out"}));
  EXPECT_EQ(testsupport::slurp(fs::path(task.at("E").work_dir) / "inputs.txt"), "B.out\nC.out\nD.out\n");
}

// 6. Packing properties over random instances.
namespace {

QueuePolicy random_policy(std::mt19937& rng) {
  QueuePolicy p;
  const int nq = std::uniform_int_distribution(1, 3)(rng);
  for (int q = 0; q < nq; ++q) {
    QueueRule rule;
    rule.queue_name = "q" + std::to_string(q);
    rule.max_queued = std::uniform_int_distribution(1, 4)(rng);
    int lo = std::uniform_int_distribution(1, 4)(rng);
    const int nr = std::uniform_int_distribution(1, 3)(rng);
    for (int r = 0; r < nr; ++r) {
      const int hi = lo + std::uniform_int_distribution(0, 20)(rng);
      const double min_h = std::uniform_real_distribution(0.1, 1.0)(rng);
      const double max_h = min_h + std::uniform_real_distribution(0.0, 3.0)(rng);
      rule.ranges.push_back({lo, hi, min_h, max_h});
      lo = hi + 1 + std::uniform_int_distribution(0, 5)(rng);
    }
    p.queues.push_back(rule);
  }
  return p;
}

std::vector<Task> random_tasks(std::mt19937& rng) {
  std::vector<Task> out;
  const int n = std::uniform_int_distribution(0, 50)(rng);
  const auto base = from_micros(1'700'000'000'000'000);
  for (int i = 0; i < n; ++i) {
    TaskSpec s;
    s.name = "t";
    s.application = "app";
    s.num_nodes = std::uniform_int_distribution(1, 40)(rng);
    if (std::bernoulli_distribution(0.7)(rng))
      s.wall_time_minutes = std::uniform_real_distribution(1.0, 150.0)(rng);
    out.push_back(new_task(s, plus_seconds(base, std::uniform_int_distribution(0, 100)(rng))));
  }
  return out;
}

const NodeRange* range_for(const QueueRule& q, int nodes) {
  for (const auto& r : q.ranges)
    if (r.lo <= nodes && nodes <= r.hi) return &r;
  return nullptr;
}

}  // namespace

TEST(Acceptance, Criterion6_PackingProperties) {
  std::mt19937 rng(20240601);
  constexpr double eps = 1e-6;
  for (int instance = 0; instance < 1000; ++instance) {
    SCOPED_TRACE("instance " + std::to_string(instance));
    auto policy = random_policy(rng);
    ASSERT_NO_THROW(policy.validate());
    auto tasks = random_tasks(rng);
    std::map<std::string, int> queued;
    for (const auto& q : policy.queues)
      queued[q.queue_name] = std::uniform_int_distribution(0, q.max_queued)(rng);
    std::map<Uuid, const Task*> by_id;
    for (const auto& t : tasks) by_id[t.id] = &t;

    auto result = pack(tasks, policy, queued);

    std::map<std::string, int> emitted;
    std::multiset<Uuid> seen(result.leftover.begin(), result.leftover.end());
    for (const auto& spec : result.specs) {
      const auto* q = policy.find(spec.queue_name);
      ASSERT_NE(q, nullptr);
      ++emitted[spec.queue_name];
      const auto* r = range_for(*q, spec.num_nodes);
      ASSERT_NE(r, nullptr) << spec.num_nodes << " nodes outside every range of " << q->queue_name;
      EXPECT_GE(spec.walltime_minutes, r->min_hours * 60 - eps);
      EXPECT_LE(spec.walltime_minutes, r->max_hours * 60 + eps);
      ASSERT_EQ(spec.task_ids.size(), spec.planned_starts.size());
      ASSERT_FALSE(spec.task_ids.empty());

      // re-simulate the plan: every task ends within the walltime and the
      // node demand never exceeds the allocation
      struct Span {
        double start, end;
        int nodes;
      };
      std::vector<Span> spans;
      for (std::size_t i = 0; i < spec.task_ids.size(); ++i) {
        const Task& t = *by_id.at(spec.task_ids[i]);
        seen.insert(t.id);
        const double d = t.wall_time_minutes > 0 ? t.wall_time_minutes * 1.25 : r->min_hours * 60;
        spans.push_back({spec.planned_starts[i], spec.planned_starts[i] + d, t.num_nodes});
        EXPECT_GE(spec.planned_starts[i], 0.0);
        EXPECT_LE(spec.planned_starts[i] + d, spec.walltime_minutes + eps);
        EXPECT_LE(t.num_nodes, spec.num_nodes);
      }
      const bool any_mpi = std::any_of(spec.task_ids.begin(), spec.task_ids.end(),
                                       [&](const Uuid& id) { return by_id.at(id)->uses_mpi(); });
      EXPECT_EQ(spec.job_mode, any_mpi ? JobMode::PerTaskLaunch : JobMode::Serial);
      for (const auto& probe : spans) {
        int used = 0;
        for (const auto& s : spans)
          if (s.start <= probe.start + eps && probe.start < s.end - eps) used += s.nodes;
        EXPECT_LE(used, spec.num_nodes);
      }
    }
    for (const auto& q : policy.queues)
      EXPECT_LE(emitted[q.queue_name] + queued[q.queue_name], q.max_queued) << q.queue_name;

    // every task is either packed once or left over
    std::multiset<Uuid> all;
    for (const auto& t : tasks) all.insert(t.id);
    EXPECT_EQ(seen, all);

    // deterministic, independent of input order
    auto shuffled = tasks;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    auto again = pack(shuffled, policy, queued);
    EXPECT_EQ(again.specs, result.specs);
    EXPECT_EQ(again.leftover, result.leftover);
    if (HasFailure()) return;
  }
}

// 7. A queued batch job deleted behind the service's back.
TEST(Acceptance, Criterion7_Reconciliation) {
  TempDir tmp;
  auto project = Project::init(tmp / "proj");
  auto store = project.store();
  store.register_app({"sleep", "/bin/sleep", {}, {}, ErrorPolicy::fail()});
  store.write([&](Txn& txn) {
    for (int i = 0; i < 8; ++i) {
      TaskSpec s;
      s.name = "r" + std::to_string(i);
      s.application = "sleep";
      s.args = "1";
      s.wall_time_minutes = 1;
      dag::spawn(txn, s, {});
    }
  });

  QueuePolicy policy;
  policy.queues.push_back({"default", 1, {{1, 4, 0.1, 1.0}}});
  auto env = testsupport::project_env(project.root());
  fs::create_directories(project.scheduler_dir());
  auto mock = mock_scheduler(system_clock(), 4, project.scheduler_dir(), env);

  ServiceOptions so;
  so.cycle_seconds = 10;
  Service service(store, policy, *mock, so);

  // cycle 1 submits; the job is deleted while still queued
  auto c1 = service.cycle();
  ASSERT_EQ(c1.submitted.size(), 1u);
  const auto deleted = c1.submitted.front();
  mock->remove(*deleted.scheduler_id);

  // cycle 2 notices the deletion and submits a replacement
  auto c2 = service.cycle();
  ASSERT_EQ(c2.reconciled.size(), 1u);
  EXPECT_EQ(c2.reconciled.front().status, BatchStatus::Vanished);
  EXPECT_EQ(c2.reconciled.front().untagged.size(), 8u);
  ASSERT_EQ(c2.submitted.size(), 1u);
  EXPECT_EQ(c2.submitted.front().task_ids.size(), 8u);

  // cycle 3 sees the replacement start; everything finishes before cycle 4 is due
  const auto cycle3 = std::chrono::steady_clock::now();
  service.cycle();
  TaskFilter done;
  done.states = {TaskState::JOB_FINISHED};
  const bool finished = testsupport::wait_until(
      [&] {
        mock->advance();
        return store.count(done) == 8;
      },
      so.cycle_seconds, 0.1);
  const double took =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - cycle3).count();
  EXPECT_TRUE(finished) << "tasks still pending after " << took << " s";
  for (const auto& t : store.query())
    EXPECT_EQ(t.batch_tag, c2.submitted.front().id) << t.name;
  auto rec = mock->record(*c2.submitted.front().scheduler_id);
  ASSERT_TRUE(rec);
  EXPECT_TRUE(rec->started.has_value());
}

// 8. Hooks growing the DAG inside one allocation, and a recursive kill.
TEST(Acceptance, Criterion8_DynamicWorkflowAndKill) {
  TempDir tmp;
  auto project = Project::init(tmp / "proj");
  auto store = project.store();
  store.register_app({"sleep", "/bin/sleep", {}, {}, ErrorPolicy::fail()});
  store.register_app(
      {"parent", "/bin/sleep", {},
       "pilotgrid job --name \"child-$PILOTGRID_JOB_NAME\" --workflow dyn --application sleep "
       "--args 0.5 --parent \"$PILOTGRID_JOB_ID\"",
       ErrorPolicy::fail()});

  const auto tag = Uuid::random();
  std::vector<Uuid> parents;
  std::map<std::string, Uuid> k;
  store.write([&](Txn& txn) {
    auto add = [&](const std::string& name, const std::string& app, const std::string& args,
                   std::vector<Uuid> ps) {
      TaskSpec s;
      s.name = name;
      s.workflow = "dyn";
      s.application = app;
      s.args = args;
      auto id = dag::spawn(txn, s, ps);
      txn.set_batch_tag(id, tag);
      return id;
    };
    for (int i = 0; i < 4; ++i) parents.push_back(add("p" + std::to_string(i), "parent", "0.5", {}));
    k["K"] = add("K", "sleep", "60", {});
    k["K1"] = add("K1", "sleep", "1", {k["K"]});
    k["K2"] = add("K2", "sleep", "1", {k["K"]});
    k["K11"] = add("K11", "sleep", "1", {k["K1"]});
    k["U"] = add("U", "sleep", "0.5", {});
    k["K12"] = add("K12", "sleep", "1", {k["K1"], k["U"]});
    k["V"] = add("V", "sleep", "0.5", {k["U"]});
  });

  auto env = testsupport::project_env(project.root());
  auto launcher = testsupport::start_cli({"launcher", "--nodes", "4", "--batch-tag", tag.str()},
                                         env, tmp / "launcher");
  ASSERT_TRUE(testsupport::wait_until(
      [&] { return store.get(k["K"])->state == TaskState::RUNNING; }, 20));

  // closure of K by traversal over the stored edges
  auto edges = store.read([](Txn& txn) { return txn.edges(); });
  std::set<Uuid> closure{k["K"]};
  for (bool grew = true; grew;) {
    grew = false;
    for (const auto& e : edges)
      if (closure.count(e.parent) && closure.insert(e.child).second) grew = true;
  }

  const auto kill_at = now_utc();
  auto killed = testsupport::run_cli({"kill", "--recursive", k["K"].short_str()}, env);
  ASSERT_EQ(killed.code, 0) << killed.err;
  std::set<Uuid> listed;
  std::istringstream lines(killed.out);
  for (std::string line; std::getline(lines, line);) listed.insert(Uuid::from_string(line));
  EXPECT_EQ(listed, closure);

  ASSERT_TRUE(testsupport::wait_exit(launcher, 60));
  EXPECT_TRUE(launcher.status()->success()) << testsupport::slurp(tmp / "launcher.err");

  std::set<Uuid> user_killed;
  for (const auto& t : store.query())
    if (t.state == TaskState::USER_KILLED) user_killed.insert(t.id);
    else EXPECT_EQ(t.state, TaskState::JOB_FINISHED) << t.name;
  EXPECT_EQ(user_killed, closure);

  // K's process ended within the grace period
  auto events = all_dispatch_events(project);
  std::optional<Timestamp> k_end;
  for (const auto& e : events)
    if (e.task == k["K"] && e.kind == DispatchEvent::Kind::End) k_end = e.at;
  ASSERT_TRUE(k_end);
  EXPECT_LT(seconds_between(kill_at, *k_end), 10.0);

  // one child per parent, all run by the single launcher
  TaskFilter children;
  children.name_contains = "child-";
  auto kids = store.query(children);
  ASSERT_EQ(kids.size(), parents.size());
  std::set<Uuid> started;
  for (const auto& e : events)
    if (e.kind == DispatchEvent::Kind::Start) started.insert(e.task);
  EXPECT_EQ(dispatch_logs(project).size(), 1u);
  for (const auto& c : kids) {
    EXPECT_EQ(c.state, TaskState::JOB_FINISHED) << c.name;
    EXPECT_EQ(c.batch_tag, tag) << c.name;
    EXPECT_TRUE(started.count(c.id)) << c.name;
    auto ps = store.read([&](Txn& txn) { return txn.parents(c.id); });
    ASSERT_EQ(ps.size(), 1u);
    EXPECT_EQ(c.name, "child-" + store.get(ps.front())->name);
  }
}

// 9. Random transition walks.
TEST(Acceptance, Criterion9_StateMachineFuzz) {
  std::mt19937_64 rng(424242);
  constexpr int kWalks = 100000;
  constexpr int kPerTrace = 100;

  EXPECT_TRUE(successors(TaskState::JOB_FINISHED).empty());
  EXPECT_TRUE(successors(TaskState::USER_KILLED).empty());
  ASSERT_EQ(successors(TaskState::FAILED).size(), 1u);
  EXPECT_EQ(successors(TaskState::FAILED).front(), TaskState::RESTART_READY);

  std::vector<std::vector<StateEvent>> trace;
  auto origin = from_micros(1'700'000'000'000'000);
  for (int w = 0; w < kWalks; ++w) {
    TaskSpec spec;
    spec.name = "w";
    spec.application = "a";
    auto at = plus_seconds(origin, static_cast<double>(rng() % 1000));
    Task t = new_task(spec, at);
    for (int step = 0; step < 40; ++step) {
      auto next = successors(t.state);
      if (next.empty()) break;
      // leave FAILED alone most of the time
      if (t.state == TaskState::FAILED && rng() % 4 != 0) break;
      const auto to = next[rng() % next.size()];
      at = plus_seconds(at, static_cast<double>(rng() % 3));
      t = advance(t, to, "", at);
    }
    ASSERT_TRUE(history_is_consistent(t.state_history));
    if (is_terminal(t.state) && t.state != TaskState::FAILED) {
      for (auto s : kAllStates) {
        EXPECT_FALSE(validate_transition(t.state, s));
        EXPECT_THROW(advance(t, s, "", at), Error);
      }
    }
    trace.push_back(std::move(t.state_history));

    if (trace.size() == kPerTrace) {
      auto series = process_job_times(trace);
      std::set<Timestamp> times;
      for (const auto& h : trace)
        for (const auto& e : h) times.insert(e.at);
      for (auto tp : times) {
        std::size_t created = 0;
        for (const auto& h : trace) created += h.front().at <= tp;
        long total = 0;
        for (auto s : kAllStates) {
          const int v = value_at(series.at(s), tp);
          ASSERT_GE(v, 0);
          total += v;
        }
        ASSERT_EQ(total, static_cast<long>(created));
      }
      trace.clear();
    }
  }
}

namespace {

class CriterionPrinter : public ::testing::EmptyTestEventListener {
  void OnTestEnd(const ::testing::TestInfo& info) override {
    static const std::map<std::string, std::string> titles{
        {"Criterion1_MetricArithmetic", "throughput and weak-scaling arithmetic"},
        {"Criterion2_DeskRunUtilization", "desk run utilization, two launchers"},
        {"Criterion3_FaultTolerance", "injected faults, fail and retry policies"},
        {"Criterion4_CrashRestart", "launcher crash and restart"},
        {"Criterion5_DiamondDag", "diamond DAG data flow and listing"},
        {"Criterion6_PackingProperties", "packing properties"},
        {"Criterion7_Reconciliation", "deleted batch job reconciliation"},
        {"Criterion8_DynamicWorkflowAndKill", "dynamic workflow and recursive kill"},
        {"Criterion9_StateMachineFuzz", "state machine fuzz"},
    };
    const std::string name = info.name();
    auto it = titles.find(name);
    const auto number = name.substr(9, 1);
    std::cout << "criterion " << number << " (" << (it == titles.end() ? name : it->second)
              << "): " << (info.result()->Passed() ? "PASS" : "FAIL") << std::endl;
  }
};

}  // namespace

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  spdlog::set_level(spdlog::level::warn);
  ::testing::UnitTest::GetInstance()->listeners().Append(new CriterionPrinter);
  return RUN_ALL_TESTS();
}
