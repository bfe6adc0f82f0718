#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "pilotgrid/error.hpp"
#include "pilotgrid/task_store.hpp"
#include "support.hpp"

using namespace pilotgrid;
using testsupport::TempDir;
using enum TaskState;

namespace {

TaskSpec spec(const std::string& name, const std::string& wf = "wf", int nodes = 1) {
  TaskSpec s;
  s.name = name;
  s.workflow = wf;
  s.application = "app";
  s.num_nodes = nodes;
  return s;
}

TaskStore fresh(const TempDir& dir, StoreOptions o = {}) {
  auto store = TaskStore::create(dir / "db.sqlite3", std::move(o));
  store.register_app({"app", "/bin/true", {}, {}, ErrorPolicy::fail()});
  return store;
}

std::vector<Uuid> ids_of(const std::vector<Task>& ts) {
  std::vector<Uuid> out;
  for (const auto& t : ts) out.push_back(t.id);
  return out;
}

}  // namespace

TEST(TaskStore, OpenMissingIsUnreachable) {
  TempDir dir;
  try {
    TaskStore::open(dir / "nope.sqlite3");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::StoreUnreachable);
  }
}

TEST(TaskStore, RoundTripsEveryField) {
  TempDir dir;
  auto store = fresh(dir);
  auto s = spec("full");
  s.args = "--x 'quoted arg'";
  s.environment = {{"A", "1"}, {"B", "two words"}};
  s.node_packing_count = 4;
  s.wall_time_minutes = 12.5;
  s.input_files = "*.dat *.cfg";
  s.stage_in_sources = {"/a/b", "/c"};
  s.stage_out_patterns = "*.h5";
  s.stage_out_dest = "/out";
  auto t = new_task(s, store.now());
  store.insert(std::span(&t, 1));
  auto back = store.get(t.id);
  ASSERT_TRUE(back);
  EXPECT_EQ(*back, t);
}

TEST(TaskStore, InsertValidates) {
  TempDir dir;
  auto store = fresh(dir);
  auto t = new_task(spec("a"), store.now());
  store.insert(std::span(&t, 1));
  auto expect_code = [&](const Task& bad, ErrorCode code) {
    try {
      store.insert(std::span(&bad, 1));
      ADD_FAILURE();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), code);
    }
  };
  expect_code(t, ErrorCode::DuplicateId);
  auto s = spec("b");
  s.application = "ghost";
  expect_code(new_task(s, store.now()), ErrorCode::UnknownApplication);
  expect_code(advance(new_task(spec("c"), store.now()), READY, "", store.now()), ErrorCode::NotNew);

  // a failing group leaves nothing behind
  std::vector<Task> group{new_task(spec("d"), store.now()), t};
  EXPECT_THROW(store.insert(group), Error);
  EXPECT_EQ(store.count(), 1u);
}

TEST(TaskStore, AppRegistry) {
  TempDir dir;
  auto store = fresh(dir);
  try {
    store.register_app({"app", "/bin/false", {}, {}, ErrorPolicy::fail()});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DuplicateApp);
  }
  AppDefinition hooks{"hooks", "/bin/echo", "pre.sh", "post.sh", ErrorPolicy::retry(3)};
  store.register_app(hooks);
  EXPECT_EQ(store.find_app("hooks"), hooks);
  EXPECT_FALSE(store.find_app("missing"));
  EXPECT_EQ(store.apps().size(), 2u);
}

TEST(TaskStore, UpdateBatchIsAllOrNothing) {
  TempDir dir;
  auto store = fresh(dir);
  std::vector<Task> ts{new_task(spec("a"), store.now()), new_task(spec("b"), store.now())};
  store.insert(ts);
  const auto now = store.now();
  std::vector<StateChange> bad{{ts[0].id, READY, "", now, {}}, {ts[1].id, RUNNING, "", now, {}}};
  try {
    store.update_batch(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IllegalTransition);
    EXPECT_EQ(e.subject(), ts[1].id.str());
  }
  EXPECT_EQ(store.get(ts[0].id)->state, CREATED);

  std::vector<StateChange> good{{ts[0].id, READY, "ok", now, {}},
                                {ts[1].id, READY, "", now, std::string("/w")}};
  EXPECT_EQ(store.update_batch(good), 2u);
  EXPECT_EQ(store.get(ts[0].id)->state, READY);
  EXPECT_EQ(store.get(ts[1].id)->work_dir, "/w");

  std::vector<StateChange> back{{ts[0].id, STAGED_IN, "", now - std::chrono::seconds(1), {}}};
  try {
    store.update_batch(back);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TimestampRegression);
  }
}

TEST(TaskStore, PrefixResolution) {
  TempDir dir;
  auto store = fresh(dir);
  std::vector<Task> ts;
  for (int i = 0; i < 40; ++i) ts.push_back(new_task(spec("t"), store.now()));
  store.insert(ts);
  EXPECT_EQ(store.resolve_prefix(ts[0].id.str()), ts[0].id);
  EXPECT_EQ(store.resolve_prefix(ts[0].id.short_str()), ts[0].id);
  auto upper = ts[0].id.short_str();
  std::transform(upper.begin(), upper.end(), upper.begin(), ::toupper);
  EXPECT_EQ(store.resolve_prefix(upper), ts[0].id);

  // with 40 ids some single hex digit is shared
  std::map<char, int> first;
  for (const auto& t : ts) ++first[t.id.str()[0]];
  auto shared = std::find_if(first.begin(), first.end(), [](auto& kv) { return kv.second > 1; });
  ASSERT_NE(shared, first.end());
  try {
    store.resolve_prefix(std::string(1, shared->first));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::AmbiguousPrefix);
  }
  for (const char* bad : {"zz", "", "00000000-0000-0000-0000-000000000000"}) {
    try {
      store.resolve_prefix(bad);
      ADD_FAILURE() << bad;
    } catch (const Error& e) {
      EXPECT_TRUE(e.code() == ErrorCode::UnknownId || e.code() == ErrorCode::AmbiguousPrefix) << bad;
    }
  }
}

TEST(TaskStore, LeasesAndAcquire) {
  TempDir dir;
  ManualClock clock;
  StoreOptions o;
  o.clock = clock.clock();
  auto store = fresh(dir, o);
  std::vector<Task> ts;
  for (int i = 0; i < 6; ++i) ts.push_back(new_task(spec("t" + std::to_string(i)), clock.now()));
  store.insert(ts);

  auto a = store.acquire({}, 4, "A", 10);
  auto b = store.acquire({}, 4, "B", 10);
  EXPECT_EQ(a.size(), 4u);
  EXPECT_EQ(b.size(), 2u);
  for (const auto& t : a) EXPECT_EQ(t.lease->owner, "A");
  EXPECT_TRUE(store.acquire({}, 4, "C", 10).empty());
  EXPECT_EQ(store.lease_owners(), (std::vector<std::string>{"A", "B"}));

  TaskFilter mine;
  mine.lock_owner = "A";
  EXPECT_EQ(store.count(mine), 4u);

  // B's leases lapse; A renews
  clock.advance_seconds(6);
  EXPECT_EQ(store.renew_or_release("A", true), 4u);
  clock.advance_seconds(6);
  auto c = store.acquire({}, 10, "C", 10);
  EXPECT_EQ(ids_of(c), ids_of(b));
  EXPECT_EQ(store.count(mine), 4u);

  EXPECT_EQ(store.release("A", std::vector<Uuid>{a[0].id}), 1u);
  EXPECT_EQ(store.renew_or_release("A", false), 3u);
  EXPECT_EQ(store.count(mine), 0u);
  EXPECT_THROW(store.acquire({}, 1, "", 10), Error);
}

TEST(TaskStore, TerminalStateDropsLease) {
  TempDir dir;
  auto store = fresh(dir);
  auto t = new_task(spec("t"), store.now());
  store.insert(std::span(&t, 1));
  store.acquire({}, 1, "A", 60);
  std::vector<StateChange> kill{{t.id, USER_KILLED, "", store.now(), {}}};
  store.update_batch(kill);
  EXPECT_FALSE(store.get(t.id)->lease);
}

TEST(TaskStore, NamedLocks) {
  TempDir dir;
  ManualClock clock;
  StoreOptions o;
  o.clock = clock.clock();
  auto store = fresh(dir, o);
  auto lock = [&](const std::string& who, std::function<bool(const std::string&)> dead = {}) {
    return store.write([&](Txn& txn) { return txn.try_lock("svc", who, 30, dead); });
  };
  EXPECT_TRUE(lock("a"));
  EXPECT_TRUE(lock("a"));
  EXPECT_FALSE(lock("b"));
  EXPECT_TRUE(lock("b", [](const std::string& o) { return o == "a"; }));
  clock.advance_seconds(31);
  EXPECT_TRUE(lock("a"));
  store.write([&](Txn& txn) { txn.unlock("svc", "a"); });
  EXPECT_TRUE(lock("c"));
}

TEST(TaskStore, BatchJobRows) {
  TempDir dir;
  auto store = fresh(dir);
  BatchJobSpec j;
  j.id = Uuid::random();
  j.queue_name = "q";
  j.num_nodes = 3;
  j.walltime_minutes = 42.5;
  j.job_mode = JobMode::PerTaskLaunch;
  j.task_ids = {Uuid::random(), Uuid::random()};
  j.planned_starts = {0, 12.5};
  j.created = store.now();
  store.write([&](Txn& txn) { txn.put_batch_job(j); });
  EXPECT_EQ(store.read([&](Txn& txn) { return txn.get_batch_job(j.id); }), j);
  j.status = BatchStatus::Finished;
  j.scheduler_id = "77";
  store.write([&](Txn& txn) { txn.put_batch_job(j); });
  EXPECT_EQ(store.read([&](Txn& txn) { return txn.get_batch_job(j.id); }), j);
  EXPECT_TRUE(store.read([&](Txn& txn) { return txn.batch_jobs(true); }).empty());
  EXPECT_EQ(store.read([&](Txn& txn) { return txn.batch_jobs(false); }).size(), 1u);
}

// Random operations against an in-memory reference model.
TEST(TaskStore, MatchesReferenceModel) {
  TempDir dir;
  ManualClock clock;
  StoreOptions o;
  o.clock = clock.clock();
  auto store = fresh(dir, o);
  std::mt19937 rng(17);
  std::map<Uuid, Task> model;
  const std::vector<std::string> wfs{"alpha", "beta", "gamma"};
  const auto tag = Uuid::random();

  for (int step = 0; step < 3000; ++step) {
    clock.advance_seconds(0.001 * (rng() % 5));
    const int op = static_cast<int>(rng() % 10);
    if (op < 3 || model.empty()) {
      auto t = new_task(spec("n" + std::to_string(step % 17), wfs[rng() % 3], 1 + rng() % 4),
                        clock.now());
      store.insert(std::span(&t, 1));
      model.emplace(t.id, t);
    } else if (op < 8) {
      auto it = std::next(model.begin(), static_cast<long>(rng() % model.size()));
      auto next = successors(it->second.state);
      if (next.empty()) continue;
      const auto to = next[rng() % next.size()];
      std::vector<StateChange> c{{it->first, to, "m" + std::to_string(step), clock.now(), {}}};
      store.update_batch(c);
      it->second = advance(it->second, to, "m" + std::to_string(step), clock.now());
      if (is_terminal(to)) it->second.lease.reset();
    } else if (op < 9) {
      auto it = std::next(model.begin(), static_cast<long>(rng() % model.size()));
      std::optional<Uuid> v;
      if (rng() % 2) v = tag;
      store.write([&](Txn& txn) { txn.set_batch_tag(it->first, v); });
      it->second.batch_tag = v;
    } else {
      auto it = std::next(model.begin(), static_cast<long>(rng() % model.size()));
      store.write([&](Txn& txn) { txn.remove(it->first); });
      model.erase(it);
    }

    if (step % 100 != 0) continue;
    // random filter, evaluated independently on the model
    TaskFilter f;
    if (rng() % 2) f.states = {kAllStates[rng() % kAllStates.size()], kAllStates[rng() % kAllStates.size()]};
    if (rng() % 3 == 0) f.workflow = wfs[rng() % 3];
    if (rng() % 3 == 0) f.name_contains = std::to_string(rng() % 10);
    if (rng() % 3 == 0) f.min_nodes = 1 + static_cast<int>(rng() % 4);
    if (rng() % 3 == 0) f.max_nodes = 1 + static_cast<int>(rng() % 4);
    if (rng() % 4 == 0) f.batch_tag = tag;
    if (rng() % 4 == 0) f.untagged = true;
    std::vector<const Task*> expected;
    for (const auto& [id, t] : model) {
      if (!f.states.empty() && std::find(f.states.begin(), f.states.end(), t.state) == f.states.end()) continue;
      if (f.workflow && t.workflow != *f.workflow) continue;
      if (f.name_contains && t.name.find(*f.name_contains) == std::string::npos) continue;
      if (f.min_nodes && t.num_nodes < *f.min_nodes) continue;
      if (f.max_nodes && t.num_nodes > *f.max_nodes) continue;
      if (f.batch_tag && t.batch_tag != f.batch_tag) continue;
      if (f.untagged && t.batch_tag) continue;
      expected.push_back(&t);
    }
    std::sort(expected.begin(), expected.end(), [](const Task* a, const Task* b) {
      return a->created_at() != b->created_at() ? a->created_at() < b->created_at() : a->id < b->id;
    });
    auto got = store.query(f);
    ASSERT_EQ(got.size(), expected.size()) << "step " << step;
    for (std::size_t i = 0; i < got.size(); ++i) ASSERT_EQ(got[i], *expected[i]) << "step " << step;
    ASSERT_EQ(store.count(f), expected.size());
  }
}

// Commits survive a SIGKILL of the writer; a group is never half-applied.
TEST(TaskStore, DurableAcrossKill) {
  TempDir dir;
  { fresh(dir); }
  constexpr int kGroup = 5;
  int pipefd[2];
  ASSERT_EQ(::pipe(pipefd), 0);
  const pid_t child = ::fork();
  ASSERT_GE(child, 0);
  if (child == 0) {
    ::close(pipefd[0]);
    auto store = TaskStore::open(dir / "db.sqlite3");
    for (int g = 0;; ++g) {
      std::vector<Task> ts;
      for (int i = 0; i < kGroup; ++i) ts.push_back(new_task(spec("g" + std::to_string(g)), store.now()));
      store.insert(ts);
      char c = 1;
      if (::write(pipefd[1], &c, 1) != 1) ::_exit(1);
    }
  }
  ::close(pipefd[1]);
  int acknowledged = 0;
  char c;
  while (acknowledged < 200 && ::read(pipefd[0], &c, 1) == 1) ++acknowledged;
  ::kill(child, SIGKILL);
  ::waitpid(child, nullptr, 0);
  while (::read(pipefd[0], &c, 1) == 1) ++acknowledged;
  ::close(pipefd[0]);

  auto store = TaskStore::open(dir / "db.sqlite3");
  const auto total = store.count();
  EXPECT_EQ(total % kGroup, 0u);
  EXPECT_GE(total, static_cast<std::size_t>(acknowledged) * kGroup);
  std::map<std::string, int> per_group;
  for (const auto& t : store.query()) ++per_group[t.name];
  for (const auto& [g, n] : per_group) EXPECT_EQ(n, kGroup) << g;
}

// Several processes acquiring concurrently never share a task.
TEST(TaskStore, ConcurrentAcquireIsDisjoint) {
  TempDir dir;
  {
    auto store = fresh(dir);
    std::vector<Task> ts;
    for (int i = 0; i < 400; ++i) ts.push_back(new_task(spec("t"), store.now()));
    store.insert(ts);
  }
  constexpr int kProcs = 4;
  std::vector<pid_t> pids;
  for (int p = 0; p < kProcs; ++p) {
    const pid_t pid = ::fork();
    ASSERT_GE(pid, 0);
    if (pid == 0) {
      auto store = TaskStore::open(dir / "db.sqlite3");
      const auto owner = "owner" + std::to_string(p);
      std::ofstream out(dir / owner);
      for (;;) {
        auto got = store.acquire({}, 7, owner, 600);
        if (got.empty()) break;
        for (const auto& t : got) out << t.id.str() << '\n';
      }
      out.close();
      ::_exit(0);
    }
    pids.push_back(pid);
  }
  for (auto pid : pids) {
    int status = 0;
    ::waitpid(pid, &status, 0);
    EXPECT_TRUE(WIFEXITED(status) && WEXITSTATUS(status) == 0);
  }
  std::multiset<std::string> all;
  for (int p = 0; p < kProcs; ++p) {
    std::istringstream in(testsupport::slurp(dir / ("owner" + std::to_string(p))));
    for (std::string id; in >> id;) all.insert(id);
  }
  EXPECT_EQ(all.size(), 400u);
  EXPECT_EQ(std::set<std::string>(all.begin(), all.end()).size(), 400u);
}
