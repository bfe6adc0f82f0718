#include "pilotgrid/launcher.hpp"

#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "pilotgrid/dag_engine.hpp"
#include "pilotgrid/error.hpp"

namespace pilotgrid {

namespace fs = std::filesystem;
using json = nlohmann::json;

// --- planning -------------------------------------------------------------------

std::vector<Assignment> plan_assignments(std::span<const Task> runnable, const NodeSet& idle,
                                         JobMode mode, const PlanOptions& options) {
  std::vector<const Task*> order;
  for (const auto& t : runnable) order.push_back(&t);
  std::stable_sort(order.begin(), order.end(), [](const Task* a, const Task* b) {
    if (a->num_nodes != b->num_nodes) return a->num_nodes > b->num_nodes;
    if (a->created_at() != b->created_at()) return a->created_at() < b->created_at();
    return a->id < b->id;
  });

  std::vector<int> free;
  for (const auto& n : idle.nodes) free.push_back(n.capacity_slots);

  std::vector<Assignment> out;
  for (const Task* t : order) {
    if (t->wall_time_minutes > 0 && idle.remaining_walltime_seconds &&
        t->wall_time_minutes * 60.0 > *idle.remaining_walltime_seconds) {
      continue;
    }
    Assignment a{t->id, {}, 1};
    if (mode == JobMode::Serial) {
      const int need = packing_units(t->node_packing_count);
      for (std::size_t i = 0; i < free.size(); ++i) {
        if (free[i] >= need) {
          free[i] -= need;
          a.nodes.push_back(idle.nodes[i].id);
          a.slots_per_node = need;
          break;
        }
      }
    } else {
      std::vector<std::size_t> picked;
      for (std::size_t i = 0; i < free.size() && static_cast<int>(picked.size()) < t->num_nodes; ++i)
        if (free[i] > 0) picked.push_back(i);
      if (static_cast<int>(picked.size()) == t->num_nodes) {
        for (auto i : picked) {
          free[i] = 0;
          a.nodes.push_back(idle.nodes[i].id);
        }
      }
    }
    if (!a.nodes.empty()) {
      out.push_back(std::move(a));
      continue;
    }
    if (options.waited_cycles) {
      auto it = options.waited_cycles->find(t->id);
      // aged task: nothing behind it may take the nodes it is waiting for
      if (it != options.waited_cycles->end() && it->second >= options.aging_cycles) break;
    }
  }
  return out;
}

ExitRecord handle_exit(const Task& task, const ExitOutcome& exit, std::string_view stderr_text) {
  (void)task;
  switch (exit.kind) {
    case ExitOutcome::Kind::Exited:
      if (exit.code == 0) return {TaskState::RUN_DONE, ""};
      return {TaskState::RUN_ERROR, exit_message(exit.code, stderr_text)};
    case ExitOutcome::Kind::Signalled:
      return {TaskState::RUN_ERROR, signal_message(exit.signal, stderr_text)};
    case ExitOutcome::Kind::Timeout:
      return {TaskState::RUN_TIMEOUT, "launcher walltime expired during run"};
    case ExitOutcome::Kind::Killed:
      return {TaskState::USER_KILLED, "killed by user"};
  }
  return {TaskState::RUN_ERROR, "unknown exit"};
}

fs::path task_work_dir(const fs::path& project, const Task& task) {
  return project / "data" / task.workflow / (task.name + "_" + task.id.short_str());
}

std::string make_owner_id() {
  std::random_device rd;
  std::ostringstream s;
  s << host_name() << ':' << ::getpid() << ':' << std::hex << rd();
  return s.str();
}

bool owner_is_dead(const std::string& owner) {
  auto last = owner.rfind(':');
  if (last == std::string::npos || last == 0) return false;
  auto mid = owner.rfind(':', last - 1);
  if (mid == std::string::npos) return false;
  if (owner.substr(0, mid) != host_name()) return false;
  try {
    const pid_t pid = static_cast<pid_t>(std::stol(owner.substr(mid + 1, last - mid - 1)));
    if (pid == ::getpid()) return false;
    return !process_alive(pid);
  } catch (const std::exception&) {
    return false;
  }
}

std::vector<DispatchEvent> read_dispatch_log(const fs::path& file) {
  std::vector<DispatchEvent> out;
  std::ifstream in(file);
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    auto j = json::parse(line);
    DispatchEvent e;
    e.kind = j.at("event") == "start" ? DispatchEvent::Kind::Start : DispatchEvent::Kind::End;
    e.task = Uuid::from_string(j.at("task").get<std::string>());
    e.nodes = j.value("nodes", std::vector<std::string>{});
    e.units = j.value("units", 0);
    e.at = from_micros(j.at("at_us").get<std::int64_t>());
    e.attempt = j.value("attempt", 0);
    out.push_back(std::move(e));
  }
  return out;
}

// --- transition work ------------------------------------------------------------

namespace {

struct WorkResult {
  Uuid id;
  std::vector<std::pair<TaskState, std::string>> transitions;
  std::optional<std::string> work_dir;
  bool reread = false;  // the hook may have changed the stored task
};

class WorkerPool {
 public:
  WorkerPool(int n, std::function<void()> notify) : notify_(std::move(notify)) {
    for (int i = 0; i < std::max(1, n); ++i) threads_.emplace_back([this] { loop(); });
  }
  ~WorkerPool() { stop(); }

  void submit(std::function<WorkResult()> job) {
    {
      std::lock_guard lock(mu_);
      jobs_.push_back(std::move(job));
      ++outstanding_;
    }
    cv_.notify_one();
  }

  std::vector<WorkResult> take() {
    std::lock_guard lock(mu_);
    std::vector<WorkResult> out;
    out.swap(results_);
    return out;
  }

  bool idle() {
    std::lock_guard lock(mu_);
    return outstanding_ == 0 && results_.empty();
  }

  void stop() {
    {
      std::lock_guard lock(mu_);
      stopping_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_)
      if (t.joinable()) t.join();
    threads_.clear();
  }

 private:
  void loop() {
    for (;;) {
      std::function<WorkResult()> job;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return stopping_ || !jobs_.empty(); });
        if (jobs_.empty()) return;
        job = std::move(jobs_.front());
        jobs_.pop_front();
      }
      WorkResult r = job();
      {
        std::lock_guard lock(mu_);
        results_.push_back(std::move(r));
        --outstanding_;
      }
      notify_();
    }
  }

  std::function<void()> notify_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::function<WorkResult()>> jobs_;
  std::vector<WorkResult> results_;
  int outstanding_ = 0;
  bool stopping_ = false;
  std::vector<std::thread> threads_;
};

Environment context_env(const Environment& base, const Task& task, TaskState state,
                        const fs::path& project, std::optional<int> exit_code) {
  Environment env = base;
  for (const auto& [k, v] : task.environment) env[k] = v;
  env["PILOTGRID_JOB_ID"] = task.id.str();
  env["PILOTGRID_JOB_STATE"] = std::string(to_string(state));
  env["PILOTGRID_JOB_NAME"] = task.name;
  env["PILOTGRID_WORKFLOW"] = task.workflow;
  env["PILOTGRID_DB_PATH"] = project.string();
  if (exit_code) env["PILOTGRID_EXIT_CODE"] = std::to_string(*exit_code);
  return env;
}

WorkResult stage_in(Task task, std::vector<Task> parents, fs::path work_dir) {
  WorkResult r{task.id, {}, work_dir.string(), false};
  try {
    fs::create_directories(work_dir);
    for (const auto& src : task.stage_in_sources) {
      fs::path from(src);
      auto dest = work_dir / from.filename();
      if (fs::is_directory(from)) {
        fs::copy(from, dest, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
      } else {
        fs::copy_file(from, dest, fs::copy_options::overwrite_existing);
      }
    }
    task.work_dir = work_dir.string();
    auto inputs = resolve_inputs(task, parents);
    materialize_inputs(inputs, work_dir);
    r.transitions.push_back({TaskState::STAGED_IN, ""});
  } catch (const std::exception& e) {
    r.transitions.push_back({TaskState::FAILED, std::string("stage-in failed: ") + e.what()});
  }
  return r;
}

WorkResult run_hook(const Task& task, const std::string& kind, const std::string& command,
                    Environment env, std::optional<TaskState> on_success, bool reread) {
  WorkResult r{task.id, {}, std::nullopt, reread};
  const fs::path wd = task.work_dir;
  const auto log = wd / (kind + ".log");
  ProcessSpec ps;
  ps.argv = {"/bin/sh", "-c", command};
  ps.cwd = wd;
  ps.env = std::move(env);
  ps.stdout_path = log;
  ps.stderr_path = log;
  ps.append_output = true;
  ps.die_with_parent = true;
  try {
    auto proc = Process::spawn(ps);
    auto st = proc.wait();
    if (!st.success()) {
      auto tail = read_tail(log, kMaxTailBytes);
      auto msg = st.kind == ExitStatus::Kind::Exited ? exit_message(st.code, tail)
                                                     : signal_message(st.signal, tail);
      r.transitions.push_back({TaskState::FAILED, kind + " hook failed: " + msg});
      r.reread = false;
      return r;
    }
  } catch (const Error& e) {
    r.transitions.push_back({TaskState::FAILED, kind + " hook failed: " + e.what()});
    r.reread = false;
    return r;
  }
  if (on_success) r.transitions.push_back({*on_success, ""});
  return r;
}

WorkResult stage_out(const Task& task) {
  WorkResult r{task.id, {}, std::nullopt, false};
  try {
    std::istringstream pats(task.stage_out_patterns);
    std::vector<std::string> patterns;
    for (std::string p; pats >> p;) patterns.push_back(p);
    fs::path dest(task.stage_out_dest);
    fs::create_directories(dest);
    for (const auto& entry : fs::directory_iterator(task.work_dir)) {
      if (!entry.is_regular_file()) continue;
      auto name = entry.path().filename().string();
      if (std::any_of(patterns.begin(), patterns.end(),
                      [&](const std::string& p) { return glob_match(p, name); }))
        fs::copy_file(entry.path(), dest / name, fs::copy_options::overwrite_existing);
    }
    r.transitions.push_back({TaskState::STAGED_OUT, ""});
    r.transitions.push_back({TaskState::JOB_FINISHED, ""});
  } catch (const std::exception& e) {
    r.transitions.push_back({TaskState::FAILED, std::string("stage-out failed: ") + e.what()});
  }
  return r;
}

std::string sanitize(std::string s) {
  for (auto& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '.') c = '_';
  return s;
}

}  // namespace

// --- coordinator ----------------------------------------------------------------

struct Launcher::Impl {
  enum class Phase { Ready, Busy, Queued, Running };

  struct Held {
    Task task;
    AppDefinition app;
    Phase phase = Phase::Ready;
    std::optional<Process> proc;
    std::vector<std::size_t> node_idx;
    int units = 0;
    bool kill_requested = false;
    bool timeout_requested = false;
    std::optional<Timestamp> term_sent;
    bool dropped = false;
    std::optional<int> exit_code;
  };

  TaskStore& store;
  NodeSet nodes;
  LauncherOptions opt;
  Clock clock = system_clock();
  TemplateRegistry templates;
  fs::path log_path;
  std::ofstream log;

  std::map<Uuid, Held> held;
  std::vector<StateChange> pending;
  std::unordered_map<Uuid, int> waited;
  std::vector<int> used_units;  // per node
  int max_packing = 1;
  LaunchSummary summary;

  std::mutex wake_mu;
  std::condition_variable wake_cv;
  bool woken = false;
  std::unique_ptr<WorkerPool> pool;

  Timestamp started;
  Timestamp last_acquire{};
  bool last_acquire_hit = true;

  Impl(TaskStore& s, NodeSet n, LauncherOptions o) : store(s), nodes(std::move(n)), opt(std::move(o)) {
    if (nodes.nodes.empty()) throw Error(ErrorCode::MissingEnvironment, "no compute nodes");
    if (opt.owner.empty()) opt.owner = make_owner_id();
    if (opt.base_env.empty()) opt.base_env = current_environment();
    if (opt.project_dir.empty()) opt.project_dir = fs::current_path();
    templates.load_directory(opt.project_dir / "templates");
    used_units.assign(nodes.nodes.size(), 0);
    fs::create_directories(opt.project_dir / "log");
    log_path = opt.project_dir / "log" / ("dispatch-" + sanitize(opt.owner) + ".jsonl");
  }

  void notify() {
    {
      std::lock_guard lock(wake_mu);
      woken = true;
    }
    wake_cv.notify_one();
  }

  void sleep_tick() {
    std::unique_lock lock(wake_mu);
    wake_cv.wait_for(lock, std::chrono::microseconds(static_cast<long>(opt.tick_seconds * 1e6)),
                     [&] { return woken; });
    woken = false;
  }

  void log_event(const char* event, const Held& h, Timestamp at, std::optional<ExitStatus> st = {}) {
    json j{{"event", event},
           {"task", h.task.id.str()},
           {"at_us", to_micros(at)},
           {"time", format_iso8601(at)},
           {"attempt", h.task.attempts()},
           {"units", h.units},
           {"owner", opt.owner}};
    std::vector<std::string> ids;
    for (auto i : h.node_idx) ids.push_back(nodes.nodes[i].id);
    j["nodes"] = ids;
    if (st) {
      if (st->kind == ExitStatus::Kind::Exited) j["exit_code"] = st->code;
      else j["signal"] = st->signal;
    }
    log << j.dump() << '\n';
    log.flush();
  }

  // -- filters

  TaskFilter scope_filter() const {
    TaskFilter f;
    if (opt.batch_tag) f.batch_tag = opt.batch_tag;
    if (opt.wf_filter) f.workflow = opt.wf_filter;
    if (opt.mode == JobMode::Serial) {
      f.max_nodes = 1;
      f.max_ranks_per_node = 1;
    } else {
      f.max_nodes = static_cast<int>(nodes.nodes.size());
    }
    return f;
  }

  TaskFilter acquire_filter() const {
    auto f = scope_filter();
    f.states = {TaskState::READY,         TaskState::RESTART_READY, TaskState::STAGED_IN,
                TaskState::PREPROCESSED,  TaskState::RUNNING,       TaskState::RUN_DONE,
                TaskState::RUN_ERROR,     TaskState::RUN_TIMEOUT,   TaskState::POSTPROCESSED,
                TaskState::STAGED_OUT};
    return f;
  }

  // -- local bookkeeping

  void record(Held& h, TaskState to, std::string message,
              std::optional<std::string> work_dir = std::nullopt,
              std::optional<Timestamp> when = std::nullopt) {
    auto at = std::max(when.value_or(clock()), h.task.last_event_at());
    h.task = advance(h.task, to, message, at);
    if (work_dir) h.task.work_dir = *work_dir;
    pending.push_back({h.task.id, to, std::move(message), at, std::move(work_dir)});
  }

  void drop_pending(const Uuid& id) {
    std::erase_if(pending, [&](const StateChange& c) { return c.id == id; });
  }

  void flush() {
    if (pending.empty()) return;
    for (;;) {
      try {
        store.update_batch(pending);
        break;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::IllegalTransition &&
            e.code() != ErrorCode::TimestampRegression && e.code() != ErrorCode::UnknownId)
          throw;
        auto bad = Uuid::parse(e.subject());
        if (!bad) throw;
        spdlog::warn("dropping local changes for {}: {}", bad->str(), e.what());
        drop_pending(*bad);
        resync(*bad);
        if (pending.empty()) return;
      }
    }
    std::vector<Uuid> finished;
    for (const auto& c : pending)
      if (is_terminal(c.to)) finished.push_back(c.id);
    pending.clear();
    if (!finished.empty()) {
      store.write([&](Txn& txn) {
        for (const auto& id : finished) dag::on_parent_terminal(txn, id);
      });
    }
    for (const auto& id : finished) {
      auto it = held.find(id);
      if (it != held.end() && it->second.phase != Phase::Running && it->second.phase != Phase::Busy)
        held.erase(it);
    }
  }

  /// The stored task diverged from our view (killed or edited elsewhere).
  void resync(const Uuid& id) {
    auto it = held.find(id);
    if (it == held.end()) return;
    auto& h = it->second;
    auto stored = store.get(id);
    if (stored && stored->state == TaskState::USER_KILLED) {
      kill_local(h);
      return;
    }
    if (h.phase == Phase::Running) {
      h.proc->signal(SIGTERM);
      h.kill_requested = true;
      h.term_sent = clock();
    } else if (h.phase == Phase::Busy) {
      h.dropped = true;
    } else {
      held.erase(it);
    }
    std::vector<Uuid> ids{id};
    store.release(opt.owner, ids);
  }

  void kill_local(Held& h) {
    drop_pending(h.task.id);
    if (h.phase == Phase::Running) {
      if (!h.kill_requested) {
        h.proc->signal(SIGTERM);
        h.kill_requested = true;
        h.term_sent = clock();
        ++summary.killed;
      }
    } else if (h.phase == Phase::Busy) {
      h.dropped = true;
    } else {
      held.erase(h.task.id);
    }
  }

  // -- pipeline

  void flush_before_hook() { flush(); }

  void step(const Uuid& id) {
    for (;;) {
      auto it = held.find(id);
      if (it == held.end()) return;
      Held& h = it->second;
      if (h.phase != Phase::Ready) return;
      const auto& app = h.app;
      switch (h.task.state) {
        case TaskState::READY:
        case TaskState::RESTART_READY: {
          std::vector<Task> parents;
          store.read([&](Txn& txn) {
            for (const auto& p : txn.parents(h.task.id)) parents.push_back(txn.require(p));
          });
          auto wd = h.task.work_dir.empty() ? task_work_dir(opt.project_dir, h.task)
                                            : fs::path(h.task.work_dir);
          h.phase = Phase::Busy;
          pool->submit([task = h.task, parents = std::move(parents), wd] {
            return stage_in(task, parents, wd);
          });
          return;
        }
        case TaskState::STAGED_IN:
          if (app.preprocess) {
            flush_before_hook();
            h.phase = Phase::Busy;
            pool->submit([task = h.task, cmd = *app.preprocess,
                          env = context_env(opt.base_env, h.task, h.task.state, opt.project_dir,
                                            std::nullopt)] {
              return run_hook(task, "preprocess", cmd, env, TaskState::PREPROCESSED, false);
            });
            return;
          }
          record(h, TaskState::PREPROCESSED, "");
          break;
        case TaskState::PREPROCESSED:
          h.phase = Phase::Queued;
          return;
        case TaskState::RUNNING:
          // acquired from a launcher that is gone
          record(h, TaskState::RUN_TIMEOUT, "run interrupted: owning launcher lost");
          ++summary.timed_out;
          break;
        case TaskState::RUN_DONE:
          if (app.postprocess) {
            flush_before_hook();
            h.phase = Phase::Busy;
            pool->submit([task = h.task, cmd = *app.postprocess,
                          env = context_env(opt.base_env, h.task, h.task.state, opt.project_dir,
                                            h.exit_code.value_or(0))] {
              return run_hook(task, "postprocess", cmd, env, TaskState::POSTPROCESSED, false);
            });
            return;
          }
          record(h, TaskState::POSTPROCESSED, "");
          break;
        case TaskState::RUN_ERROR:
        case TaskState::RUN_TIMEOUT: {
          auto next = resolve_error_policy(h.task, app.error_policy);
          if (next) {
            record(h, *next, "error policy " + app.error_policy.str());
            break;
          }
          if (!app.postprocess) {
            record(h, TaskState::FAILED, "error policy handler but application has no postprocess hook");
            break;
          }
          flush_before_hook();
          h.phase = Phase::Busy;
          pool->submit([task = h.task, cmd = *app.postprocess,
                        env = context_env(opt.base_env, h.task, h.task.state, opt.project_dir,
                                          h.exit_code)] {
            return run_hook(task, "postprocess", cmd, env, std::nullopt, true);
          });
          return;
        }
        case TaskState::POSTPROCESSED:
          if (!h.task.stage_out_patterns.empty() && !h.task.stage_out_dest.empty()) {
            h.phase = Phase::Busy;
            pool->submit([task = h.task] { return stage_out(task); });
            return;
          }
          record(h, TaskState::STAGED_OUT, "");
          break;
        case TaskState::STAGED_OUT:
          record(h, TaskState::JOB_FINISHED, "");
          break;
        default:
          // terminal; the entry goes once the change is committed
          if (std::none_of(pending.begin(), pending.end(),
                           [&](const StateChange& c) { return c.id == id; }))
            held.erase(it);
          return;
      }
    }
  }

  void apply_results() {
    for (auto& r : pool->take()) {
      auto it = held.find(r.id);
      if (it == held.end()) continue;
      Held& h = it->second;
      if (h.dropped) {
        held.erase(it);
        continue;
      }
      h.phase = Phase::Ready;
      try {
        for (std::size_t i = 0; i < r.transitions.size(); ++i) {
          record(h, r.transitions[i].first, r.transitions[i].second,
                 i == 0 ? r.work_dir : std::nullopt);
        }
        if (r.reread) {
          auto stored = store.get(r.id);
          if (!stored) {
            held.erase(it);
            continue;
          }
          h.task = *stored;
          if (h.task.state == TaskState::RUN_ERROR || h.task.state == TaskState::RUN_TIMEOUT)
            record(h, TaskState::FAILED, "error handler left the task unresolved");
        }
      } catch (const Error& e) {
        spdlog::error("task {}: {}", r.id.str(), e.what());
        drop_pending(r.id);
        resync(r.id);
        continue;
      }
      step(r.id);
    }
  }

  // -- execution

  int capacity() const {
    if (opt.mode == JobMode::PerTaskLaunch) return static_cast<int>(nodes.nodes.size());
    return static_cast<int>(nodes.nodes.size()) * max_packing;
  }

  int active_prerun() const {
    int n = 0;
    for (const auto& [id, h] : held) {
      auto s = h.task.state;
      if (h.phase == Phase::Running || s == TaskState::READY || s == TaskState::RESTART_READY ||
          s == TaskState::STAGED_IN || s == TaskState::PREPROCESSED)
        ++n;
    }
    return n;
  }

  bool has_free_capacity() const {
    for (int u : used_units)
      if (u == 0 || (opt.mode == JobMode::Serial && u < kNodeUnits)) return true;
    return false;
  }

  void acquire() {
    last_acquire = clock();
    const int want = 2 * capacity() - active_prerun();
    last_acquire_hit = false;
    if (want <= 0) return;
    auto tasks = store.acquire(acquire_filter(), static_cast<std::size_t>(want), opt.owner,
                               opt.lease_seconds);
    last_acquire_hit = !tasks.empty();
    for (auto& t : tasks) {
      auto app = store.find_app(t.application);
      if (!app) {
        spdlog::error("task {} names unknown application {}", t.id.str(), t.application);
        std::vector<Uuid> ids{t.id};
        store.release(opt.owner, ids);
        continue;
      }
      max_packing = std::max(max_packing, t.node_packing_count);
      auto id = t.id;
      Held h;
      h.task = std::move(t);
      h.app = std::move(*app);
      held.emplace(id, std::move(h));
      try {
        step(id);
      } catch (const Error& e) {
        spdlog::error("task {}: {}", id.str(), e.what());
        drop_pending(id);
        resync(id);
      }
    }
  }

  std::optional<double> remaining() const {
    if (!nodes.remaining_walltime_seconds) return std::nullopt;
    return *nodes.remaining_walltime_seconds - seconds_between(started, clock());
  }

  void dispatch() {
    std::vector<Task> runnable;
    for (const auto& [id, h] : held)
      if (h.phase == Phase::Queued) runnable.push_back(h.task);
    if (runnable.empty()) return;
    auto rem = remaining();
    if (rem && *rem < 2 * opt.cycle_seconds) return;

    NodeSet idle;
    idle.remaining_walltime_seconds = rem;
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < nodes.nodes.size(); ++i) {
      int free = opt.mode == JobMode::Serial ? kNodeUnits - used_units[i] : (used_units[i] ? 0 : 1);
      if (free > 0) idle.nodes.push_back({nodes.nodes[i].id, free});
      index[nodes.nodes[i].id] = i;
    }
    if (idle.nodes.empty()) return;
    PlanOptions po{&waited, opt.aging_cycles};
    for (const auto& a : plan_assignments(runnable, idle, opt.mode, po)) {
      auto& h = held.at(a.task);
      std::vector<std::size_t> idx;
      for (const auto& n : a.nodes) idx.push_back(index.at(n));
      launch(h, idx, opt.mode == JobMode::Serial ? a.slots_per_node : kNodeUnits);
    }
  }

  void launch(Held& h, const std::vector<std::size_t>& idx, int units) {
    waited.erase(h.task.id);
    const auto exe = h.app.executable;
    const auto id = h.task.id;
    std::string failure;
    if (!find_executable(exe)) failure = "executable not found: " + exe;

    if (failure.empty()) {
      try {
        auto cmd = render_launch_command(h.task, exe, templates, opt.launch_template, opt.mode);
        fs::path wd = h.task.work_dir.empty() ? task_work_dir(opt.project_dir, h.task)
                                              : fs::path(h.task.work_dir);
        ProcessSpec ps;
        ps.argv = {"/bin/sh", "-c", "exec " + cmd};
        ps.cwd = wd;
        ps.env = context_env(opt.base_env, h.task, TaskState::RUNNING, opt.project_dir, std::nullopt);
        ps.stdout_path = wd / "job.out";
        ps.stderr_path = wd / "job.err";
        ps.die_with_parent = true;
        auto at = clock();
        h.proc = Process::spawn(ps);
        h.node_idx = idx;
        h.units = units;
        for (auto i : idx) used_units[i] += units;
        h.phase = Phase::Running;
        record(h, TaskState::RUNNING, "", std::nullopt, at);
        log_event("start", h, h.task.last_event_at());
        ++summary.dispatched;
        return;
      } catch (const Error& e) {
        failure = e.what();
      }
    }
    h.phase = Phase::Ready;
    record(h, TaskState::RUNNING, "");
    ++summary.dispatched;
    record(h, TaskState::RUN_ERROR, std::string("SpawnFailure: ") + failure);
    ++summary.run_error;
    step(id);
  }

  void finish_run(const Uuid& id, ExitOutcome outcome, Timestamp at) {
    auto& h = held.at(id);
    if (h.kill_requested) {
      held.erase(id);
      return;
    }
    if (h.timeout_requested) outcome.kind = ExitOutcome::Kind::Timeout;
    if (outcome.kind == ExitOutcome::Kind::Exited) h.exit_code = outcome.code;
    const auto tail = read_tail(fs::path(h.task.work_dir) / "job.err", kMaxTailBytes);
    auto rec = handle_exit(h.task, outcome, tail);
    record(h, rec.state, rec.message, std::nullopt, at);
    switch (rec.state) {
      case TaskState::RUN_DONE: ++summary.run_done; break;
      case TaskState::RUN_ERROR: ++summary.run_error; break;
      case TaskState::RUN_TIMEOUT: ++summary.timed_out; break;
      default: break;
    }
    if (!h.timeout_requested) step(id);
  }

  void check_kills() {
    if (held.empty()) return;
    TaskFilter f;
    f.states = {TaskState::USER_KILLED};
    for (const auto& [id, h] : held) f.ids.push_back(id);
    for (const auto& t : store.query(f)) {
      auto it = held.find(t.id);
      if (it != held.end()) kill_local(it->second);
    }
  }

  void reclaim_dead_owners() {
    for (const auto& owner : store.lease_owners()) {
      if (owner == opt.owner || !owner_is_dead(owner)) continue;
      auto n = store.renew_or_release(owner, false);
      spdlog::info("reclaimed {} leases from dead launcher {}", n, owner);
    }
  }

  bool cycle() {
    flush();
    store.renew_or_release(opt.owner, true);
    check_kills();
    store.write([&](Txn& txn) { dag::refresh(txn); });
    reclaim_dead_owners();
    acquire();
    for (const auto& [id, h] : held)
      if (h.phase == Phase::Queued) ++waited[id];
    if (held.empty() && pending.empty() && pool->idle()) {
      auto f = scope_filter();
      for (auto s : kAllStates)
        if (!is_terminal(s)) f.states.push_back(s);
      return store.count(f) == 0;
    }
    return false;
  }

  void shutdown(const std::string& reason) {
    summary.reason = reason;
    for (auto& [id, h] : held) {
      if (h.phase != Phase::Running) continue;
      if (!h.kill_requested) h.timeout_requested = true;
      h.proc->signal(SIGTERM);
      h.term_sent = clock();
    }
    const auto deadline = plus_seconds(clock(), std::min(opt.kill_grace_seconds, 5.0));
    for (;;) {
      reap();
      bool any = std::any_of(held.begin(), held.end(),
                             [](const auto& kv) { return kv.second.phase == Phase::Running; });
      if (!any) break;
      if (clock() > deadline) {
        for (auto& [id, h] : held)
          if (h.phase == Phase::Running) h.proc->signal(SIGKILL);
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    pool->stop();
    for (auto& r : pool->take()) {
      auto it = held.find(r.id);
      if (it == held.end() || it->second.dropped) continue;
      it->second.phase = Phase::Ready;
      try {
        for (std::size_t i = 0; i < r.transitions.size(); ++i)
          record(it->second, r.transitions[i].first, r.transitions[i].second,
                 i == 0 ? r.work_dir : std::nullopt);
      } catch (const Error& e) {
        drop_pending(r.id);
      }
    }
    flush();
    store.renew_or_release(opt.owner, false);
  }

  void reap() {
    const auto now = clock();
    std::vector<std::pair<Uuid, ExitOutcome>> done;
    for (auto& [id, h] : held) {
      if (h.phase != Phase::Running) continue;
      auto st = h.proc->poll();
      if (!st) {
        if (h.term_sent && seconds_between(*h.term_sent, now) > opt.kill_grace_seconds)
          h.proc->signal(SIGKILL);
        continue;
      }
      for (auto i : h.node_idx) used_units[i] -= h.units;
      log_event("end", h, now, *st);
      h.node_idx.clear();
      h.proc.reset();
      h.phase = Phase::Ready;
      done.emplace_back(id, to_outcome(*st));
    }
    for (const auto& [id, outcome] : done) finish_run(id, outcome, now);
  }

  static ExitOutcome to_outcome(const ExitStatus& st) {
    if (st.kind == ExitStatus::Kind::Exited) return {ExitOutcome::Kind::Exited, st.code, 0};
    return {ExitOutcome::Kind::Signalled, 0, st.signal};
  }

  LaunchSummary run() {
    log.open(log_path, std::ios::app);
    pool = std::make_unique<WorkerPool>(opt.transition_workers, [this] { notify(); });
    started = clock();
    spdlog::info("launcher {} on {} nodes, mode {}", opt.owner, nodes.nodes.size(),
                 to_string(opt.mode));
    auto cycle_due = started;
    for (;;) {
      const auto now = clock();
      if (opt.stop && opt.stop->load()) {
        shutdown("signal");
        break;
      }
      if (auto rem = remaining(); rem && *rem <= opt.cycle_seconds) {
        shutdown("walltime");
        break;
      }
      reap();
      apply_results();
      if (now >= cycle_due) {
        cycle_due = plus_seconds(now, opt.cycle_seconds);
        if (cycle()) {
          summary.reason = "idle";
          break;
        }
      } else if (last_acquire_hit && has_free_capacity() &&
                 seconds_between(last_acquire, now) >= 0.1 &&
                 std::none_of(held.begin(), held.end(),
                              [](const auto& kv) { return kv.second.phase == Phase::Queued; })) {
        acquire();
      }
      dispatch();
      sleep_tick();
    }
    pool->stop();
    flush();
    return summary;
  }
};

Launcher::Launcher(TaskStore& store, NodeSet nodes, LauncherOptions options)
    : impl_(std::make_unique<Impl>(store, std::move(nodes), std::move(options))) {}

Launcher::~Launcher() = default;

LaunchSummary Launcher::run() { return impl_->run(); }

const std::string& Launcher::owner() const { return impl_->opt.owner; }

fs::path Launcher::dispatch_log() const { return impl_->log_path; }

}  // namespace pilotgrid
