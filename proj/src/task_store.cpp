#include "pilotgrid/task_store.hpp"

#include <sqlite3.h>

#include <algorithm>
#include <cctype>
#include <map>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "pilotgrid/error.hpp"

namespace pilotgrid {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string_view to_string(JobMode m) {
  return m == JobMode::Serial ? "serial" : "mpi";
}

JobMode parse_job_mode(std::string_view text) {
  if (text == "serial") return JobMode::Serial;
  if (text == "mpi") return JobMode::PerTaskLaunch;
  throw Error(ErrorCode::InvalidField, "job mode must be serial or mpi, got '" +
                                           std::string(text) + "'");
}

std::string_view to_string(BatchStatus s) {
  switch (s) {
    case BatchStatus::PendingSubmit: return "pending-submit";
    case BatchStatus::Queued: return "queued";
    case BatchStatus::Running: return "running";
    case BatchStatus::Finished: return "finished";
    case BatchStatus::Vanished: return "vanished";
  }
  return "vanished";
}

BatchStatus parse_batch_status(std::string_view text) {
  for (auto s : {BatchStatus::PendingSubmit, BatchStatus::Queued, BatchStatus::Running,
                 BatchStatus::Finished, BatchStatus::Vanished}) {
    if (to_string(s) == text) return s;
  }
  throw Error(ErrorCode::InvalidField, "unknown batch status '" + std::string(text) + "'");
}

namespace {

constexpr const char* kSchema = R"sql(
CREATE TABLE IF NOT EXISTS apps(
  name TEXT PRIMARY KEY,
  executable TEXT NOT NULL,
  preprocess TEXT,
  postprocess TEXT,
  error_policy TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS tasks(
  id TEXT PRIMARY KEY,
  created_us INTEGER NOT NULL,
  name TEXT NOT NULL,
  workflow TEXT NOT NULL,
  application TEXT NOT NULL,
  args TEXT NOT NULL,
  environment TEXT NOT NULL,
  num_nodes INTEGER NOT NULL,
  ranks_per_node INTEGER NOT NULL,
  node_packing_count INTEGER NOT NULL,
  wall_time_minutes REAL NOT NULL,
  input_files TEXT NOT NULL,
  stage_in_sources TEXT NOT NULL,
  stage_out_patterns TEXT NOT NULL,
  stage_out_dest TEXT NOT NULL,
  state TEXT NOT NULL,
  last_event_us INTEGER NOT NULL,
  event_count INTEGER NOT NULL,
  lock_owner TEXT,
  lease_expires_us INTEGER,
  lease_seconds REAL,
  lease_renewable INTEGER,
  batch_tag TEXT,
  work_dir TEXT NOT NULL DEFAULT '');
CREATE INDEX IF NOT EXISTS tasks_order ON tasks(created_us, id);
CREATE INDEX IF NOT EXISTS tasks_state ON tasks(state);
CREATE INDEX IF NOT EXISTS tasks_batch ON tasks(batch_tag);
CREATE INDEX IF NOT EXISTS tasks_owner ON tasks(lock_owner);
CREATE TABLE IF NOT EXISTS events(
  task_id TEXT NOT NULL,
  seq INTEGER NOT NULL,
  at_us INTEGER NOT NULL,
  state TEXT NOT NULL,
  message TEXT NOT NULL,
  PRIMARY KEY(task_id, seq));
CREATE TABLE IF NOT EXISTS edges(
  parent TEXT NOT NULL,
  child TEXT NOT NULL,
  PRIMARY KEY(parent, child));
CREATE INDEX IF NOT EXISTS edges_child ON edges(child);
CREATE TABLE IF NOT EXISTS batch_jobs(
  id TEXT PRIMARY KEY,
  queue TEXT NOT NULL,
  num_nodes INTEGER NOT NULL,
  walltime_minutes REAL NOT NULL,
  job_mode TEXT NOT NULL,
  task_ids TEXT NOT NULL,
  planned_starts TEXT NOT NULL,
  scheduler_id TEXT,
  status TEXT NOT NULL,
  created_us INTEGER NOT NULL);
CREATE TABLE IF NOT EXISTS locks(
  name TEXT PRIMARY KEY,
  owner TEXT NOT NULL,
  expires_us INTEGER NOT NULL);
)sql";

constexpr const char* kTaskColumns =
    "id, created_us, name, workflow, application, args, environment, num_nodes, "
    "ranks_per_node, node_packing_count, wall_time_minutes, input_files, stage_in_sources, "
    "stage_out_patterns, stage_out_dest, state, last_event_us, event_count, lock_owner, "
    "lease_expires_us, lease_seconds, lease_renewable, batch_tag, work_dir";

[[noreturn]] void throw_sqlite(sqlite3* db, const std::string& what) {
  const int code = db ? sqlite3_errcode(db) : SQLITE_ERROR;
  const std::string msg = db ? sqlite3_errmsg(db) : "no connection";
  const bool unreachable = code == SQLITE_BUSY || code == SQLITE_LOCKED ||
                           code == SQLITE_CANTOPEN || code == SQLITE_IOERR ||
                           code == SQLITE_CORRUPT || code == SQLITE_NOTADB;
  throw Error(unreachable ? ErrorCode::StoreUnreachable : ErrorCode::Io, what + ": " + msg);
}

/// Prepared statement with positional binding; reset on destruction.
class Stmt {
 public:
  Stmt(sqlite3* db, sqlite3_stmt* stmt, bool owned = false)
      : db_(db), stmt_(stmt), owned_(owned) {}
  Stmt(const Stmt&) = delete;
  Stmt& operator=(const Stmt&) = delete;
  ~Stmt() {
    if (owned_) {
      sqlite3_finalize(stmt_);
    } else {
      sqlite3_reset(stmt_);
      sqlite3_clear_bindings(stmt_);
    }
  }

  Stmt& bind(const std::string& v) {
    check(sqlite3_bind_text(stmt_, ++idx_, v.data(), static_cast<int>(v.size()),
                            SQLITE_TRANSIENT));
    return *this;
  }
  Stmt& bind(std::string_view v) { return bind(std::string(v)); }
  Stmt& bind(const char* v) { return bind(std::string(v)); }
  Stmt& bind(std::int64_t v) {
    check(sqlite3_bind_int64(stmt_, ++idx_, v));
    return *this;
  }
  Stmt& bind(int v) { return bind(static_cast<std::int64_t>(v)); }
  Stmt& bind(double v) {
    check(sqlite3_bind_double(stmt_, ++idx_, v));
    return *this;
  }
  Stmt& bind_null() {
    check(sqlite3_bind_null(stmt_, ++idx_));
    return *this;
  }
  template <class T>
  Stmt& bind(const std::optional<T>& v) {
    return v ? bind(*v) : bind_null();
  }

  /// true while rows are available.
  bool step() {
    const int rc = sqlite3_step(stmt_);
    if (rc == SQLITE_ROW) return true;
    if (rc == SQLITE_DONE) return false;
    throw_sqlite(db_, "step");
  }
  void exec() {
    while (step()) {
    }
  }

  bool is_null(int col) const { return sqlite3_column_type(stmt_, col) == SQLITE_NULL; }
  std::string text(int col) const {
    const auto* p = sqlite3_column_text(stmt_, col);
    return p ? std::string(reinterpret_cast<const char*>(p),
                           static_cast<std::size_t>(sqlite3_column_bytes(stmt_, col)))
             : std::string();
  }
  std::int64_t i64(int col) const { return sqlite3_column_int64(stmt_, col); }
  double real(int col) const { return sqlite3_column_double(stmt_, col); }

 private:
  void check(int rc) {
    if (rc != SQLITE_OK) throw_sqlite(db_, "bind");
  }
  sqlite3* db_;
  sqlite3_stmt* stmt_;
  bool owned_;
  int idx_ = 0;
};

std::string task_where(const TaskFilter& f, std::vector<std::function<void(Stmt&)>>& binds,
                       Timestamp now) {
  std::vector<std::string> clauses;
  if (!f.states.empty()) {
    std::string c = "state IN (";
    for (std::size_t i = 0; i < f.states.size(); ++i) {
      c += i ? ",?" : "?";
      binds.push_back([s = std::string(to_string(f.states[i]))](Stmt& st) { st.bind(s); });
    }
    clauses.push_back(c + ")");
  }
  if (f.name_contains) {
    clauses.push_back("instr(name, ?) > 0");
    binds.push_back([v = *f.name_contains](Stmt& st) { st.bind(v); });
  }
  if (f.workflow) {
    clauses.push_back("workflow = ?");
    binds.push_back([v = *f.workflow](Stmt& st) { st.bind(v); });
  }
  if (f.application) {
    clauses.push_back("application = ?");
    binds.push_back([v = *f.application](Stmt& st) { st.bind(v); });
  }
  if (f.min_nodes) {
    clauses.push_back("num_nodes >= ?");
    binds.push_back([v = *f.min_nodes](Stmt& st) { st.bind(v); });
  }
  if (f.max_nodes) {
    clauses.push_back("num_nodes <= ?");
    binds.push_back([v = *f.max_nodes](Stmt& st) { st.bind(v); });
  }
  if (f.max_ranks_per_node) {
    clauses.push_back("ranks_per_node <= ?");
    binds.push_back([v = *f.max_ranks_per_node](Stmt& st) { st.bind(v); });
  }
  if (f.batch_tag) {
    clauses.push_back("batch_tag = ?");
    binds.push_back([v = f.batch_tag->str()](Stmt& st) { st.bind(v); });
  }
  if (f.untagged) clauses.push_back("batch_tag IS NULL");
  const auto now_us = to_micros(now);
  if (f.lock_owner) {
    clauses.push_back("lock_owner = ? AND lease_expires_us > ?");
    binds.push_back([v = *f.lock_owner, now_us](Stmt& st) { st.bind(v).bind(now_us); });
  }
  if (f.unlocked) {
    clauses.push_back("(lock_owner IS NULL OR lease_expires_us <= ?)");
    binds.push_back([now_us](Stmt& st) { st.bind(now_us); });
  }
  if (!f.ids.empty()) {
    std::string c = "id IN (";
    for (std::size_t i = 0; i < f.ids.size(); ++i) {
      c += i ? ",?" : "?";
      binds.push_back([v = f.ids[i].str()](Stmt& st) { st.bind(v); });
    }
    clauses.push_back(c + ")");
  }
  std::string where;
  for (std::size_t i = 0; i < clauses.size(); ++i) {
    where += (i ? " AND " : " WHERE ") + clauses[i];
  }
  return where;
}

TaskState state_from_db(const std::string& s) {
  if (auto st = parse_state(s)) return *st;
  throw Error(ErrorCode::CorruptHistory, "unknown state '" + s + "' in store");
}

}  // namespace

struct Txn::Connection {
  sqlite3* db = nullptr;
  std::unordered_map<std::string, sqlite3_stmt*> cache;

  ~Connection() {
    for (auto& [_, s] : cache) sqlite3_finalize(s);
    if (db) sqlite3_close_v2(db);
  }

  Stmt prepare(const std::string& sql) {
    auto it = cache.find(sql);
    if (it == cache.end()) {
      sqlite3_stmt* s = nullptr;
      if (sqlite3_prepare_v2(db, sql.c_str(), -1, &s, nullptr) != SQLITE_OK) {
        throw_sqlite(db, "prepare '" + sql + "'");
      }
      it = cache.emplace(sql, s).first;
    }
    return Stmt(db, it->second);
  }

  /// Uncached; for SQL built per call.
  Stmt prepare_once(const std::string& sql) {
    sqlite3_stmt* s = nullptr;
    if (sqlite3_prepare_v2(db, sql.c_str(), -1, &s, nullptr) != SQLITE_OK) {
      throw_sqlite(db, "prepare '" + sql + "'");
    }
    return Stmt(db, s, true);
  }

  void exec(const char* sql) {
    char* err = nullptr;
    if (sqlite3_exec(db, sql, nullptr, nullptr, &err) != SQLITE_OK) {
      std::string msg = err ? err : "";
      sqlite3_free(err);
      throw Error(sqlite3_errcode(db) == SQLITE_BUSY ? ErrorCode::StoreUnreachable
                                                      : ErrorCode::Io,
                  std::string(sql).substr(0, 40) + ": " + msg);
    }
  }

  Task read_task_row(Stmt& st) {
    Task t;
    t.id = Uuid::from_string(st.text(0));
    t.name = st.text(2);
    t.workflow = st.text(3);
    t.application = st.text(4);
    t.args = st.text(5);
    t.environment = json::parse(st.text(6)).get<std::map<std::string, std::string>>();
    t.num_nodes = static_cast<int>(st.i64(7));
    t.ranks_per_node = static_cast<int>(st.i64(8));
    t.node_packing_count = static_cast<int>(st.i64(9));
    t.wall_time_minutes = st.real(10);
    t.input_files = st.text(11);
    t.stage_in_sources = json::parse(st.text(12)).get<std::vector<std::string>>();
    t.stage_out_patterns = st.text(13);
    t.stage_out_dest = st.text(14);
    t.state = state_from_db(st.text(15));
    if (!st.is_null(18)) {
      t.lease = Lease{st.text(18), from_micros(st.i64(19)), st.real(20), st.i64(21) != 0};
    }
    if (!st.is_null(22)) t.batch_tag = Uuid::from_string(st.text(22));
    t.work_dir = st.text(23);
    return t;
  }

  void load_history(Task& t) {
    auto st = prepare("SELECT at_us, state, message FROM events WHERE task_id = ? ORDER BY seq");
    st.bind(t.id.str());
    while (st.step()) {
      t.state_history.push_back({from_micros(st.i64(0)), state_from_db(st.text(1)), st.text(2)});
    }
  }
};

// --- Txn -------------------------------------------------------------------

std::optional<Task> Txn::get(const Uuid& id) {
  auto st = conn_.prepare(std::string("SELECT ") + kTaskColumns + " FROM tasks WHERE id = ?");
  st.bind(id.str());
  if (!st.step()) return std::nullopt;
  Task t = conn_.read_task_row(st);
  conn_.load_history(t);
  return t;
}

Task Txn::require(const Uuid& id) {
  if (auto t = get(id)) return *t;
  throw Error(ErrorCode::UnknownId, "no task " + id.str(), id.str());
}

std::vector<Task> Txn::query(const TaskFilter& filter, std::optional<std::size_t> limit) {
  std::vector<std::function<void(Stmt&)>> binds;
  std::string sql = std::string("SELECT ") + kTaskColumns + " FROM tasks" +
                    task_where(filter, binds, now_) + " ORDER BY created_us, id";
  if (limit) sql += " LIMIT " + std::to_string(*limit);
  std::vector<Task> out;
  {
    auto st = conn_.prepare_once(sql);
    for (auto& b : binds) b(st);
    while (st.step()) out.push_back(conn_.read_task_row(st));
  }
  for (auto& t : out) conn_.load_history(t);
  return out;
}

std::size_t Txn::count(const TaskFilter& filter) {
  std::vector<std::function<void(Stmt&)>> binds;
  auto st = conn_.prepare_once("SELECT count(*) FROM tasks" + task_where(filter, binds, now_));
  for (auto& b : binds) b(st);
  st.step();
  return static_cast<std::size_t>(st.i64(0));
}

std::optional<AppDefinition> Txn::find_app(std::string_view name) {
  auto st = conn_.prepare(
      "SELECT name, executable, preprocess, postprocess, error_policy FROM apps WHERE name = ?");
  st.bind(name);
  if (!st.step()) return std::nullopt;
  AppDefinition app;
  app.name = st.text(0);
  app.executable = st.text(1);
  if (!st.is_null(2)) app.preprocess = st.text(2);
  if (!st.is_null(3)) app.postprocess = st.text(3);
  app.error_policy = ErrorPolicy::parse(st.text(4));
  return app;
}

void Txn::insert(const Task& t) {
  if (t.state != TaskState::CREATED || t.state_history.size() != 1 ||
      t.state_history.front().state != TaskState::CREATED) {
    throw Error(ErrorCode::NotNew,
                "inserted task " + t.id.str() + " must be CREATED with a one-event history",
                t.id.str());
  }
  {
    auto st = conn_.prepare("SELECT 1 FROM tasks WHERE id = ?");
    st.bind(t.id.str());
    if (st.step()) throw Error(ErrorCode::DuplicateId, "task " + t.id.str() + " exists", t.id.str());
  }
  if (!find_app(t.application)) {
    throw Error(ErrorCode::UnknownApplication,
                "application '" + t.application + "' is not registered", t.application);
  }
  const auto& ev = t.state_history.front();
  {
    auto st = conn_.prepare(std::string("INSERT INTO tasks(") + kTaskColumns +
                            ") VALUES(?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?)");
    st.bind(t.id.str())
        .bind(to_micros(ev.at))
        .bind(t.name)
        .bind(t.workflow)
        .bind(t.application)
        .bind(t.args)
        .bind(json(t.environment).dump())
        .bind(t.num_nodes)
        .bind(t.ranks_per_node)
        .bind(t.node_packing_count)
        .bind(t.wall_time_minutes)
        .bind(t.input_files)
        .bind(json(t.stage_in_sources).dump())
        .bind(t.stage_out_patterns)
        .bind(t.stage_out_dest)
        .bind(to_string(t.state))
        .bind(to_micros(ev.at))
        .bind(1);
    if (t.lease) {
      st.bind(t.lease->owner)
          .bind(to_micros(t.lease->expires))
          .bind(t.lease->seconds)
          .bind(t.lease->renewable ? 1 : 0);
    } else {
      st.bind_null().bind_null().bind_null().bind_null();
    }
    st.bind(t.batch_tag ? std::optional<std::string>(t.batch_tag->str()) : std::nullopt)
        .bind(t.work_dir);
    st.exec();
  }
  auto st = conn_.prepare(
      "INSERT INTO events(task_id, seq, at_us, state, message) VALUES(?,?,?,?,?)");
  st.bind(t.id.str()).bind(0).bind(to_micros(ev.at)).bind(to_string(ev.state)).bind(ev.message);
  st.exec();
}

Task Txn::apply(const StateChange& change) {
  std::string from;
  std::int64_t last_us = 0;
  std::int64_t seq = 0;
  {
    auto st = conn_.prepare("SELECT state, last_event_us, event_count FROM tasks WHERE id = ?");
    st.bind(change.id.str());
    if (!st.step()) {
      throw Error(ErrorCode::UnknownId, "no task " + change.id.str(), change.id.str());
    }
    from = st.text(0);
    last_us = st.i64(1);
    seq = st.i64(2);
  }
  const TaskState from_state = state_from_db(from);
  if (!validate_transition(from_state, change.to)) {
    throw Error(ErrorCode::IllegalTransition,
                from + " -> " + std::string(to_string(change.to)) + " for task " +
                    change.id.str(),
                change.id.str());
  }
  if (to_micros(change.at) < last_us) {
    throw Error(ErrorCode::TimestampRegression,
                "event at " + format_iso8601(change.at) + " precedes " +
                    format_iso8601(from_micros(last_us)) + " for task " + change.id.str(),
                change.id.str());
  }
  {
    std::string sql =
        "UPDATE tasks SET state = ?, last_event_us = ?, event_count = event_count + 1";
    if (is_terminal(change.to)) {
      sql += ", lock_owner = NULL, lease_expires_us = NULL, lease_seconds = NULL, "
             "lease_renewable = NULL";
    }
    if (change.work_dir) sql += ", work_dir = ?";
    sql += " WHERE id = ?";
    auto st = conn_.prepare(sql);
    st.bind(to_string(change.to)).bind(to_micros(change.at));
    if (change.work_dir) st.bind(*change.work_dir);
    st.bind(change.id.str());
    st.exec();
  }
  {
    auto st = conn_.prepare(
        "INSERT INTO events(task_id, seq, at_us, state, message) VALUES(?,?,?,?,?)");
    st.bind(change.id.str())
        .bind(seq)
        .bind(to_micros(change.at))
        .bind(to_string(change.to))
        .bind(change.message);
    st.exec();
  }
  return require(change.id);
}

void Txn::set_batch_tag(const Uuid& id, std::optional<Uuid> tag) {
  auto st = conn_.prepare("UPDATE tasks SET batch_tag = ? WHERE id = ?");
  st.bind(tag ? std::optional<std::string>(tag->str()) : std::nullopt).bind(id.str());
  st.exec();
}

void Txn::set_lease(const Uuid& id, std::optional<Lease> lease) {
  auto st = conn_.prepare(
      "UPDATE tasks SET lock_owner = ?, lease_expires_us = ?, lease_seconds = ?, "
      "lease_renewable = ? WHERE id = ?");
  if (lease) {
    st.bind(lease->owner)
        .bind(to_micros(lease->expires))
        .bind(lease->seconds)
        .bind(lease->renewable ? 1 : 0);
  } else {
    st.bind_null().bind_null().bind_null().bind_null();
  }
  st.bind(id.str());
  st.exec();
}

void Txn::remove(const Uuid& id) {
  for (const char* sql : {"DELETE FROM tasks WHERE id = ?", "DELETE FROM events WHERE task_id = ?",
                          "DELETE FROM edges WHERE parent = ?", "DELETE FROM edges WHERE child = ?"}) {
    auto st = conn_.prepare(sql);
    st.bind(id.str());
    st.exec();
  }
}

void Txn::add_edge(const DependencyEdge& e) {
  auto st = conn_.prepare("INSERT OR IGNORE INTO edges(parent, child) VALUES(?, ?)");
  st.bind(e.parent.str()).bind(e.child.str());
  st.exec();
}

bool Txn::has_edge(const DependencyEdge& e) {
  auto st = conn_.prepare("SELECT 1 FROM edges WHERE parent = ? AND child = ?");
  st.bind(e.parent.str()).bind(e.child.str());
  return st.step();
}

std::vector<Uuid> Txn::parents(const Uuid& child) {
  auto st = conn_.prepare("SELECT parent FROM edges WHERE child = ? ORDER BY parent");
  st.bind(child.str());
  std::vector<Uuid> out;
  while (st.step()) out.push_back(Uuid::from_string(st.text(0)));
  return out;
}

std::vector<Uuid> Txn::children(const Uuid& parent) {
  auto st = conn_.prepare("SELECT child FROM edges WHERE parent = ? ORDER BY child");
  st.bind(parent.str());
  std::vector<Uuid> out;
  while (st.step()) out.push_back(Uuid::from_string(st.text(0)));
  return out;
}

std::vector<DependencyEdge> Txn::edges() {
  auto st = conn_.prepare("SELECT parent, child FROM edges ORDER BY parent, child");
  std::vector<DependencyEdge> out;
  while (st.step()) {
    out.push_back({Uuid::from_string(st.text(0)), Uuid::from_string(st.text(1))});
  }
  return out;
}

void Txn::put_batch_job(const BatchJobSpec& job) {
  json ids = json::array();
  for (const auto& id : job.task_ids) ids.push_back(id.str());
  auto st = conn_.prepare(
      "INSERT OR REPLACE INTO batch_jobs(id, queue, num_nodes, walltime_minutes, job_mode, "
      "task_ids, planned_starts, scheduler_id, status, created_us) VALUES(?,?,?,?,?,?,?,?,?,?)");
  st.bind(job.id.str())
      .bind(job.queue_name)
      .bind(job.num_nodes)
      .bind(job.walltime_minutes)
      .bind(to_string(job.job_mode))
      .bind(ids.dump())
      .bind(json(job.planned_starts).dump())
      .bind(job.scheduler_id)
      .bind(to_string(job.status))
      .bind(to_micros(job.created));
  st.exec();
}

namespace {

BatchJobSpec read_batch_row(Stmt& st) {
  BatchJobSpec job;
  job.id = Uuid::from_string(st.text(0));
  job.queue_name = st.text(1);
  job.num_nodes = static_cast<int>(st.i64(2));
  job.walltime_minutes = st.real(3);
  job.job_mode = parse_job_mode(st.text(4));
  for (const auto& s : json::parse(st.text(5))) {
    job.task_ids.push_back(Uuid::from_string(s.get<std::string>()));
  }
  job.planned_starts = json::parse(st.text(6)).get<std::vector<double>>();
  if (!st.is_null(7)) job.scheduler_id = st.text(7);
  job.status = parse_batch_status(st.text(8));
  job.created = from_micros(st.i64(9));
  return job;
}

constexpr const char* kBatchColumns =
    "id, queue, num_nodes, walltime_minutes, job_mode, task_ids, planned_starts, scheduler_id, "
    "status, created_us";

}  // namespace

std::optional<BatchJobSpec> Txn::get_batch_job(const Uuid& id) {
  auto st =
      conn_.prepare(std::string("SELECT ") + kBatchColumns + " FROM batch_jobs WHERE id = ?");
  st.bind(id.str());
  if (!st.step()) return std::nullopt;
  return read_batch_row(st);
}

std::vector<BatchJobSpec> Txn::batch_jobs(bool live_only) {
  std::string sql = std::string("SELECT ") + kBatchColumns + " FROM batch_jobs";
  if (live_only) sql += " WHERE status IN ('pending-submit', 'queued', 'running')";
  sql += " ORDER BY created_us, id";
  auto st = conn_.prepare(sql);
  std::vector<BatchJobSpec> out;
  while (st.step()) out.push_back(read_batch_row(st));
  return out;
}

bool Txn::try_lock(const std::string& name, const std::string& owner, double ttl_seconds,
                   const std::function<bool(const std::string&)>& owner_dead) {
  {
    auto st = conn_.prepare("SELECT owner, expires_us FROM locks WHERE name = ?");
    st.bind(name);
    if (st.step()) {
      const std::string holder = st.text(0);
      const bool expired = st.i64(1) <= to_micros(now_);
      if (holder != owner && !expired && !(owner_dead && owner_dead(holder))) return false;
    }
  }
  auto st = conn_.prepare("INSERT OR REPLACE INTO locks(name, owner, expires_us) VALUES(?,?,?)");
  st.bind(name).bind(owner).bind(to_micros(plus_seconds(now_, ttl_seconds)));
  st.exec();
  return true;
}

void Txn::unlock(const std::string& name, const std::string& owner) {
  auto st = conn_.prepare("DELETE FROM locks WHERE name = ? AND owner = ?");
  st.bind(name).bind(owner);
  st.exec();
}

// --- TaskStore -------------------------------------------------------------

struct TaskStore::Impl {
  fs::path path;
  Options options;
  Txn::Connection conn;
  bool in_txn = false;
};

TaskStore::TaskStore(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
TaskStore::TaskStore(TaskStore&&) noexcept = default;
TaskStore& TaskStore::operator=(TaskStore&&) noexcept = default;
TaskStore::~TaskStore() = default;

TaskStore TaskStore::create(const fs::path& db_file, Options options) {
  if (db_file.has_parent_path()) fs::create_directories(db_file.parent_path());
  auto impl = std::make_unique<Impl>();
  impl->path = db_file;
  impl->options = std::move(options);
  if (sqlite3_open_v2(db_file.c_str(), &impl->conn.db,
                      SQLITE_OPEN_READWRITE | SQLITE_OPEN_CREATE | SQLITE_OPEN_NOMUTEX,
                      nullptr) != SQLITE_OK) {
    throw_sqlite(impl->conn.db, "open " + db_file.string());
  }
  sqlite3_busy_timeout(impl->conn.db,
                       static_cast<int>(impl->options.busy_timeout_seconds * 1000));
  impl->conn.exec("PRAGMA journal_mode=WAL");
  impl->conn.exec("PRAGMA synchronous=FULL");
  impl->conn.exec("BEGIN IMMEDIATE");
  impl->conn.exec(kSchema);
  impl->conn.exec("COMMIT");
  return TaskStore(std::move(impl));
}

TaskStore TaskStore::open(const fs::path& db_file, Options options) {
  if (!fs::exists(db_file)) {
    throw Error(ErrorCode::StoreUnreachable, "no store at " + db_file.string());
  }
  return create(db_file, std::move(options));
}

const fs::path& TaskStore::path() const { return impl_->path; }

Timestamp TaskStore::now() const { return impl_->options.clock(); }

void TaskStore::begin(bool write) {
  if (impl_->in_txn) {
    throw Error(ErrorCode::Io, "nested store transaction");
  }
  impl_->conn.exec(write ? "BEGIN IMMEDIATE" : "BEGIN");
  impl_->in_txn = true;
}

void TaskStore::commit() {
  impl_->conn.exec("COMMIT");
  impl_->in_txn = false;
}

void TaskStore::rollback() noexcept {
  if (!impl_->in_txn) return;
  sqlite3_exec(impl_->conn.db, "ROLLBACK", nullptr, nullptr, nullptr);
  impl_->in_txn = false;
}

Txn TaskStore::make_txn() { return Txn(impl_->conn, now()); }

void TaskStore::register_app(const AppDefinition& app) {
  app.validate();
  write([&](Txn& txn) {
    if (txn.find_app(app.name)) {
      throw Error(ErrorCode::DuplicateApp, "application '" + app.name + "' exists", app.name);
    }
    auto st = impl_->conn.prepare(
        "INSERT INTO apps(name, executable, preprocess, postprocess, error_policy) "
        "VALUES(?,?,?,?,?)");
    st.bind(app.name)
        .bind(app.executable)
        .bind(app.preprocess)
        .bind(app.postprocess)
        .bind(app.error_policy.str());
    st.exec();
  });
}

std::optional<AppDefinition> TaskStore::find_app(std::string_view name) {
  return read([&](Txn& txn) { return txn.find_app(name); });
}

std::vector<AppDefinition> TaskStore::apps() {
  return read([&](Txn& txn) {
    std::vector<std::string> names;
    {
      auto st = impl_->conn.prepare("SELECT name FROM apps ORDER BY name");
      while (st.step()) names.push_back(st.text(0));
    }
    std::vector<AppDefinition> out;
    for (const auto& n : names) out.push_back(*txn.find_app(n));
    return out;
  });
}

std::vector<Uuid> TaskStore::insert(std::span<const Task> tasks) {
  if (tasks.empty()) return {};
  return write([&](Txn& txn) {
    std::vector<Uuid> ids;
    ids.reserve(tasks.size());
    for (const auto& t : tasks) {
      txn.insert(t);
      ids.push_back(t.id);
    }
    return ids;
  });
}

std::vector<Task> TaskStore::query(const TaskFilter& filter) {
  return read([&](Txn& txn) { return txn.query(filter); });
}

std::optional<Task> TaskStore::get(const Uuid& id) {
  return read([&](Txn& txn) { return txn.get(id); });
}

std::size_t TaskStore::count(const TaskFilter& filter) {
  return read([&](Txn& txn) { return txn.count(filter); });
}

Uuid TaskStore::resolve_prefix(std::string_view prefix) {
  if (auto full = Uuid::parse(prefix)) {
    if (get(*full)) return *full;
    throw Error(ErrorCode::UnknownId, "no task " + std::string(prefix), std::string(prefix));
  }
  const bool hexish = !prefix.empty() && std::all_of(prefix.begin(), prefix.end(), [](char c) {
    return std::isxdigit(static_cast<unsigned char>(c)) || c == '-';
  });
  if (!hexish) {
    throw Error(ErrorCode::UnknownId, "no task matches '" + std::string(prefix) + "'",
                std::string(prefix));
  }
  std::string lower(prefix);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return read([&](Txn&) {
    auto st = impl_->conn.prepare("SELECT id FROM tasks WHERE substr(id, 1, ?) = ? LIMIT 2");
    st.bind(static_cast<int>(lower.size())).bind(lower);
    std::vector<std::string> hits;
    while (st.step()) hits.push_back(st.text(0));
    if (hits.empty()) {
      throw Error(ErrorCode::UnknownId, "no task matches '" + lower + "'", lower);
    }
    if (hits.size() > 1) {
      throw Error(ErrorCode::AmbiguousPrefix, "'" + lower + "' matches several tasks", lower);
    }
    return Uuid::from_string(hits.front());
  });
}

std::size_t TaskStore::update_batch(std::span<const StateChange> changes) {
  if (changes.empty()) return 0;
  return write([&](Txn& txn) {
    for (const auto& c : changes) txn.apply(c);
    return changes.size();
  });
}

std::vector<Task> TaskStore::acquire(const TaskFilter& filter, std::size_t limit,
                                     const std::string& owner, double lease_seconds) {
  if (owner.empty()) throw Error(ErrorCode::InvalidField, "lease owner is empty");
  if (limit == 0) return {};
  return write([&](Txn& txn) {
    TaskFilter f = filter;
    f.unlocked = true;
    auto picked = txn.query(f, limit);
    const Lease lease{owner, plus_seconds(txn.now(), lease_seconds), lease_seconds, true};
    for (auto& t : picked) {
      txn.set_lease(t.id, lease);
      t.lease = lease;
    }
    return picked;
  });
}

std::size_t TaskStore::renew_or_release(const std::string& owner, bool renew) {
  return write([&](Txn& txn) {
    const auto now_us = to_micros(txn.now());
    if (renew) {
      auto st = impl_->conn.prepare(
          "UPDATE tasks SET lease_expires_us = ? + CAST(lease_seconds * 1000000 AS INTEGER) "
          "WHERE lock_owner = ? AND lease_expires_us > ? AND lease_renewable = 1");
      st.bind(now_us).bind(owner).bind(now_us);
      st.exec();
    } else {
      auto st = impl_->conn.prepare(
          "UPDATE tasks SET lock_owner = NULL, lease_expires_us = NULL, lease_seconds = NULL, "
          "lease_renewable = NULL WHERE lock_owner = ?");
      st.bind(owner);
      st.exec();
    }
    return static_cast<std::size_t>(sqlite3_changes(impl_->conn.db));
  });
}

std::size_t TaskStore::release(const std::string& owner, std::span<const Uuid> ids) {
  if (ids.empty()) return 0;
  return write([&](Txn&) {
    std::size_t n = 0;
    for (const auto& id : ids) {
      auto st = impl_->conn.prepare(
          "UPDATE tasks SET lock_owner = NULL, lease_expires_us = NULL, lease_seconds = NULL, "
          "lease_renewable = NULL WHERE id = ? AND lock_owner = ?");
      st.bind(id.str()).bind(owner);
      st.exec();
      n += static_cast<std::size_t>(sqlite3_changes(impl_->conn.db));
    }
    return n;
  });
}

std::vector<std::string> TaskStore::lease_owners() {
  return read([&](Txn&) {
    auto st = impl_->conn.prepare(
        "SELECT DISTINCT lock_owner FROM tasks WHERE lock_owner IS NOT NULL ORDER BY 1");
    std::vector<std::string> out;
    while (st.step()) out.push_back(st.text(0));
    return out;
  });
}

std::vector<std::vector<StateEvent>> TaskStore::histories(const TaskFilter& filter) {
  auto tasks = query(filter);
  std::vector<std::vector<StateEvent>> out;
  out.reserve(tasks.size());
  for (auto& t : tasks) out.push_back(std::move(t.state_history));
  return out;
}

}  // namespace pilotgrid
