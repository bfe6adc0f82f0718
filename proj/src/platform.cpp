#include "pilotgrid/platform.hpp"

#include <signal.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "pilotgrid/error.hpp"

namespace pilotgrid {

namespace fs = std::filesystem;

std::string_view to_string(SchedulerStatus s) {
  switch (s) {
    case SchedulerStatus::Queued: return "queued";
    case SchedulerStatus::Running: return "running";
    case SchedulerStatus::Finished: return "finished";
    case SchedulerStatus::Vanished: return "vanished";
  }
  return "?";
}

namespace {

int rank(SchedulerStatus s) {
  switch (s) {
    case SchedulerStatus::Queued: return 0;
    case SchedulerStatus::Running: return 1;
    default: return 2;
  }
}

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_ws(std::string_view s) {
  std::istringstream in{std::string(s)};
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  out << text;
  if (!out) throw Error(ErrorCode::Io, "cannot write " + p.string(), p.string());
}

std::string minutes_str(double minutes) {
  std::ostringstream s;
  s.precision(10);
  s << minutes;
  return s.str();
}

std::optional<std::string> lookup(const Environment& env, const std::string& key) {
  auto it = env.find(key);
  if (it == env.end() || it->second.empty()) return std::nullopt;
  return it->second;
}

std::string require(const Environment& env, const std::string& key) {
  auto v = lookup(env, key);
  if (!v) throw Error(ErrorCode::MissingEnvironment, key + " is not set", key);
  return *v;
}

std::optional<double> time_limit_seconds(const Environment& env) {
  auto v = lookup(env, kEnvTimeLimit);
  if (!v) return std::nullopt;
  try {
    return std::stod(*v) * 60.0;
  } catch (const std::exception&) {
    throw Error(ErrorCode::MissingEnvironment, std::string(kEnvTimeLimit) + " is not a number",
                kEnvTimeLimit);
  }
}

std::optional<double> end_time_remaining(const Environment& env, const std::string& key,
                                         Timestamp now) {
  auto v = lookup(env, key);
  if (!v) return time_limit_seconds(env);
  double end = std::stod(*v);
  return std::max(0.0, end - static_cast<double>(to_micros(now)) / 1e6);
}

std::vector<NodeSpec> to_nodes(const std::vector<std::string>& ids) {
  std::vector<NodeSpec> out;
  for (const auto& id : ids) out.push_back({id, 1});
  return out;
}

std::vector<std::string> read_nodefile(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorCode::MissingEnvironment, "cannot read nodefile " + p.string(), p.string());
  std::vector<std::string> ids;
  std::set<std::string> seen;
  for (std::string line; std::getline(in, line);) {
    auto id = trim(line);
    if (id.empty() || id[0] == '#') continue;
    // PBS repeats a host once per core
    if (seen.insert(id).second) ids.push_back(id);
  }
  return ids;
}

std::string join(std::span<const std::string> items, std::string_view sep) {
  std::string out;
  for (const auto& s : items) {
    if (!out.empty()) out += sep;
    out += s;
  }
  return out;
}

std::string epoch_after(Timestamp now, double minutes) {
  return std::to_string(to_micros(now) / 1'000'000 + static_cast<std::int64_t>(minutes * 60));
}

std::atomic<int> g_file_counter{0};

}  // namespace

std::vector<std::string> expand_hostlist(std::string_view list) {
  std::vector<std::string> tokens;
  std::string cur;
  int depth = 0;
  for (char c : list) {
    if (c == '[') ++depth;
    if (c == ']') --depth;
    if (c == ',' && depth == 0) {
      tokens.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  tokens.push_back(cur);

  std::vector<std::string> out;
  for (auto& tok : tokens) {
    tok = trim(tok);
    if (tok.empty()) continue;
    auto open = tok.find('[');
    if (open == std::string::npos) {
      out.push_back(tok);
      continue;
    }
    auto close = tok.find(']', open);
    if (close == std::string::npos)
      throw Error(ErrorCode::MissingEnvironment, "malformed host list: " + std::string(list));
    auto prefix = tok.substr(0, open);
    auto suffix = tok.substr(close + 1);
    std::stringstream ranges(tok.substr(open + 1, close - open - 1));
    for (std::string r; std::getline(ranges, r, ',');) {
      auto dash = r.find('-');
      if (dash == std::string::npos) {
        out.push_back(prefix + r + suffix);
        continue;
      }
      auto lo_s = r.substr(0, dash);
      auto hi_s = r.substr(dash + 1);
      long lo = std::stol(lo_s), hi = std::stol(hi_s);
      for (long i = lo; i <= hi; ++i) {
        auto num = std::to_string(i);
        if (num.size() < lo_s.size()) num.insert(0, lo_s.size() - num.size(), '0');
        out.push_back(prefix + num + suffix);
      }
    }
  }
  return out;
}

std::optional<std::string> detect_platform_name(const Environment& env) {
  if (lookup(env, kEnvNodefile)) return "mock";
  if (lookup(env, kEnvLocalNodes)) return "local";
  if (lookup(env, "COBALT_PARTNAME")) return "cobalt";
  if (lookup(env, "SLURM_JOB_NODELIST")) return "slurm";
  if (lookup(env, "PBS_NODEFILE")) return "pbs";
  return std::nullopt;
}

NodeSet detect_nodes(std::string_view platform, const Environment& env, Timestamp now) {
  NodeSet set;
  if (platform == "mock") {
    set.nodes = to_nodes(read_nodefile(require(env, kEnvNodefile)));
    set.remaining_walltime_seconds = time_limit_seconds(env);
  } else if (platform == "local") {
    int n = std::stoi(require(env, kEnvLocalNodes));
    if (n < 1) throw Error(ErrorCode::MissingEnvironment, "no local nodes", kEnvLocalNodes);
    for (int i = 0; i < n; ++i) set.nodes.push_back({"local" + std::to_string(i), 1});
    set.remaining_walltime_seconds = time_limit_seconds(env);
  } else if (platform == "slurm") {
    set.nodes = to_nodes(expand_hostlist(require(env, "SLURM_JOB_NODELIST")));
    set.remaining_walltime_seconds = end_time_remaining(env, "SLURM_JOB_END_TIME", now);
  } else if (platform == "cobalt") {
    // COBALT_PARTNAME lists numeric node ids and id ranges: "12-15,20"
    std::stringstream parts(require(env, "COBALT_PARTNAME"));
    std::vector<std::string> ids;
    for (std::string p; std::getline(parts, p, ',');) {
      p = trim(p);
      if (p.empty()) continue;
      auto dash = p.find('-');
      if (dash == std::string::npos) {
        ids.push_back(p);
      } else {
        for (long i = std::stol(p.substr(0, dash)); i <= std::stol(p.substr(dash + 1)); ++i)
          ids.push_back(std::to_string(i));
      }
    }
    set.nodes = to_nodes(ids);
    set.remaining_walltime_seconds = end_time_remaining(env, "COBALT_ENDTIME", now);
  } else if (platform == "pbs") {
    set.nodes = to_nodes(read_nodefile(require(env, "PBS_NODEFILE")));
    set.remaining_walltime_seconds = time_limit_seconds(env);
  } else {
    throw Error(ErrorCode::InvalidField, "unknown platform: " + std::string(platform),
                std::string(platform));
  }
  if (set.nodes.empty())
    throw Error(ErrorCode::MissingEnvironment, "allocation has no nodes", std::string(platform));
  return set;
}

// --- ProcessScheduler ----------------------------------------------------------

struct ProcessScheduler::Job {
  JobRecord record;
  fs::path script;
  std::optional<Process> process;
  std::vector<int> node_slots;
  std::optional<Timestamp> term_sent;
  bool removed = false;
};

ProcessScheduler::ProcessScheduler(Options options) : options_(std::move(options)) {
  if (options_.node_pool < 1)
    throw Error(ErrorCode::InvalidField, "node pool must be positive", "node_pool");
  node_busy_.assign(static_cast<std::size_t>(options_.node_pool), false);
  fs::create_directories(options_.work_dir);
}

ProcessScheduler::~ProcessScheduler() {
  std::lock_guard lock(mu_);
  for (auto& job : jobs_) {
    if (job->process && !job->process->finished()) {
      job->process->signal(SIGTERM);
    }
  }
  for (auto& job : jobs_) {
    if (job->process && !job->process->finished()) {
      for (int i = 0; i < 100 && !job->process->poll(); ++i) ::usleep(20'000);
      // the Process destructor SIGKILLs whatever is left
    }
  }
}

std::string ProcessScheduler::name() const {
  return options_.convention == Convention::Nodefile ? "mock" : "local";
}

std::string ProcessScheduler::submit(const std::string& script, const BatchJobSpec& spec) {
  std::lock_guard lock(mu_);
  if (spec.num_nodes < 1 || spec.num_nodes > options_.node_pool)
    throw Error(ErrorCode::SubmitFailure,
                "job needs " + std::to_string(spec.num_nodes) + " nodes, pool has " +
                    std::to_string(options_.node_pool));
  if (spec.walltime_minutes <= 0)
    throw Error(ErrorCode::SubmitFailure, "walltime must be positive");
  auto job = std::make_unique<Job>();
  job->record.id = std::to_string(next_id_++);
  job->record.num_nodes = spec.num_nodes;
  job->record.walltime_minutes = spec.walltime_minutes;
  job->script = options_.work_dir / ("job-" + job->record.id + ".sh");
  write_file(job->script, script);
  auto id = job->record.id;
  jobs_.push_back(std::move(job));
  return id;
}

void ProcessScheduler::advance() {
  std::lock_guard lock(mu_);
  advance_locked();
}

void ProcessScheduler::advance_locked() {
  const auto now = options_.clock();
  for (auto& job : jobs_) {
    if (!job->process || job->process->finished()) continue;
    if (auto st = job->process->poll()) {
      job->record.exit = *st;
      job->record.ended = now;
      if (!job->removed) job->record.status = SchedulerStatus::Finished;
      for (int slot : job->node_slots) node_busy_[static_cast<std::size_t>(slot)] = false;
      job->node_slots.clear();
      continue;
    }
    const double limit = job->record.walltime_minutes * 60.0;
    const double elapsed = seconds_between(*job->record.started, now);
    if (!job->term_sent && elapsed > limit) {
      job->process->signal(SIGTERM);
      job->term_sent = now;
    } else if (job->term_sent &&
               seconds_between(*job->term_sent, now) > options_.kill_grace_seconds) {
      job->process->signal(SIGKILL);
    }
  }

  // strict FIFO: the head of the queue blocks everything behind it
  for (auto& job : jobs_) {
    if (job->record.status != SchedulerStatus::Queued) continue;
    std::vector<int> free;
    for (std::size_t i = 0; i < node_busy_.size(); ++i)
      if (!node_busy_[i]) free.push_back(static_cast<int>(i));
    if (static_cast<int>(free.size()) < job->record.num_nodes) break;
    free.resize(static_cast<std::size_t>(job->record.num_nodes));
    std::vector<std::string> names;
    for (int slot : free) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "node%04d", slot);
      names.emplace_back(buf);
    }
    ProcessSpec ps;
    ps.argv = {"/bin/sh", job->script.string()};
    ps.cwd = options_.work_dir;
    ps.env = options_.base_env;
    for (auto& [k, v] : job_environment(names, job->record.walltime_minutes)) ps.env[k] = v;
    ps.stdout_path = options_.work_dir / ("job-" + job->record.id + ".out");
    ps.stderr_path = options_.work_dir / ("job-" + job->record.id + ".err");
    try {
      job->process = Process::spawn(ps);
    } catch (const Error& e) {
      spdlog::error("batch job {} failed to start: {}", job->record.id, e.what());
      job->record.status = SchedulerStatus::Finished;
      job->record.started = job->record.ended = now;
      continue;
    }
    for (int slot : free) node_busy_[static_cast<std::size_t>(slot)] = true;
    job->node_slots = free;
    job->record.nodes = names;
    job->record.started = now;
    job->record.status = SchedulerStatus::Running;
  }
}

SchedulerStatus ProcessScheduler::status(const std::string& scheduler_id) {
  std::lock_guard lock(mu_);
  advance_locked();
  for (auto& job : jobs_)
    if (job->record.id == scheduler_id) return job->record.status;
  return SchedulerStatus::Vanished;
}

void ProcessScheduler::remove(const std::string& scheduler_id) {
  std::lock_guard lock(mu_);
  for (auto& job : jobs_) {
    if (job->record.id != scheduler_id) continue;
    if (job->record.status == SchedulerStatus::Finished) return;
    job->removed = true;
    job->record.status = SchedulerStatus::Vanished;
    if (job->process && !job->process->finished()) {
      job->process->signal(SIGTERM);
      job->term_sent = options_.clock();
    }
  }
}

std::optional<ProcessScheduler::JobRecord> ProcessScheduler::record(const std::string& scheduler_id) {
  std::lock_guard lock(mu_);
  for (auto& job : jobs_)
    if (job->record.id == scheduler_id) return job->record;
  return std::nullopt;
}

int ProcessScheduler::free_nodes() {
  std::lock_guard lock(mu_);
  return static_cast<int>(std::count(node_busy_.begin(), node_busy_.end(), false));
}

NodeSet ProcessScheduler::detect_environment(const Environment& env) const {
  return detect_nodes(name(), env, options_.clock());
}

Environment ProcessScheduler::job_environment(std::span<const std::string> node_ids,
                                              double walltime_minutes) const {
  Environment env;
  env[kEnvTimeLimit] = minutes_str(walltime_minutes);
  if (options_.convention == Convention::LocalCount) {
    env[kEnvLocalNodes] = std::to_string(node_ids.size());
  } else {
    auto path = options_.work_dir /
                ("nodes-" + std::to_string(::getpid()) + "-" + std::to_string(g_file_counter++));
    write_file(path, join(node_ids, "\n") + "\n");
    env[kEnvNodefile] = path.string();
  }
  return env;
}

std::unique_ptr<ProcessScheduler> mock_scheduler(Clock clock, int node_pool,
                                                 const fs::path& work_dir, Environment base_env) {
  ProcessScheduler::Options o;
  o.base_env = std::move(base_env);
  o.clock = std::move(clock);
  o.node_pool = node_pool;
  o.work_dir = work_dir;
  o.convention = ProcessScheduler::Convention::Nodefile;
  return std::make_unique<ProcessScheduler>(std::move(o));
}

std::unique_ptr<ProcessScheduler> local_platform(int virtual_nodes, const fs::path& work_dir,
                                                 Environment base_env) {
  ProcessScheduler::Options o;
  o.base_env = std::move(base_env);
  o.node_pool = virtual_nodes;
  o.work_dir = work_dir;
  o.convention = ProcessScheduler::Convention::LocalCount;
  return std::make_unique<ProcessScheduler>(std::move(o));
}

// --- CommandScheduler ----------------------------------------------------------

CommandScheduler::CommandScheduler(Options options) : options_(std::move(options)) {
  if (options_.script_dir.empty()) options_.script_dir = fs::temp_directory_path();
  fs::create_directories(options_.script_dir);
}

CommandScheduler::CommandResult CommandScheduler::run_client(std::vector<std::string> argv) const {
  if (!options_.client_dir.empty()) argv[0] = (options_.client_dir / argv[0]).string();
  auto stem = options_.script_dir / (".client-" + std::to_string(::getpid()) + "-" +
                                     std::to_string(g_file_counter++));
  auto out_path = fs::path(stem.string() + ".out");
  auto err_path = fs::path(stem.string() + ".err");
  ProcessSpec ps;
  ps.argv = argv;
  ps.env = current_environment();
  ps.stdout_path = out_path;
  ps.stderr_path = err_path;
  CommandResult r;
  try {
    auto proc = Process::spawn(ps);
    auto st = proc.wait();
    r.exit_code = st.kind == ExitStatus::Kind::Exited ? st.code : 128 + st.signal;
    r.out = read_file(out_path);
    if (r.exit_code != 0) {
      auto err = trim(read_file(err_path));
      if (!err.empty()) r.out += (r.out.empty() ? "" : "\n") + err;
    }
  } catch (const Error& e) {
    r.exit_code = 127;
    r.out = e.what();
  }
  std::error_code ec;
  fs::remove(out_path, ec);
  fs::remove(err_path, ec);
  return r;
}

fs::path CommandScheduler::write_script(const std::string& script, const BatchJobSpec& spec) const {
  auto path = options_.script_dir / ("pilotgrid-" + spec.id.str() + ".sh");
  write_file(path, script);
  ::chmod(path.c_str(), 0755);
  return path;
}

std::string CommandScheduler::submit(const std::string& script, const BatchJobSpec& spec) {
  auto path = write_script(script, spec);
  auto r = run_client(submit_argv(path, spec));
  if (r.exit_code != 0)
    throw Error(ErrorCode::SubmitFailure,
                name() + " submission exited " + std::to_string(r.exit_code) + ": " + trim(r.out));
  auto id = parse_submit(r.out);
  if (id.empty()) throw Error(ErrorCode::SubmitFailure, name() + " returned no job id: " + r.out);
  std::lock_guard lock(mu_);
  last_seen_[id] = SchedulerStatus::Queued;
  return id;
}

SchedulerStatus CommandScheduler::status(const std::string& scheduler_id) {
  auto q = query(scheduler_id);
  std::lock_guard lock(mu_);
  auto it = last_seen_.find(scheduler_id);
  std::optional<SchedulerStatus> prev;
  if (it != last_seen_.end()) prev = it->second;
  SchedulerStatus now;
  if (q) {
    now = *q;
  } else {
    // the client forgot the job: it either ran to completion or was removed
    now = prev == SchedulerStatus::Running ? SchedulerStatus::Finished : SchedulerStatus::Vanished;
  }
  if (prev) {
    if (rank(*prev) == 2) now = *prev;
    else if (rank(now) < rank(*prev)) now = *prev;
  }
  last_seen_[scheduler_id] = now;
  return now;
}

void CommandScheduler::remove(const std::string& scheduler_id) {
  auto r = run_client(remove_argv(scheduler_id));
  if (r.exit_code != 0)
    spdlog::warn("{} remove {} exited {}: {}", name(), scheduler_id, r.exit_code, trim(r.out));
}

namespace {

std::string ceil_minutes(double m) { return std::to_string(static_cast<long>(std::ceil(m))); }

std::string hhmmss(double minutes) {
  long secs = static_cast<long>(std::ceil(minutes * 60));
  char buf[32];
  std::snprintf(buf, sizeof buf, "%02ld:%02ld:%02ld", secs / 3600, (secs / 60) % 60, secs % 60);
  return buf;
}

class SlurmScheduler final : public CommandScheduler {
 public:
  using CommandScheduler::CommandScheduler;
  std::string name() const override { return "slurm"; }

  NodeSet detect_environment(const Environment& env) const override {
    return detect_nodes("slurm", env, options_.clock());
  }
  Environment job_environment(std::span<const std::string> node_ids,
                              double walltime_minutes) const override {
    return {{"SLURM_JOB_NODELIST", join(node_ids, ",")},
            {"SLURM_JOB_NUM_NODES", std::to_string(node_ids.size())},
            {"SLURM_JOB_END_TIME", epoch_after(options_.clock(), walltime_minutes)}};
  }

 protected:
  std::vector<std::string> submit_argv(const fs::path& script,
                                       const BatchJobSpec& spec) const override {
    std::vector<std::string> argv{"sbatch", "--parsable", "-N", std::to_string(spec.num_nodes),
                                  "-t", ceil_minutes(spec.walltime_minutes),
                                  "-J", "pilotgrid-" + spec.id.short_str()};
    if (!spec.queue_name.empty()) {
      argv.push_back("-p");
      argv.push_back(spec.queue_name);
    }
    argv.push_back(script.string());
    return argv;
  }
  std::string parse_submit(const std::string& out) const override {
    auto line = trim(out);
    return line.substr(0, line.find(';'));
  }
  std::optional<SchedulerStatus> query(const std::string& id) const override {
    auto r = run_client({"squeue", "-h", "-j", id, "-o", "%T"});
    auto state = r.exit_code == 0 ? trim(r.out) : std::string();
    if (state.empty()) {
      auto acct = run_client({"sacct", "-n", "-X", "-P", "-j", id, "-o", "State"});
      if (acct.exit_code != 0) return std::nullopt;
      std::istringstream in(acct.out);
      std::getline(in, state);
      state = trim(state);
      if (state.empty()) return std::nullopt;
    }
    auto word = split_ws(state).front();
    if (word == "PENDING" || word == "CONFIGURING" || word == "REQUEUED" || word == "SUSPENDED")
      return SchedulerStatus::Queued;
    if (word == "RUNNING" || word == "COMPLETING") return SchedulerStatus::Running;
    if (word == "CANCELLED") return SchedulerStatus::Vanished;
    return SchedulerStatus::Finished;
  }
  std::vector<std::string> remove_argv(const std::string& id) const override {
    return {"scancel", id};
  }
};

class CobaltScheduler final : public CommandScheduler {
 public:
  using CommandScheduler::CommandScheduler;
  std::string name() const override { return "cobalt"; }

  NodeSet detect_environment(const Environment& env) const override {
    return detect_nodes("cobalt", env, options_.clock());
  }
  Environment job_environment(std::span<const std::string> node_ids,
                              double walltime_minutes) const override {
    return {{"COBALT_PARTNAME", join(node_ids, ",")},
            {"COBALT_JOBSIZE", std::to_string(node_ids.size())},
            {"COBALT_ENDTIME", epoch_after(options_.clock(), walltime_minutes)}};
  }

 protected:
  std::vector<std::string> submit_argv(const fs::path& script,
                                       const BatchJobSpec& spec) const override {
    std::vector<std::string> argv{"qsub", "-n", std::to_string(spec.num_nodes), "-t",
                                  ceil_minutes(spec.walltime_minutes), "--mode", "script"};
    if (!spec.queue_name.empty()) {
      argv.push_back("-q");
      argv.push_back(spec.queue_name);
    }
    argv.push_back(script.string());
    return argv;
  }
  std::string parse_submit(const std::string& out) const override {
    // qsub may print warnings first; the id is the last line
    std::istringstream in(out);
    std::string id;
    for (std::string line; std::getline(in, line);)
      if (!trim(line).empty()) id = trim(line);
    return id;
  }
  std::optional<SchedulerStatus> query(const std::string& id) const override {
    auto r = run_client({"qstat", "--header", "JobId:State", id});
    if (r.exit_code != 0) return std::nullopt;
    std::istringstream in(r.out);
    for (std::string line; std::getline(in, line);) {
      auto words = split_ws(line);
      if (words.size() < 2 || words[0] != id) continue;
      const auto& s = words[1];
      if (s == "queued" || s == "user_hold" || s == "admin_hold" || s == "dep_hold")
        return SchedulerStatus::Queued;
      if (s == "starting" || s == "running" || s == "exiting") return SchedulerStatus::Running;
      if (s == "killing") return SchedulerStatus::Vanished;
      return SchedulerStatus::Finished;
    }
    return std::nullopt;
  }
  std::vector<std::string> remove_argv(const std::string& id) const override {
    return {"qdel", id};
  }
};

class PbsScheduler final : public CommandScheduler {
 public:
  using CommandScheduler::CommandScheduler;
  std::string name() const override { return "pbs"; }

  NodeSet detect_environment(const Environment& env) const override {
    return detect_nodes("pbs", env, options_.clock());
  }
  Environment job_environment(std::span<const std::string> node_ids,
                              double walltime_minutes) const override {
    auto path = options_.script_dir /
                ("pbs-nodes-" + std::to_string(::getpid()) + "-" + std::to_string(g_file_counter++));
    write_file(path, join(node_ids, "\n") + "\n");
    return {{"PBS_NODEFILE", path.string()},
            {"PBS_NUM_NODES", std::to_string(node_ids.size())},
            {kEnvTimeLimit, minutes_str(walltime_minutes)}};
  }

 protected:
  std::vector<std::string> submit_argv(const fs::path& script,
                                       const BatchJobSpec& spec) const override {
    std::vector<std::string> argv{"qsub", "-l", "select=" + std::to_string(spec.num_nodes), "-l",
                                  "walltime=" + hhmmss(spec.walltime_minutes), "-N",
                                  "pilotgrid-" + spec.id.short_str()};
    if (!spec.queue_name.empty()) {
      argv.push_back("-q");
      argv.push_back(spec.queue_name);
    }
    argv.push_back(script.string());
    return argv;
  }
  std::string parse_submit(const std::string& out) const override { return trim(out); }
  std::optional<SchedulerStatus> query(const std::string& id) const override {
    auto r = run_client({"qstat", "-x", "-f", id});
    if (r.exit_code != 0) return std::nullopt;
    std::istringstream in(r.out);
    for (std::string line; std::getline(in, line);) {
      auto eq = line.find('=');
      if (eq == std::string::npos || trim(line.substr(0, eq)) != "job_state") continue;
      auto s = trim(line.substr(eq + 1));
      if (s == "Q" || s == "H" || s == "W" || s == "T") return SchedulerStatus::Queued;
      if (s == "R" || s == "E" || s == "B") return SchedulerStatus::Running;
      return SchedulerStatus::Finished;
    }
    return std::nullopt;
  }
  std::vector<std::string> remove_argv(const std::string& id) const override {
    return {"qdel", id};
  }
};

}  // namespace

std::unique_ptr<CommandScheduler> slurm_scheduler(CommandScheduler::Options options) {
  return std::make_unique<SlurmScheduler>(std::move(options));
}
std::unique_ptr<CommandScheduler> cobalt_scheduler(CommandScheduler::Options options) {
  return std::make_unique<CobaltScheduler>(std::move(options));
}
std::unique_ptr<CommandScheduler> pbs_scheduler(CommandScheduler::Options options) {
  return std::make_unique<PbsScheduler>(std::move(options));
}

std::unique_ptr<SchedulerAdapter> make_scheduler(const PlatformConfig& config) {
  if (config.name == "local")
    return local_platform(config.node_pool, config.work_dir, config.base_env);
  if (config.name == "mock")
    return mock_scheduler(system_clock(), config.node_pool, config.work_dir, config.base_env);
  CommandScheduler::Options o;
  o.client_dir = config.client_dir;
  o.script_dir = config.work_dir;
  if (config.name == "slurm") return slurm_scheduler(std::move(o));
  if (config.name == "cobalt") return cobalt_scheduler(std::move(o));
  if (config.name == "pbs") return pbs_scheduler(std::move(o));
  throw Error(ErrorCode::InvalidField, "unknown platform: " + config.name, config.name);
}

}  // namespace pilotgrid
