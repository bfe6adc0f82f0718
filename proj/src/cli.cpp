#include "pilotgrid/cli.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "pilotgrid/analytics.hpp"
#include "pilotgrid/dag_engine.hpp"
#include "pilotgrid/error.hpp"
#include "pilotgrid/launcher.hpp"
#include "pilotgrid/platform.hpp"
#include "pilotgrid/project.hpp"
#include "pilotgrid/scheduler_service.hpp"

namespace pilotgrid::cli {

std::atomic<bool> g_stop{false};

namespace fs = std::filesystem;

namespace {

std::string absolute_path(const std::string& p) {
  return fs::absolute(p).lexically_normal().string();
}

TaskState state_arg(const std::string& text) {
  auto s = parse_state(text);
  if (!s) throw Error(ErrorCode::InvalidField, "unknown state " + text, "state");
  return *s;
}

std::pair<std::string, std::string> env_pair(const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0)
    throw Error(ErrorCode::InvalidField, "expected KEY=VALUE, got " + kv, "env");
  return {kv.substr(0, eq), kv.substr(eq + 1)};
}

std::string pad_left(const std::string& s, std::size_t w) {
  return s.size() >= w ? s : std::string(w - s.size(), ' ') + s;
}
std::string pad_right(const std::string& s, std::size_t w) {
  return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
}

void print_table(std::ostream& out, const std::vector<Task>& tasks) {
  const std::array<std::string, 5> header{"job_id", "name", "workflow", "application", "state"};
  std::vector<std::array<std::string, 5>> rows;
  for (const auto& t : tasks)
    rows.push_back({t.id.str(), t.name, t.workflow, t.application, std::string(to_string(t.state))});

  std::array<std::size_t, 5> width{};
  for (std::size_t c = 0; c < 5; ++c) {
    width[c] = header[c].size();
    for (const auto& r : rows) width[c] = std::max(width[c], r[c].size());
  }
  width[0] = std::max<std::size_t>(width[0], 36);

  std::string line;
  for (std::size_t c = 0; c < 5; ++c) {
    if (c) line += " | ";
    line += pad_left(header[c], width[c]);
  }
  out << line << '\n' << std::string(line.size(), '-') << '\n';
  for (const auto& r : rows) {
    std::string row;
    for (std::size_t c = 0; c < 5; ++c) {
      if (c) row += " | ";
      row += c + 1 < 5 ? pad_right(r[c], width[c]) : r[c];
    }
    out << row << '\n';
  }
}

void print_history(std::ostream& out, const std::vector<Task>& tasks) {
  for (const auto& t : tasks) {
    out << '\n' << t.id.str() << ' ' << t.name << '\n';
    for (const auto& e : t.state_history) {
      out << "  " << format_iso8601(e.at) << "  " << to_string(e.state);
      if (!e.message.empty()) {
        // indent continuation lines of multi-line stderr tails
        std::string msg;
        for (char ch : e.message) {
          msg.push_back(ch);
          if (ch == '\n') msg += "      ";
        }
        out << "  " << msg;
      }
      out << '\n';
    }
  }
}

struct JobArgs {
  TaskSpec spec;
  std::vector<std::string> env;
  std::vector<std::string> stage_in;
  std::vector<std::string> parents;
  bool name_set = false;
};

struct LsArgs {
  std::vector<std::string> states;
  std::string name, workflow, application;
  bool history = false;
};

struct LauncherArgs {
  std::string job_mode = "serial";
  std::string wf_filter, batch_tag, platform, launch_template;
  double time_limit = 0;
  int nodes = 0;
  double lease_seconds = 0;
  double cycle_seconds = 0;
  int workers = 0;
};

struct ServiceArgs {
  bool dry_run = false;
  bool once = false;
  std::string platform;
  double cycle_seconds = 0;
};

struct ProfileArgs {
  std::string workflow;
  std::string out;
  std::string utilization;
  int workers = 0;
  int nodes = 0;
};

int cmd_launcher(const LauncherArgs& a, std::ostream& out, const Environment& env) {
  auto project = Project::active(env);
  auto settings = project.settings();

  Environment penv = env;
  std::string platform = a.platform;
  if (platform.empty()) platform = detect_platform_name(env).value_or(settings.platform);
  if (a.nodes > 0)
    penv[kEnvLocalNodes] = std::to_string(a.nodes);
  else if (platform == "local" && penv[kEnvLocalNodes].empty())
    penv[kEnvLocalNodes] = std::to_string(settings.local_nodes);
  if (a.time_limit > 0) {
    std::ostringstream s;
    s << a.time_limit;
    penv[kEnvTimeLimit] = s.str();
  }
  auto nodes = detect_nodes(platform, penv, now_utc());

  LauncherOptions o;
  o.mode = parse_job_mode(a.job_mode);
  if (!a.batch_tag.empty()) o.batch_tag = Uuid::from_string(a.batch_tag);
  if (!a.wf_filter.empty()) o.wf_filter = a.wf_filter;
  o.project_dir = project.root();
  o.launch_template = a.launch_template.empty() ? settings.launch_template : a.launch_template;
  o.lease_seconds = a.lease_seconds > 0 ? a.lease_seconds : settings.lease_seconds;
  o.cycle_seconds = a.cycle_seconds > 0 ? a.cycle_seconds : settings.launcher_cycle_seconds;
  o.transition_workers = a.workers > 0 ? a.workers : settings.transition_workers;
  o.base_env = env;
  o.base_env[kEnvDbPath] = project.root().string();
  o.stop = &g_stop;

  auto store = project.store();
  Launcher launcher(store, std::move(nodes), std::move(o));
  spdlog::info("launcher {} on {} node(s)", launcher.owner(), platform);
  auto s = launcher.run();
  out << "dispatched " << s.dispatched << ", done " << s.run_done << ", errors " << s.run_error
      << ", timeouts " << s.timed_out << ", killed " << s.killed << " (" << s.reason << ")\n";
  return 0;
}

void print_spec(std::ostream& out, const BatchJobSpec& j) {
  out << (j.id.is_nil() ? std::string("(planned)") : j.id.str()) << ' ' << j.queue_name << ' '
      << j.num_nodes << " node(s) " << std::fixed << std::setprecision(1) << j.walltime_minutes
      << " min " << to_string(j.job_mode) << ' ' << j.task_ids.size() << " task(s)";
  if (j.scheduler_id) out << " scheduler id " << *j.scheduler_id;
  out << '\n';
  out.unsetf(std::ios::floatfield);
}

int cmd_service(const ServiceArgs& a, std::ostream& out, const Environment& env) {
  auto project = Project::active(env);
  auto settings = project.settings();
  auto policy = QueuePolicy::load(project.policy_path());

  PlatformConfig cfg;
  cfg.name = a.platform.empty() ? settings.platform : a.platform;
  cfg.work_dir = project.scheduler_dir();
  cfg.node_pool = settings.local_nodes;
  cfg.client_dir = settings.client_dir;
  cfg.base_env = env;
  cfg.base_env[kEnvDbPath] = project.root().string();
  fs::create_directories(cfg.work_dir);
  auto adapter = make_scheduler(cfg);

  ServiceOptions so;
  so.cycle_seconds = a.cycle_seconds > 0 ? a.cycle_seconds : settings.service_cycle_seconds;
  so.dry_run = a.dry_run;
  so.once = a.once;
  so.script_template = project.batch_template();
  so.stop = &g_stop;

  auto store = project.store();
  Service service(store, std::move(policy), *adapter, so);
  if (!a.dry_run && !a.once) {
    service.run();
    return 0;
  }
  auto report = service.cycle();
  if (a.dry_run) {
    for (const auto& j : report.dry_run.specs) print_spec(out, j);
    for (const auto& w : report.dry_run.warnings) out << "warning: " << w << '\n';
    if (!report.dry_run.leftover.empty())
      out << report.dry_run.leftover.size() << " task(s) left for a later cycle\n";
    return 0;
  }
  for (const auto& r : report.reconciled)
    out << "job " << r.job.str() << ' ' << to_string(r.status) << ", untagged " << r.untagged.size()
        << '\n';
  for (const auto& j : report.submitted) print_spec(out, j);
  return 0;
}

int cmd_profile(const ProfileArgs& a, std::ostream& out, const Environment& env) {
  auto project = Project::active(env);
  auto store = project.store();
  TaskFilter f;
  if (!a.workflow.empty()) f.workflow = a.workflow;
  auto histories = store.histories(f);
  auto series = process_job_times(histories);

  if (!a.out.empty()) {
    std::ofstream csv(a.out);
    write_state_csv(csv, series);
    if (!csv) throw Error(ErrorCode::Io, "cannot write " + a.out, a.out);
  }

  long finished = 0;
  for (const auto& h : histories)
    if (!h.empty() && h.back().state == TaskState::JOB_FINISHED) ++finished;
  out << "tasks " << histories.size() << ", finished " << finished << '\n';

  const int workers = a.workers > 0 ? a.workers : project.settings().local_nodes;
  auto u = utilization(series, workers);
  if (!a.utilization.empty()) {
    std::ofstream csv(a.utilization);
    write_utilization_csv(csv, u);
    if (!csv) throw Error(ErrorCode::Io, "cannot write " + a.utilization, a.utilization);
  }
  const double span = seconds_between(u.begin, u.end);
  out << "workers " << workers << ", span " << span << " s, mean utilization " << u.mean << '\n';
  if (a.nodes > 0 && span > 0) {
    auto t = throughput(finished, span / 60.0, a.nodes);
    out << "throughput " << t.tasks_per_node_hour << " tasks/node-hour, " << t.tasks_per_second
        << " tasks/s\n";
  }
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
        const Environment& env) {
  CLI::App app{"pilot job manager for ensembles of tasks", "pilotgrid"};
  app.require_subcommand(1);

  std::string init_path;
  auto* init = app.add_subcommand("init", "create a project directory");
  init->add_option("path", init_path, "project directory")->required();

  std::string activate_path;
  auto* activate = app.add_subcommand("activate", "print the export line selecting a project");
  activate->add_option("path", activate_path, "project directory")->required();

  AppDefinition app_def;
  std::string app_policy = "fail";
  std::string app_pre, app_post;
  auto* app_cmd = app.add_subcommand("app", "register an application (no flags: list them)");
  app_cmd->add_option("--name", app_def.name);
  app_cmd->add_option("--exec", app_def.executable);
  app_cmd->add_option("--preprocess", app_pre);
  app_cmd->add_option("--postprocess", app_post);
  app_cmd->add_option("--error-policy", app_policy, "fail, retry:N or handler");

  JobArgs job;
  auto* job_cmd = app.add_subcommand("job", "add a task and print its id");
  job_cmd->add_option("--name", job.spec.name);
  job_cmd->add_option("--workflow", job.spec.workflow);
  job_cmd->add_option("--application", job.spec.application)->required();
  job_cmd->add_option("--args", job.spec.args);
  job_cmd->add_option("--env", job.env, "KEY=VAL, repeatable");
  job_cmd->add_option("--num-nodes", job.spec.num_nodes);
  job_cmd->add_option("--ranks-per-node", job.spec.ranks_per_node);
  job_cmd->add_option("--node-packing-count", job.spec.node_packing_count);
  job_cmd->add_option("--wall-time-minutes", job.spec.wall_time_minutes);
  job_cmd->add_option("--input-files", job.spec.input_files);
  job_cmd->add_option("--stage-in", job.stage_in, "repeatable");
  job_cmd->add_option("--stage-out-patterns", job.spec.stage_out_patterns);
  job_cmd->add_option("--stage-out-dest", job.spec.stage_out_dest);
  job_cmd->add_option("--parent", job.parents, "parent id or prefix, repeatable");

  LsArgs ls;
  auto* ls_cmd = app.add_subcommand("ls", "list tasks");
  ls_cmd->add_option("--state", ls.states, "repeatable");
  ls_cmd->add_option("--name", ls.name, "substring");
  ls_cmd->add_option("--wf,--workflow", ls.workflow);
  ls_cmd->add_option("--application", ls.application);
  ls_cmd->add_flag("--history", ls.history);

  std::string dep_parent, dep_child;
  auto* dep = app.add_subcommand("dep", "add a dependency edge");
  dep->add_option("parent", dep_parent)->required();
  dep->add_option("child", dep_child)->required();

  std::string kill_id;
  bool kill_recursive = false;
  auto* kill = app.add_subcommand("kill", "kill a task");
  kill->add_option("id", kill_id)->required();
  kill->add_flag("--recursive", kill_recursive, "also kill every descendant");

  std::vector<std::string> rm_ids;
  std::vector<std::string> rm_states;
  std::string rm_workflow;
  bool rm_all = false;
  auto* rm = app.add_subcommand("rm", "delete tasks");
  rm->add_option("ids", rm_ids);
  rm->add_option("--state", rm_states);
  rm->add_option("--wf,--workflow", rm_workflow);
  rm->add_flag("--all", rm_all);

  std::string upd_id, upd_state, upd_message;
  auto* update = app.add_subcommand("update", "record a state change");
  update->add_option("id", upd_id)->required();
  update->add_option("--state", upd_state)->required();
  update->add_option("--message", upd_message);

  LauncherArgs la;
  auto* launcher = app.add_subcommand("launcher", "run tasks inside this allocation");
  launcher->add_option("--job-mode", la.job_mode, "serial or mpi");
  launcher->add_option("--wf-filter", la.wf_filter);
  launcher->add_option("--batch-tag", la.batch_tag);
  launcher->add_option("--time-limit", la.time_limit, "minutes");
  launcher->add_option("--platform", la.platform);
  launcher->add_option("--nodes", la.nodes, "local platform node count");
  launcher->add_option("--lease-seconds", la.lease_seconds);
  launcher->add_option("--cycle-seconds", la.cycle_seconds);
  launcher->add_option("--template", la.launch_template);
  launcher->add_option("--workers", la.workers, "transition worker threads");

  ServiceArgs sa;
  auto* service = app.add_subcommand("service", "pack and submit batch jobs");
  service->add_flag("--dry-run", sa.dry_run);
  service->add_flag("--once", sa.once);
  service->add_option("--platform", sa.platform);
  service->add_option("--cycle-seconds", sa.cycle_seconds);

  ProfileArgs pa;
  auto* profile = app.add_subcommand("profile", "state counts and utilization over time");
  profile->add_option("--wf,--workflow", pa.workflow);
  profile->add_option("--out", pa.out, "state series CSV");
  profile->add_option("--utilization", pa.utilization, "utilization CSV");
  profile->add_option("--workers", pa.workers);
  profile->add_option("--nodes", pa.nodes, "nodes for throughput");

  std::vector<const char*> argv{"pilotgrid"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (init->parsed()) {
      auto p = Project::init(init_path);
      out << "created project " << p.root().string() << '\n';
      return 0;
    }
    if (activate->parsed()) {
      auto p = Project::open(activate_path);
      out << "export " << kEnvDbPath << '=' << shell_quote(p.root().string()) << '\n';
      return 0;
    }

    auto project = Project::active(env);
    if (launcher->parsed()) return cmd_launcher(la, out, env);
    if (service->parsed()) return cmd_service(sa, out, env);
    if (profile->parsed()) return cmd_profile(pa, out, env);

    auto store = project.store();

    if (app_cmd->parsed()) {
      if (app_def.name.empty() && app_def.executable.empty()) {
        for (const auto& a : store.apps()) {
          out << a.name << ' ' << a.executable << ' ' << a.error_policy.str();
          if (a.preprocess) out << " pre=" << *a.preprocess;
          if (a.postprocess) out << " post=" << *a.postprocess;
          out << '\n';
        }
        return 0;
      }
      if (app_def.executable.find('/') != std::string::npos)
        app_def.executable = absolute_path(app_def.executable);
      if (!app_pre.empty()) app_def.preprocess = app_pre;
      if (!app_post.empty()) app_def.postprocess = app_post;
      app_def.error_policy = ErrorPolicy::parse(app_policy);
      store.register_app(app_def);
      out << "registered " << app_def.name << '\n';
      return 0;
    }

    if (job_cmd->parsed()) {
      if (job.spec.name.empty()) job.spec.name = job.spec.application;
      for (const auto& kv : job.env) job.spec.environment.insert(env_pair(kv));
      for (const auto& s : job.stage_in) job.spec.stage_in_sources.push_back(absolute_path(s));
      if (!job.spec.stage_out_dest.empty())
        job.spec.stage_out_dest = absolute_path(job.spec.stage_out_dest);
      job.spec.validate();
      std::vector<Uuid> parents;
      for (const auto& p : job.parents) parents.push_back(store.resolve_prefix(p));
      auto id = store.write([&](Txn& txn) { return dag::spawn(txn, job.spec, parents); });
      out << id.str() << '\n';
      return 0;
    }

    if (ls_cmd->parsed()) {
      TaskFilter f;
      for (const auto& s : ls.states) f.states.push_back(state_arg(s));
      if (!ls.name.empty()) f.name_contains = ls.name;
      if (!ls.workflow.empty()) f.workflow = ls.workflow;
      if (!ls.application.empty()) f.application = ls.application;
      auto tasks = store.query(f);
      print_table(out, tasks);
      if (ls.history) print_history(out, tasks);
      return 0;
    }

    if (dep->parsed()) {
      auto parent = store.resolve_prefix(dep_parent);
      auto child = store.resolve_prefix(dep_child);
      DagEngine(store).add_dependency(parent, child);
      out << parent.str() << " -> " << child.str() << '\n';
      return 0;
    }

    if (kill->parsed()) {
      auto id = store.resolve_prefix(kill_id);
      for (const auto& k : DagEngine(store).kill(id, kill_recursive)) out << k.str() << '\n';
      return 0;
    }

    if (rm->parsed()) {
      if (rm_ids.empty() && rm_states.empty() && rm_workflow.empty() && !rm_all)
        throw Error(ErrorCode::InvalidField, "rm needs ids, a filter or --all", "rm");
      TaskFilter f;
      for (const auto& s : rm_ids) f.ids.push_back(store.resolve_prefix(s));
      for (const auto& s : rm_states) f.states.push_back(state_arg(s));
      if (!rm_workflow.empty()) f.workflow = rm_workflow;
      auto n = store.write([&](Txn& txn) {
        auto tasks = txn.query(f);
        for (const auto& t : tasks) txn.remove(t.id);
        return tasks.size();
      });
      out << "removed " << n << " task(s)\n";
      return 0;
    }

    if (update->parsed()) {
      auto id = store.resolve_prefix(upd_id);
      auto to = state_arg(upd_state);
      store.write([&](Txn& txn) {
        txn.apply({id, to, upd_message, txn.now(), std::nullopt});
        if (is_terminal(to)) dag::on_parent_terminal(txn, id);
      });
      out << id.str() << ' ' << to_string(to) << '\n';
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}

}  // namespace pilotgrid::cli
