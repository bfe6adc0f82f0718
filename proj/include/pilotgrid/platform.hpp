#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pilotgrid/batch_job.hpp"
#include "pilotgrid/subprocess.hpp"
#include "pilotgrid/task_model.hpp"
#include "pilotgrid/time.hpp"

namespace pilotgrid {

struct NodeSpec {
  std::string id;
  int capacity_slots = 1;

  friend bool operator==(const NodeSpec&, const NodeSpec&) = default;
};

/// Compute nodes of one allocation and the walltime left in it.
struct NodeSet {
  std::vector<NodeSpec> nodes;
  std::optional<double> remaining_walltime_seconds;  // nullopt: unlimited
};

enum class SchedulerStatus { Queued, Running, Finished, Vanished };
std::string_view to_string(SchedulerStatus s);

/// The boundary to a batch scheduler. Status is monotone along
/// queued -> running -> finished; vanished is reachable from queued/running.
class SchedulerAdapter {
 public:
  virtual ~SchedulerAdapter() = default;

  virtual std::string name() const = 0;
  /// Throws Error(SubmitFailure).
  virtual std::string submit(const std::string& script, const BatchJobSpec& spec) = 0;
  /// Unknown ids are Vanished.
  virtual SchedulerStatus status(const std::string& scheduler_id) = 0;
  virtual void remove(const std::string& scheduler_id) = 0;
  /// Reads the job environment this scheduler exports. Throws MissingEnvironment.
  virtual NodeSet detect_environment(const Environment& env) const = 0;
  /// The variables this scheduler would export to a job on `node_ids`.
  virtual Environment job_environment(std::span<const std::string> node_ids,
                                      double walltime_minutes) const = 0;
};

// Environment conventions shared by the adapters and the launcher.
inline constexpr const char* kEnvNodefile = "PILOTGRID_NODEFILE";
inline constexpr const char* kEnvLocalNodes = "PILOTGRID_LOCAL_NODES";
inline constexpr const char* kEnvTimeLimit = "PILOTGRID_TIME_LIMIT_MIN";

/// Runs submitted batch scripts as host subprocesses, FIFO, while the node
/// pool admits them. Backs both the mock scheduler (nodefile convention) and
/// the local platform (node-count convention). Jobs still running past their
/// walltime get SIGTERM, then SIGKILL after the grace period.
class ProcessScheduler final : public SchedulerAdapter {
 public:
  enum class Convention { Nodefile, LocalCount };
  struct Options {
    Clock clock = system_clock();
    int node_pool = 1;
    std::filesystem::path work_dir;
    Convention convention = Convention::Nodefile;
    double kill_grace_seconds = 10.0;
    Environment base_env = current_environment();
  };

  struct JobRecord {
    std::string id;
    int num_nodes = 0;
    double walltime_minutes = 0;
    SchedulerStatus status = SchedulerStatus::Queued;
    std::optional<Timestamp> started;
    std::optional<Timestamp> ended;
    std::vector<std::string> nodes;
    std::optional<ExitStatus> exit;
  };

  explicit ProcessScheduler(Options options);
  ~ProcessScheduler() override;

  std::string name() const override;
  std::string submit(const std::string& script, const BatchJobSpec& spec) override;
  SchedulerStatus status(const std::string& scheduler_id) override;
  void remove(const std::string& scheduler_id) override;
  NodeSet detect_environment(const Environment& env) const override;
  Environment job_environment(std::span<const std::string> node_ids,
                              double walltime_minutes) const override;

  /// Reaps finished jobs, enforces walltimes and starts queued jobs.
  void advance();
  std::optional<JobRecord> record(const std::string& scheduler_id);
  int free_nodes();

 private:
  struct Job;
  void advance_locked();

  Options options_;
  std::mutex mu_;
  std::vector<std::unique_ptr<Job>> jobs_;
  std::vector<bool> node_busy_;
  int next_id_ = 1;
};

/// In-process test double for a batch scheduler, nodefile convention.
std::unique_ptr<ProcessScheduler> mock_scheduler(Clock clock, int node_pool,
                                                 const std::filesystem::path& work_dir,
                                                 Environment base_env = current_environment());
/// Desk-scale platform: virtual nodes, node-count convention.
std::unique_ptr<ProcessScheduler> local_platform(int virtual_nodes,
                                                 const std::filesystem::path& work_dir,
                                                 Environment base_env = current_environment());

/// Adapters that shell out to a site's scheduler client binaries.
class CommandScheduler : public SchedulerAdapter {
 public:
  struct Options {
    std::filesystem::path client_dir;  // empty: look binaries up on PATH
    std::filesystem::path script_dir;
    Clock clock = system_clock();
  };
  explicit CommandScheduler(Options options);

  SchedulerStatus status(const std::string& scheduler_id) override;
  void remove(const std::string& scheduler_id) override;
  std::string submit(const std::string& script, const BatchJobSpec& spec) override;

 protected:
  struct CommandResult {
    int exit_code = 0;
    std::string out;
  };
  CommandResult run_client(std::vector<std::string> argv) const;
  std::filesystem::path write_script(const std::string& script, const BatchJobSpec& spec) const;

  virtual std::vector<std::string> submit_argv(const std::filesystem::path& script,
                                               const BatchJobSpec& spec) const = 0;
  virtual std::string parse_submit(const std::string& out) const = 0;
  /// nullopt when the client no longer knows the job.
  virtual std::optional<SchedulerStatus> query(const std::string& scheduler_id) const = 0;
  virtual std::vector<std::string> remove_argv(const std::string& scheduler_id) const = 0;

  Options options_;

 private:
  std::mutex mu_;
  std::map<std::string, SchedulerStatus> last_seen_;
};

std::unique_ptr<CommandScheduler> slurm_scheduler(CommandScheduler::Options options);
std::unique_ptr<CommandScheduler> cobalt_scheduler(CommandScheduler::Options options);
std::unique_ptr<CommandScheduler> pbs_scheduler(CommandScheduler::Options options);

/// "nid[0001-0003,0007],login1" -> nid0001 nid0002 nid0003 nid0007 login1
std::vector<std::string> expand_hostlist(std::string_view list);

/// Picks a platform from the job environment: PILOTGRID_NODEFILE (mock),
/// PILOTGRID_LOCAL_NODES (local), COBALT_PARTNAME, SLURM_JOB_NODELIST,
/// PBS_NODEFILE. nullopt when none is set.
std::optional<std::string> detect_platform_name(const Environment& env);

/// Nodes and remaining walltime as exported by `platform` in `env`.
/// Throws MissingEnvironment.
NodeSet detect_nodes(std::string_view platform, const Environment& env, Timestamp now);

struct PlatformConfig {
  std::string name = "local";  // local | mock | slurm | cobalt | pbs
  std::filesystem::path work_dir;
  int node_pool = 4;
  std::filesystem::path client_dir;
  Environment base_env = current_environment();  // jobs of process-backed platforms
};
std::unique_ptr<SchedulerAdapter> make_scheduler(const PlatformConfig& config);

// --- launch templates ---------------------------------------------------------

/// An MPI launch-command convention. `env_format` renders one task
/// environment variable ({key}, {value}); empty means the launcher passes the
/// environment implicitly.
struct LaunchTemplate {
  std::string name;
  std::string pattern;
  std::string env_format = "{key}={value}";
};

/// Substitutes `{name}` placeholders. An empty value also swallows one
/// following space. Throws UnboundPlaceholder for names missing in `values`.
std::string render_placeholders(std::string_view pattern,
                                const std::map<std::string, std::string>& values);

class TemplateRegistry {
 public:
  /// Registry holding the built-in aprun, mpirun, srun and local templates.
  TemplateRegistry();

  /// Adds (or overrides) every `*.tmpl` file in `dir`.
  void load_directory(const std::filesystem::path& dir);
  void add(LaunchTemplate t);
  /// Throws UnknownTemplate.
  const LaunchTemplate& get(std::string_view name) const;
  std::vector<std::string> names() const;

  static std::vector<LaunchTemplate> builtins();
  /// Template file text: `#env <format>` directive, `#` comments, one pattern line.
  static LaunchTemplate parse(std::string name, std::string_view text);
  static std::string serialize(const LaunchTemplate& t);

 private:
  std::map<std::string, LaunchTemplate, std::less<>> templates_;
};

/// per_task_launch: the template with nprocs = num_nodes * ranks_per_node;
/// serial: exactly `exe args`.
std::string render_launch_command(const Task& task, std::string_view executable,
                                  const LaunchTemplate* tmpl, JobMode mode);
std::string render_launch_command(const Task& task, std::string_view executable,
                                  const TemplateRegistry& registry,
                                  std::string_view template_name, JobMode mode);

}  // namespace pilotgrid
