#include "pilotgrid/scheduler_service.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "pilotgrid/error.hpp"
#include "pilotgrid/launcher.hpp"

namespace pilotgrid {

namespace fs = std::filesystem;
using json = nlohmann::json;

// --- policy ---------------------------------------------------------------------

void QueuePolicy::validate() const {
  if (queues.empty()) throw Error(ErrorCode::InvalidPolicy, "policy has no queues");
  for (const auto& q : queues) {
    if (q.queue_name.empty()) throw Error(ErrorCode::InvalidPolicy, "queue without a name");
    if (q.max_queued < 1)
      throw Error(ErrorCode::InvalidPolicy, "max_queued must be positive", q.queue_name);
    if (q.ranges.empty())
      throw Error(ErrorCode::InvalidPolicy, "queue has no node ranges", q.queue_name);
    for (std::size_t i = 0; i < q.ranges.size(); ++i) {
      const auto& r = q.ranges[i];
      if (r.lo < 1 || r.lo > r.hi)
        throw Error(ErrorCode::InvalidPolicy,
                    "bad node range [" + std::to_string(r.lo) + "," + std::to_string(r.hi) + "]",
                    q.queue_name);
      if (!(r.min_hours > 0) || r.min_hours > r.max_hours)
        throw Error(ErrorCode::InvalidPolicy, "bad walltime range", q.queue_name);
      for (std::size_t j = 0; j < i; ++j) {
        const auto& o = q.ranges[j];
        if (r.lo <= o.hi && o.lo <= r.hi)
          throw Error(ErrorCode::InvalidPolicy, "overlapping node ranges", q.queue_name);
      }
    }
    if (std::count_if(queues.begin(), queues.end(),
                      [&](const QueueRule& o) { return o.queue_name == q.queue_name; }) > 1)
      throw Error(ErrorCode::InvalidPolicy, "duplicate queue", q.queue_name);
  }
}

const QueueRule* QueuePolicy::find(std::string_view queue) const {
  for (const auto& q : queues)
    if (q.queue_name == queue) return &q;
  return nullptr;
}

int QueuePolicy::max_nodes() const {
  int hi = 0;
  for (const auto& q : queues)
    for (const auto& r : q.ranges) hi = std::max(hi, r.hi);
  return hi;
}

QueuePolicy QueuePolicy::parse(std::string_view text) {
  QueuePolicy p;
  try {
    auto doc = json::parse(text);
    if (!doc.is_array()) throw Error(ErrorCode::InvalidPolicy, "policy must be a JSON array");
    for (const auto& jq : doc) {
      QueueRule q;
      q.queue_name = jq.at("queue").get<std::string>();
      q.max_queued = jq.at("max_queued").get<int>();
      for (const auto& jr : jq.at("ranges")) {
        NodeRange r;
        if (jr.is_array()) {
          r.lo = jr.at(0).at(0).get<int>();
          r.hi = jr.at(0).at(1).get<int>();
          r.min_hours = jr.at(1).at(0).get<double>();
          r.max_hours = jr.at(1).at(1).get<double>();
        } else {
          r.lo = jr.at("nodes").at(0).get<int>();
          r.hi = jr.at("nodes").at(1).get<int>();
          r.min_hours = jr.at("walltime_hours").at(0).get<double>();
          r.max_hours = jr.at("walltime_hours").at(1).get<double>();
        }
        q.ranges.push_back(r);
      }
      p.queues.push_back(std::move(q));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidPolicy, e.what());
  }
  p.validate();
  return p;
}

QueuePolicy QueuePolicy::load(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(ErrorCode::InvalidPolicy, "cannot read " + file.string(), file.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

std::string QueuePolicy::dump() const {
  json doc = json::array();
  for (const auto& q : queues) {
    json ranges = json::array();
    for (const auto& r : q.ranges)
      ranges.push_back(json::array({json::array({r.lo, r.hi}), json::array({r.min_hours, r.max_hours})}));
    doc.push_back({{"queue", q.queue_name}, {"max_queued", q.max_queued}, {"ranges", ranges}});
  }
  return doc.dump(2);
}

// --- packing --------------------------------------------------------------------

std::vector<Task> eligible(TaskStore& store) {
  TaskFilter f;
  f.states = {TaskState::READY, TaskState::RESTART_READY};
  f.untagged = true;
  f.unlocked = true;
  return store.query(f);
}

namespace {

struct Placed {
  double start;
  double end;
  int nodes;
};

int usage_peak(const std::vector<Placed>& placed, double t0, double t1) {
  int peak = 0;
  std::vector<double> points{t0};
  for (const auto& p : placed)
    if (p.start > t0 && p.start < t1) points.push_back(p.start);
  for (double x : points) {
    int u = 0;
    for (const auto& p : placed)
      if (p.start <= x && x < p.end) u += p.nodes;
    peak = std::max(peak, u);
  }
  return peak;
}

double duration_minutes(const Task& t, const NodeRange& r) {
  if (t.wall_time_minutes > 0) return t.wall_time_minutes * kWalltimeSafety;
  return r.min_hours * 60.0;
}

struct Candidate {
  std::size_t queue;
  std::size_t range;
};

}  // namespace

PackResult pack(std::span<const Task> tasks, const QueuePolicy& policy,
                const std::map<std::string, int>& queued_now) {
  PackResult out;
  std::vector<const Task*> remaining;
  for (const auto& t : tasks) remaining.push_back(&t);
  std::stable_sort(remaining.begin(), remaining.end(), [](const Task* a, const Task* b) {
    if (a->num_nodes != b->num_nodes) return a->num_nodes > b->num_nodes;
    if (a->created_at() != b->created_at()) return a->created_at() < b->created_at();
    return a->id < b->id;
  });

  const int global_hi = policy.max_nodes();
  std::erase_if(remaining, [&](const Task* t) {
    if (t->num_nodes <= global_hi) return false;
    out.leftover.push_back(t->id);
    out.warnings.push_back("task " + t->id.str() + " needs " + std::to_string(t->num_nodes) +
                           " nodes, more than any queue range allows");
    return true;
  });

  std::vector<int> headroom;
  for (const auto& q : policy.queues) {
    auto it = queued_now.find(q.queue_name);
    headroom.push_back(q.max_queued - (it == queued_now.end() ? 0 : it->second));
  }

  while (!remaining.empty()) {
    const Task& head = *remaining.front();
    std::vector<Candidate> fits_ignoring_headroom, candidates;
    for (std::size_t qi = 0; qi < policy.queues.size(); ++qi) {
      const auto& q = policy.queues[qi];
      for (std::size_t ri = 0; ri < q.ranges.size(); ++ri) {
        const auto& r = q.ranges[ri];
        if (r.hi < head.num_nodes || duration_minutes(head, r) > r.max_hours * 60.0) continue;
        fits_ignoring_headroom.push_back({qi, ri});
        if (headroom[qi] > 0) candidates.push_back({qi, ri});
      }
    }
    if (fits_ignoring_headroom.empty()) {
      out.leftover.push_back(head.id);
      out.warnings.push_back("task " + head.id.str() + " fits no queue range walltime");
      remaining.erase(remaining.begin());
      continue;
    }
    if (candidates.empty()) {
      // headroom exhausted for every queue that could take the head; the
      // rest may still fit elsewhere
      out.leftover.push_back(head.id);
      remaining.erase(remaining.begin());
      continue;
    }

    long demand = 0;
    for (const Task* t : remaining) demand += t->num_nodes;
    auto range_of = [&](const Candidate& c) -> const NodeRange& {
      return policy.queues[c.queue].ranges[c.range];
    };
    std::optional<Candidate> chosen;
    for (const auto& c : candidates) {
      if (range_of(c).lo > demand) continue;
      if (!chosen || range_of(c).hi > range_of(*chosen).hi) chosen = c;
    }
    if (!chosen) {
      for (const auto& c : candidates)
        if (!chosen || range_of(c).lo < range_of(*chosen).lo) chosen = c;
    }
    const NodeRange& r = range_of(*chosen);
    const QueueRule& q = policy.queues[chosen->queue];
    const double wmax = r.max_hours * 60.0;

    std::vector<Placed> placed;
    BatchJobSpec spec;
    spec.queue_name = q.queue_name;
    std::vector<const Task*> rest;
    bool all_serial = true;
    for (const Task* t : remaining) {
      const double d = duration_minutes(*t, r);
      bool done = false;
      if (t->num_nodes <= r.hi && d <= wmax) {
        std::vector<double> starts{0.0};
        for (const auto& p : placed) starts.push_back(p.end);
        std::sort(starts.begin(), starts.end());
        for (double s : starts) {
          if (s + d > wmax) break;
          if (usage_peak(placed, s, s + d) + t->num_nodes <= r.hi) {
            placed.push_back({s, s + d, t->num_nodes});
            spec.task_ids.push_back(t->id);
            spec.planned_starts.push_back(s);
            if (t->uses_mpi()) all_serial = false;
            done = true;
            break;
          }
        }
      }
      if (!done) rest.push_back(t);
    }
    double makespan = 0;
    for (const auto& p : placed) makespan = std::max(makespan, p.end);
    const int peak = usage_peak(placed, 0.0, makespan + 1.0);
    spec.num_nodes = std::max(r.lo, peak);
    spec.walltime_minutes = std::clamp(makespan, r.min_hours * 60.0, wmax);
    spec.job_mode = all_serial ? JobMode::Serial : JobMode::PerTaskLaunch;
    out.specs.push_back(std::move(spec));
    --headroom[chosen->queue];
    remaining = std::move(rest);
  }
  return out;
}

std::string default_batch_template() {
  return "#!/bin/sh\n"
         "# {num_nodes} nodes, {walltime_minutes} minutes on {queue}\n"
         "exec pilotgrid launcher --job-mode={job_mode} --batch-tag {batch_tag}\n";
}

std::string render_batch_script(std::string_view script_template, const BatchJobSpec& spec) {
  std::ostringstream minutes;
  minutes << spec.walltime_minutes;
  return render_placeholders(script_template, {{"num_nodes", std::to_string(spec.num_nodes)},
                                               {"walltime_minutes", minutes.str()},
                                               {"queue", spec.queue_name},
                                               {"batch_tag", spec.id.str()},
                                               {"job_mode", std::string(to_string(spec.job_mode))}}) +
         "\n";
}

std::map<std::string, int> queued_counts(TaskStore& store) {
  return store.read([](Txn& txn) {
    std::map<std::string, int> counts;
    for (const auto& j : txn.batch_jobs(true))
      if (j.status == BatchStatus::PendingSubmit || j.status == BatchStatus::Queued)
        ++counts[j.queue_name];
    return counts;
  });
}

// --- submission -----------------------------------------------------------------

namespace {

void untag(Txn& txn, const BatchJobSpec& job, std::vector<Uuid>* out) {
  TaskFilter f;
  f.batch_tag = job.id;
  for (const auto& t : txn.query(f)) {
    if (!is_unstarted(t.state)) continue;
    txn.set_batch_tag(t.id, std::nullopt);
    if (out) out->push_back(t.id);
  }
}

}  // namespace

bool is_unstarted(TaskState s) {
  switch (s) {
    case TaskState::CREATED:
    case TaskState::AWAITING_PARENTS:
    case TaskState::READY:
    case TaskState::STAGED_IN:
    case TaskState::PREPROCESSED:
    case TaskState::RESTART_READY:
      return true;
    default:
      return false;
  }
}

std::vector<BatchJobSpec> submit_cycle(TaskStore& store, const QueuePolicy& policy,
                                       SchedulerAdapter& adapter, const SubmitOptions& options) {
  auto tasks = eligible(store);
  if (tasks.empty()) return {};
  auto packed = pack(tasks, policy, queued_counts(store));
  for (const auto& w : packed.warnings) spdlog::warn("{}", w);

  std::vector<BatchJobSpec> submitted;
  for (auto spec : packed.specs) {
    spec.id = Uuid::random();
    spec.status = BatchStatus::PendingSubmit;
    const bool tagged = store.write([&](Txn& txn) {
      // headroom is rechecked inside the transaction that claims it
      const auto* rule = policy.find(spec.queue_name);
      int live = 0;
      for (const auto& j : txn.batch_jobs(true))
        if (j.queue_name == spec.queue_name &&
            (j.status == BatchStatus::PendingSubmit || j.status == BatchStatus::Queued))
          ++live;
      if (!rule || live >= rule->max_queued) return false;
      std::vector<Uuid> kept;
      std::vector<double> starts;
      const auto now = txn.now();
      for (std::size_t i = 0; i < spec.task_ids.size(); ++i) {
        auto t = txn.get(spec.task_ids[i]);
        if (!t || t->batch_tag || (t->lease && t->lease->live_at(now)) ||
            (t->state != TaskState::READY && t->state != TaskState::RESTART_READY))
          continue;
        txn.set_batch_tag(t->id, spec.id);
        kept.push_back(t->id);
        starts.push_back(spec.planned_starts[i]);
      }
      if (kept.empty()) return false;
      spec.task_ids = std::move(kept);
      spec.planned_starts = std::move(starts);
      spec.created = now;
      txn.put_batch_job(spec);
      return true;
    });
    if (!tagged) continue;

    try {
      auto script = render_batch_script(options.script_template, spec);
      auto sid = adapter.submit(script, spec);
      spec.scheduler_id = sid;
      spec.status = BatchStatus::Queued;
      store.write([&](Txn& txn) { txn.put_batch_job(spec); });
      spdlog::info("submitted batch job {} ({}): {} tasks, {} nodes, {} min", spec.id.short_str(),
                   sid, spec.task_ids.size(), spec.num_nodes, spec.walltime_minutes);
      submitted.push_back(spec);
    } catch (const Error& e) {
      spdlog::error("submission of {} failed: {}", spec.id.short_str(), e.what());
      store.write([&](Txn& txn) {
        untag(txn, spec, nullptr);
        spec.status = BatchStatus::Vanished;
        txn.put_batch_job(spec);
      });
    }
  }
  return submitted;
}

std::vector<ReconcileAction> reconcile(TaskStore& store, SchedulerAdapter& adapter,
                                       double pending_stale_seconds) {
  auto live = store.read([](Txn& txn) { return txn.batch_jobs(true); });
  std::vector<ReconcileAction> actions;
  for (auto job : live) {
    BatchStatus next = job.status;
    if (!job.scheduler_id) {
      if (seconds_between(job.created, store.now()) > pending_stale_seconds)
        next = BatchStatus::Vanished;
    } else {
      switch (adapter.status(*job.scheduler_id)) {
        case SchedulerStatus::Queued: next = BatchStatus::Queued; break;
        case SchedulerStatus::Running: next = BatchStatus::Running; break;
        case SchedulerStatus::Finished: next = BatchStatus::Finished; break;
        case SchedulerStatus::Vanished: next = BatchStatus::Vanished; break;
      }
    }
    if (next == job.status) continue;
    ReconcileAction action{job.id, next, {}};
    store.write([&](Txn& txn) {
      if (!is_live(next)) untag(txn, job, &action.untagged);
      job.status = next;
      txn.put_batch_job(job);
    });
    if (!action.untagged.empty())
      spdlog::info("batch job {} {}: {} tasks released", job.id.short_str(), to_string(next),
                   action.untagged.size());
    actions.push_back(std::move(action));
  }
  return actions;
}

// --- service loop ---------------------------------------------------------------

Service::Service(TaskStore& store, QueuePolicy policy, SchedulerAdapter& adapter,
                 ServiceOptions options)
    : store_(store), policy_(std::move(policy)), adapter_(adapter), options_(std::move(options)) {
  policy_.validate();
  if (options_.owner.empty()) options_.owner = make_owner_id();
  if (!options_.dry_run) hold_lock();
}

Service::~Service() {
  if (options_.dry_run) return;
  try {
    store_.write([&](Txn& txn) { txn.unlock("service", options_.owner); });
  } catch (const std::exception&) {
  }
}

void Service::hold_lock() {
  const double ttl = std::max(30.0, 3 * options_.cycle_seconds);
  const bool ok = store_.write([&](Txn& txn) {
    return txn.try_lock("service", options_.owner, ttl, owner_is_dead);
  });
  if (!ok) throw Error(ErrorCode::ServiceLocked, "another service is running on this store");
}

CycleReport Service::cycle() {
  CycleReport report;
  if (options_.dry_run) {
    auto tasks = eligible(store_);
    report.dry_run = pack(tasks, policy_, queued_counts(store_));
    return report;
  }
  hold_lock();
  report.reconciled = reconcile(store_, adapter_);
  report.submitted = submit_cycle(store_, policy_, adapter_, {options_.script_template});
  return report;
}

void Service::run() {
  for (;;) {
    const auto start = std::chrono::steady_clock::now();
    cycle();
    if (options_.once || options_.dry_run) return;
    const auto period = std::chrono::microseconds(static_cast<long>(options_.cycle_seconds * 1e6));
    while (std::chrono::steady_clock::now() - start < period) {
      if (options_.stop && options_.stop->load()) return;
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    if (options_.stop && options_.stop->load()) return;
  }
}

}  // namespace pilotgrid
