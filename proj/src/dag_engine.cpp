#include "pilotgrid/dag_engine.hpp"

#include <fnmatch.h>

#include <algorithm>
#include <deque>
#include <map>
#include <set>

#include "pilotgrid/error.hpp"

namespace pilotgrid {

namespace fs = std::filesystem;

bool glob_match(std::string_view pattern, std::string_view name) {
  return fnmatch(std::string(pattern).c_str(), std::string(name).c_str(), FNM_PATHNAME | FNM_PERIOD) == 0;
}

bool is_runtime_file(std::string_view name) {
  return name == "job.out" || name == "job.err" || name == "preprocess.log" ||
         name == "postprocess.log";
}

std::vector<StagedInput> resolve_inputs(const Task& child, std::span<const Task> parents) {
  const auto patterns = child.input_patterns();
  if (patterns.empty()) return {};
  std::map<std::string, StagedInput> by_name;
  for (const auto& parent : parents) {
    if (parent.work_dir.empty()) continue;
    std::error_code ec;
    if (!fs::is_directory(parent.work_dir, ec)) continue;
    for (const auto& entry : fs::directory_iterator(parent.work_dir, ec)) {
      if (entry.is_symlink(ec) || !entry.is_regular_file(ec)) continue;
      const auto name = entry.path().filename().string();
      if (is_runtime_file(name)) continue;
      const bool wanted = std::any_of(patterns.begin(), patterns.end(),
                                      [&](const std::string& p) { return glob_match(p, name); });
      if (!wanted) continue;
      auto [it, inserted] = by_name.try_emplace(name, StagedInput{entry.path(), name});
      if (!inserted && it->second.source != entry.path()) {
        throw Error(ErrorCode::BasenameCollision,
                    "'" + name + "' provided by more than one parent of task " + child.id.str(),
                    name);
      }
    }
  }
  std::vector<StagedInput> out;
  out.reserve(by_name.size());
  for (auto& [_, v] : by_name) out.push_back(std::move(v));
  return out;
}

void materialize_inputs(std::span<const StagedInput> inputs, const fs::path& work_dir) {
  fs::create_directories(work_dir);
  for (const auto& in : inputs) {
    const auto dest = work_dir / in.destination;
    std::error_code ec;
    fs::remove(dest, ec);
    fs::create_symlink(fs::absolute(in.source), dest, ec);
    if (ec) fs::copy_file(in.source, dest, fs::copy_options::overwrite_existing);
  }
}

namespace dag {

namespace {

struct ParentSummary {
  std::size_t unfinished = 0;
  bool dead = false;  // some parent FAILED or USER_KILLED
};

ParentSummary summarize_parents(Txn& txn, const Uuid& child) {
  ParentSummary s;
  for (const auto& p : txn.parents(child)) {
    const auto parent = txn.require(p);
    if (parent.state != TaskState::JOB_FINISHED) ++s.unfinished;
    if (parent.state == TaskState::FAILED || parent.state == TaskState::USER_KILLED) s.dead = true;
  }
  return s;
}

void step(Txn& txn, const Uuid& id, TaskState to, const std::string& message,
          std::vector<StateUpdate>& applied) {
  txn.apply({id, to, message, txn.now(), std::nullopt});
  applied.emplace_back(id, to);
}

/// Moves one task along the readiness rules given its current parents.
void settle(Txn& txn, const Task& task, std::vector<StateUpdate>& applied) {
  const auto parents = summarize_parents(txn, task.id);
  TaskState state = task.state;
  if (state == TaskState::CREATED) {
    state = classify_new(task, parents.unfinished);
    step(txn, task.id, state,
         parents.unfinished ? "waiting on " + std::to_string(parents.unfinished) + " parent(s)"
                            : "no pending parents",
         applied);
  } else if (state == TaskState::READY && parents.unfinished > 0) {
    state = TaskState::AWAITING_PARENTS;
    step(txn, task.id, state, "new dependency", applied);
  } else if (state == TaskState::AWAITING_PARENTS && parents.unfinished == 0) {
    state = TaskState::READY;
    step(txn, task.id, state, "all parents finished", applied);
  }
  if (state == TaskState::AWAITING_PARENTS && parents.dead) {
    step(txn, task.id, TaskState::FAILED, "parent failed or was killed", applied);
  }
}

void fail_descendants(Txn& txn, const Uuid& root, std::vector<StateUpdate>& applied) {
  std::deque<Uuid> frontier{root};
  std::set<Uuid> seen{root};
  while (!frontier.empty()) {
    const Uuid cur = frontier.front();
    frontier.pop_front();
    for (const auto& c : txn.children(cur)) {
      if (!seen.insert(c).second) continue;
      auto child = txn.require(c);
      if (child.state == TaskState::CREATED) {
        step(txn, c, TaskState::AWAITING_PARENTS, "parent failed or was killed", applied);
        child.state = TaskState::AWAITING_PARENTS;
      }
      if (child.state == TaskState::AWAITING_PARENTS) {
        step(txn, c, TaskState::FAILED, "parent " + cur.str() + " failed or was killed", applied);
        frontier.push_back(c);
      }
    }
  }
}

bool reachable(Txn& txn, const Uuid& from, const Uuid& to) {
  std::deque<Uuid> frontier{from};
  std::set<Uuid> seen{from};
  while (!frontier.empty()) {
    const Uuid cur = frontier.front();
    frontier.pop_front();
    if (cur == to) return true;
    for (const auto& c : txn.children(cur)) {
      if (seen.insert(c).second) frontier.push_back(c);
    }
  }
  return false;
}

}  // namespace

DependencyEdge add_dependency(Txn& txn, const Uuid& parent, const Uuid& child,
                              std::vector<StateUpdate>* applied) {
  if (parent == child) {
    throw Error(ErrorCode::CycleDetected, "task " + parent.str() + " cannot depend on itself",
                parent.str());
  }
  txn.require(parent);
  const auto c = txn.require(child);
  if (c.state != TaskState::CREATED && c.state != TaskState::AWAITING_PARENTS &&
      c.state != TaskState::READY) {
    throw Error(ErrorCode::ChildAlreadyStarted,
                "task " + child.str() + " is already " + std::string(to_string(c.state)),
                child.str());
  }
  const DependencyEdge edge{parent, child};
  if (txn.has_edge(edge)) return edge;
  if (reachable(txn, child, parent)) {
    throw Error(ErrorCode::CycleDetected,
                "edge " + parent.str() + " -> " + child.str() + " closes a cycle", child.str());
  }
  txn.add_edge(edge);
  std::vector<StateUpdate> local;
  settle(txn, txn.require(child), applied ? *applied : local);
  return edge;
}

std::vector<StateUpdate> on_parent_terminal(Txn& txn, const Uuid& parent) {
  const auto p = txn.require(parent);
  std::vector<StateUpdate> applied;
  if (p.state == TaskState::FAILED || p.state == TaskState::USER_KILLED) {
    fail_descendants(txn, parent, applied);
  } else if (p.state == TaskState::JOB_FINISHED) {
    for (const auto& c : txn.children(parent)) {
      const auto child = txn.require(c);
      if (child.state == TaskState::AWAITING_PARENTS || child.state == TaskState::CREATED) {
        settle(txn, child, applied);
      }
    }
  }
  return applied;
}

std::vector<Uuid> kill(Txn& txn, const Uuid& target, bool recursive) {
  const auto t = txn.require(target);
  if (is_terminal(t.state)) {
    throw Error(ErrorCode::AlreadyTerminal,
                "task " + target.str() + " is already " + std::string(to_string(t.state)),
                target.str());
  }
  std::vector<Uuid> marked;
  txn.apply({target, TaskState::USER_KILLED, "killed by user", txn.now(), std::nullopt});
  marked.push_back(target);
  if (recursive) {
    std::deque<Uuid> frontier{target};
    std::set<Uuid> seen{target};
    while (!frontier.empty()) {
      const Uuid cur = frontier.front();
      frontier.pop_front();
      for (const auto& c : txn.children(cur)) {
        if (!seen.insert(c).second) continue;
        frontier.push_back(c);
        const auto child = txn.require(c);
        if (is_terminal(child.state)) continue;
        txn.apply({c, TaskState::USER_KILLED, "ancestor " + target.str() + " killed", txn.now(),
                   std::nullopt});
        marked.push_back(c);
      }
    }
  } else {
    on_parent_terminal(txn, target);
  }
  return marked;
}

Uuid spawn(Txn& txn, const TaskSpec& spec, std::span<const Uuid> parents) {
  Task task = new_task(spec, txn.now());
  if (!parents.empty()) {
    task.batch_tag = txn.require(parents.front()).batch_tag;
  }
  txn.insert(task);
  if (parents.empty()) {
    txn.apply({task.id, classify_new(task, 0), "no pending parents", txn.now(), std::nullopt});
  } else {
    for (const auto& p : parents) add_dependency(txn, p, task.id);
  }
  return task.id;
}

std::vector<StateUpdate> refresh(Txn& txn) {
  std::vector<StateUpdate> applied;
  TaskFilter f;
  f.states = {TaskState::CREATED, TaskState::AWAITING_PARENTS};
  for (const auto& t : txn.query(f)) settle(txn, t, applied);
  return applied;
}

}  // namespace dag

DependencyEdge DagEngine::add_dependency(const Uuid& parent, const Uuid& child) {
  return store_.write([&](Txn& txn) { return dag::add_dependency(txn, parent, child); });
}

std::vector<StateUpdate> DagEngine::on_parent_terminal(const Uuid& parent) {
  return store_.write([&](Txn& txn) { return dag::on_parent_terminal(txn, parent); });
}

std::vector<Uuid> DagEngine::kill(const Uuid& target, bool recursive) {
  return store_.write([&](Txn& txn) { return dag::kill(txn, target, recursive); });
}

Uuid DagEngine::spawn(const TaskSpec& spec, std::optional<Uuid> parent) {
  std::vector<Uuid> parents;
  if (parent) parents.push_back(*parent);
  return spawn(spec, parents);
}

Uuid DagEngine::spawn(const TaskSpec& spec, std::span<const Uuid> parents) {
  return store_.write([&](Txn& txn) { return dag::spawn(txn, spec, parents); });
}

std::vector<StateUpdate> DagEngine::refresh() {
  return store_.write([&](Txn& txn) { return dag::refresh(txn); });
}

}  // namespace pilotgrid
