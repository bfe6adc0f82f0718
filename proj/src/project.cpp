#include "pilotgrid/project.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pilotgrid/error.hpp"
#include "pilotgrid/platform.hpp"
#include "pilotgrid/scheduler_service.hpp"

namespace pilotgrid {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
  if (!out) throw Error(ErrorCode::Io, "cannot write " + p.string(), p.string());
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

Project Project::init(const fs::path& root_in) {
  const fs::path root = fs::absolute(root_in).lexically_normal();
  std::error_code ec;
  if (fs::exists(root, ec) && !(fs::is_directory(root, ec) && fs::is_empty(root, ec)))
    throw Error(ErrorCode::AlreadyExists, root.string() + " already exists", root.string());
  Project p(root);
  for (const auto& d : {p.log_dir(), p.data_dir(), p.templates_dir(), p.store_path().parent_path()})
    fs::create_directories(d);
  TaskStore::create(p.store_path());

  QueuePolicy policy;
  policy.queues.push_back({"default", 2, {{1, 4, 0.25, 1.0}, {5, 64, 0.5, 2.0}}});
  write_text(p.policy_path(), policy.dump() + "\n");

  Settings s;
  json js{{"platform", s.platform},
          {"local_nodes", s.local_nodes},
          {"launch_template", s.launch_template},
          {"transition_workers", s.transition_workers},
          {"lease_seconds", s.lease_seconds},
          {"launcher_cycle_seconds", s.launcher_cycle_seconds},
          {"service_cycle_seconds", s.service_cycle_seconds},
          {"client_dir", s.client_dir}};
  write_text(p.settings_path(), js.dump(2) + "\n");

  for (const auto& t : TemplateRegistry::builtins())
    write_text(p.templates_dir() / (t.name + ".tmpl"), TemplateRegistry::serialize(t));
  write_text(p.batch_template_path(), default_batch_template());
  return p;
}

Project Project::open(const fs::path& root_in) {
  Project p(fs::absolute(root_in).lexically_normal());
  if (!fs::exists(p.store_path()))
    throw Error(ErrorCode::StoreUnreachable, "no project store under " + p.root_.string(),
                p.root_.string());
  return p;
}

Project Project::active(const Environment& env) {
  auto it = env.find(kEnvDbPath);
  if (it == env.end() || it->second.empty())
    throw Error(ErrorCode::StoreUnreachable,
                std::string(kEnvDbPath) + " is not set; run `pilotgrid activate <project>`",
                kEnvDbPath);
  return open(it->second);
}

TaskStore Project::store(TaskStore::Options options) const {
  return TaskStore::open(store_path(), std::move(options));
}

Settings Project::settings() const {
  Settings s;
  if (!fs::exists(settings_path())) return s;
  try {
    auto j = json::parse(read_text(settings_path()));
    s.platform = j.value("platform", s.platform);
    s.local_nodes = j.value("local_nodes", s.local_nodes);
    s.launch_template = j.value("launch_template", s.launch_template);
    s.transition_workers = j.value("transition_workers", s.transition_workers);
    s.lease_seconds = j.value("lease_seconds", s.lease_seconds);
    s.launcher_cycle_seconds = j.value("launcher_cycle_seconds", s.launcher_cycle_seconds);
    s.service_cycle_seconds = j.value("service_cycle_seconds", s.service_cycle_seconds);
    s.client_dir = j.value("client_dir", s.client_dir);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidField, settings_path().string() + ": " + e.what(),
                settings_path().string());
  }
  return s;
}

std::string Project::batch_template() const {
  if (!fs::exists(batch_template_path())) return default_batch_template();
  return read_text(batch_template_path());
}

}  // namespace pilotgrid
