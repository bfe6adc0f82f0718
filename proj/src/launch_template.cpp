#include <fstream>
#include <sstream>

#include "pilotgrid/error.hpp"
#include "pilotgrid/platform.hpp"

namespace pilotgrid {

namespace fs = std::filesystem;

std::string render_placeholders(std::string_view pattern,
                                const std::map<std::string, std::string>& values) {
  std::string out;
  out.reserve(pattern.size() + 64);
  std::size_t i = 0;
  while (i < pattern.size()) {
    char c = pattern[i];
    if (c != '{') {
      out.push_back(c);
      ++i;
      continue;
    }
    auto close = pattern.find('}', i);
    if (close == std::string_view::npos) {
      out.append(pattern.substr(i));
      break;
    }
    std::string key(pattern.substr(i + 1, close - i - 1));
    auto it = values.find(key);
    if (it == values.end())
      throw Error(ErrorCode::UnboundPlaceholder, "unbound placeholder {" + key + "}", key);
    out += it->second;
    i = close + 1;
    if (it->second.empty() && i < pattern.size() && pattern[i] == ' ') ++i;
  }
  while (!out.empty() && (out.back() == ' ' || out.back() == '\t')) out.pop_back();
  return out;
}

TemplateRegistry::TemplateRegistry() {
  for (auto& t : builtins()) add(std::move(t));
}

std::vector<LaunchTemplate> TemplateRegistry::builtins() {
  return {
      {"aprun", "aprun -n {nprocs} -N {ranks_per_node} {env_flags} {exe} {args}", "-e {key}={value}"},
      {"mpirun", "mpirun -n {nprocs} -npernode {ranks_per_node} {env_flags} {exe} {args}",
       "-x {key}={value}"},
      // srun exports the caller's environment by default
      {"srun", "srun -n {nprocs} -N {num_nodes} --ntasks-per-node={ranks_per_node} {exe} {args}", ""},
      {"local",
       "env PILOTGRID_NPROCS={nprocs} PILOTGRID_NUM_NODES={num_nodes} "
       "PILOTGRID_RANKS_PER_NODE={ranks_per_node} {env_flags} {exe} {args}",
       "{key}={value}"},
  };
}

void TemplateRegistry::add(LaunchTemplate t) {
  auto name = t.name;
  templates_[name] = std::move(t);
}

const LaunchTemplate& TemplateRegistry::get(std::string_view name) const {
  auto it = templates_.find(name);
  if (it == templates_.end())
    throw Error(ErrorCode::UnknownTemplate, "unknown launch template: " + std::string(name),
                std::string(name));
  return it->second;
}

std::vector<std::string> TemplateRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : templates_) out.push_back(k);
  return out;
}

LaunchTemplate TemplateRegistry::parse(std::string name, std::string_view text) {
  LaunchTemplate t;
  t.name = std::move(name);
  t.pattern.clear();
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.rfind("#env", 0) == 0) {
      auto rest = line.substr(4);
      auto start = rest.find_first_not_of(" \t");
      t.env_format = start == std::string::npos ? "" : rest.substr(start);
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    if (t.pattern.empty()) t.pattern = line;
  }
  if (t.pattern.empty())
    throw Error(ErrorCode::InvalidField, "launch template " + t.name + " has no command line",
                t.name);
  return t;
}

std::string TemplateRegistry::serialize(const LaunchTemplate& t) {
  return "#env " + t.env_format + "\n" + t.pattern + "\n";
}

void TemplateRegistry::load_directory(const fs::path& dir) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) return;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() != ".tmpl") continue;
    std::ifstream in(entry.path());
    std::stringstream buf;
    buf << in.rdbuf();
    add(parse(entry.path().stem().string(), buf.str()));
  }
}

std::string render_launch_command(const Task& task, std::string_view executable,
                                  const LaunchTemplate* tmpl, JobMode mode) {
  std::string exe = shell_quote(executable);
  if (mode == JobMode::Serial || tmpl == nullptr) {
    if (task.args.empty()) return exe;
    return exe + " " + task.args;
  }
  std::string env_flags;
  if (!tmpl->env_format.empty()) {
    for (const auto& [k, v] : task.environment) {
      auto flag = render_placeholders(tmpl->env_format,
                                      {{"key", k}, {"value", shell_quote(v)}});
      if (!env_flags.empty()) env_flags += ' ';
      env_flags += flag;
    }
  }
  std::map<std::string, std::string> values{
      {"nprocs", std::to_string(task.num_nodes * task.ranks_per_node)},
      {"num_nodes", std::to_string(task.num_nodes)},
      {"ranks_per_node", std::to_string(task.ranks_per_node)},
      {"env_flags", env_flags},
      {"exe", exe},
      {"args", task.args},
  };
  return render_placeholders(tmpl->pattern, values);
}

std::string render_launch_command(const Task& task, std::string_view executable,
                                  const TemplateRegistry& registry,
                                  std::string_view template_name, JobMode mode) {
  if (mode == JobMode::Serial) return render_launch_command(task, executable, nullptr, mode);
  return render_launch_command(task, executable, &registry.get(template_name), mode);
}

}  // namespace pilotgrid
