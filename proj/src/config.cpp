#include "urgent/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>

namespace urgent {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

json read_json(const fs::path& file) {
  std::ifstream in(file);
  if (!in) fail(ErrorCode::NotFound, "cannot open " + file.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidArgument, file.string() + ": " + e.what());
  }
}

}  // namespace

std::vector<wf::WorkflowDefinition> load_workflow_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(ErrorCode::NotFound, "no workflow directory " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<wf::WorkflowDefinition> out;
  for (const auto& f : files) {
    try {
      out.push_back(wf::definition_from_json(read_json(f)));
    } catch (const Error& e) {
      throw Error(e.code(), f.filename().string() + ": " + e.what());
    }
  }
  return out;
}

Config config_from_json(const json& j, const fs::path& base) {
  Config c;
  try {
    if (!j.is_object()) fail(ErrorCode::InvalidArgument, "configuration must be a JSON object");
    c.data_dir = resolve(base, j.value("data_dir", std::string("data")));

    const json api = j.value("api", json::object());
    c.api.host = api.value("host", c.api.host);
    c.api.port = api.value("port", c.api.port);
    c.api.token = api.value("token", std::string());
    const json ref = api.value("reference_job", json::object());
    c.api.reference_nodes = ref.value("nodes", c.api.reference_nodes);
    c.api.reference_walltime_s = ref.value("walltime_s", c.api.reference_walltime_s);
    if (api.contains("static_dir")) c.api.static_dir = resolve(base, api["static_dir"].get<std::string>());
    c.api.event_capacity = api.value("event_capacity", c.api.event_capacity);
    if (c.api.port < 0 || c.api.port > 65535) fail(ErrorCode::InvalidArgument, "api.port out of range");
    if (c.api.reference_nodes < 1 || c.api.reference_walltime_s < 1)
      fail(ErrorCode::InvalidArgument, "api.reference_job must be positive");
    if (c.api.event_capacity == 0) fail(ErrorCode::InvalidArgument, "api.event_capacity must be positive");

    c.machine_status = status::status_config_from_json(j.value("machine_status", json::object()));

    for (const auto& m : j.value("machines", json::array()))
      c.machines.push_back(machine::machine_config_from_json(m));
    std::set<std::string> names;
    for (const auto& m : c.machines)
      if (!names.insert(m.name).second) fail(ErrorCode::InvalidArgument, "duplicate machine " + m.name);

    if (j.contains("simulator")) {
      const auto& s = j["simulator"];
      if (s.is_string()) {
        c.simulator = sim::load_sim_config(resolve(base, s.get<std::string>()).string());
      } else {
        const json& list = s.is_array() ? s : s.at("machines");
        for (const auto& m : list) c.simulator.push_back(sim::sim_machine_from_json(m));
      }
    }

    for (const auto& s : j.value("sensors", json::array()))
      c.sensors.push_back(sensors::sensor_type_from_json(s));

    if (j.contains("workflows_dir"))
      c.workflows = load_workflow_dir(resolve(base, j["workflows_dir"].get<std::string>()));
    for (const auto& w : j.value("workflows", json::array()))
      c.workflows.push_back(wf::definition_from_json(w));
    std::set<std::string> ids;
    for (const auto& w : c.workflows)
      if (!ids.insert(w.workflow_id).second) fail(ErrorCode::InvalidArgument, "duplicate workflow " + w.workflow_id);

    c.transport_timeout_s = j.value("transport_timeout_s", c.transport_timeout_s);
    if (!(c.transport_timeout_s > 0)) fail(ErrorCode::InvalidArgument, "transport_timeout_s must be > 0");
    const json broker = j.value("broker", json::object());
    c.broker_fsync = broker.value("fsync", c.broker_fsync);
    c.max_deliveries = broker.value("max_deliveries", c.max_deliveries);
    if (c.max_deliveries == 0) fail(ErrorCode::InvalidArgument, "broker.max_deliveries must be > 0");
    c.sensor_tick_s = j.value("sensor_tick_s", c.sensor_tick_s);
    if (!(c.sensor_tick_s > 0)) fail(ErrorCode::InvalidArgument, "sensor_tick_s must be > 0");
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("configuration: ") + e.what());
  }

  if (const char* env = std::getenv(kTokenEnv); env && *env) c.api.token = env;

  // Every sim-transport machine needs its simulated twin.
  for (const auto& m : c.machines) {
    if (m.transport != "sim") continue;
    const std::string target = starts_with(m.endpoint, "sim://") ? m.endpoint.substr(6) : m.name;
    const bool found = std::any_of(c.simulator.begin(), c.simulator.end(),
                                   [&](const sim::SimMachineConfig& s) { return s.name == target; });
    if (!found) fail(ErrorCode::InvalidArgument, m.name + ": no simulated machine '" + target + "'");
  }
  simulation_rate(c);
  return c;
}

Config load_config(const fs::path& file) {
  return config_from_json(read_json(file), fs::absolute(file).parent_path());
}

double simulation_rate(const Config& c) {
  if (c.simulator.empty()) return 1.0;
  const double rate = c.simulator.front().clock_rate;
  for (const auto& s : c.simulator)
    if (s.clock_rate != rate)
      fail(ErrorCode::InvalidArgument, "simulated machines must share one clock_rate");
  return rate;
}

}  // namespace urgent
