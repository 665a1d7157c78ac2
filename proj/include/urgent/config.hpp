#pragma once

// Deployment configuration: one JSON file naming machines, simulator,
// sensors, workflows and the HTTP surface. Relative paths resolve against the
// file's directory.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "urgent/machine.hpp"
#include "urgent/machine_status.hpp"
#include "urgent/sensors.hpp"
#include "urgent/simulator.hpp"
#include "urgent/workflow.hpp"

namespace urgent {

/// Overrides api.token when set and non-empty.
inline constexpr const char* kTokenEnv = "CONTROL_API_TOKEN";

struct ApiConfig {
  std::string host = "127.0.0.1";
  int port = 8700;
  std::string token;
  /// Job shape for the wait estimates on GET /api/machines.
  std::int64_t reference_nodes = 1;
  std::int64_t reference_walltime_s = 3600;
  /// Console bundle served at /; skipped when empty or missing.
  std::filesystem::path static_dir;
  std::size_t event_capacity = 10000;
};

struct Config {
  std::filesystem::path data_dir = "data";
  ApiConfig api;
  status::StatusConfig machine_status;
  std::vector<machine::MachineConfig> machines;
  std::vector<sim::SimMachineConfig> simulator;
  std::vector<sensors::SensorTypeConfig> sensors;
  std::vector<wf::WorkflowDefinition> workflows;
  double transport_timeout_s = machine::kDefaultTransportTimeoutS;
  bool broker_fsync = true;
  std::uint32_t max_deliveries = 5;
  /// How often, in clock seconds, PULL sensors are checked for due sources.
  double sensor_tick_s = 10;
};

/// InvalidArgument for malformed or inconsistent settings. Reads the
/// environment token override.
Config config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
Config load_config(const std::filesystem::path& file);

/// Every *.json definition in `dir`, in file name order.
std::vector<wf::WorkflowDefinition> load_workflow_dir(const std::filesystem::path& dir);

/// Virtual seconds per wall second shared by the simulated machines; 1 with
/// no simulator. InvalidArgument when they disagree.
double simulation_rate(const Config& c);

}  // namespace urgent
