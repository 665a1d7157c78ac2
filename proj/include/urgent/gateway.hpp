#pragma once

// HTTP surface: activities, jobs, machines, workflows, sensor push, the live
// event stream and the visualization hand-off.

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "urgent/config.hpp"
#include "urgent/events.hpp"
#include "urgent/machine.hpp"
#include "urgent/machine_status.hpp"
#include "urgent/sensors.hpp"
#include "urgent/state_store.hpp"
#include "urgent/workflow_engine.hpp"

namespace httplib {
class Server;
}

namespace urgent::api {

nlohmann::json to_json(const ActivityRecord& a);
nlohmann::json to_json(const JobRecord& j);

/// HTTP status for an error code: 404, 400, 409 or 500.
int http_status(ErrorCode code);

struct VizEndpoint {
  std::string host;
  int port = 0;
};

struct Services {
  StateStore& store;
  wf::WorkflowEngine& engine;
  machine::MachineInterface& machines;
  status::MachineStatus& status;
  sensors::SensorGateway& sensors;
  EventLog& events;
  /// Where results on the named machine can be visualized.
  std::function<std::optional<VizEndpoint>(const std::string& machine_name)> viz;
};

class Gateway {
 public:
  /// An empty token is replaced by a random one (see token()).
  Gateway(Services services, ApiConfig cfg);
  ~Gateway();
  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  /// Binds host:port (port 0 picks a free one) and serves on a background
  /// thread. Returns the bound port.
  int start();
  void stop();
  int port() const { return port_; }
  const std::string& token() const { return cfg_.token; }

 private:
  void routes();
  nlohmann::json machine_view(const MachineRecord& m) const;
  nlohmann::json activity_view(const ActivityRecord& a) const;

  Services s_;
  ApiConfig cfg_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace urgent::api
