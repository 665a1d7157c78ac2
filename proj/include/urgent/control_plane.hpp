#pragma once

// Everything one deployment runs, built from a Config: store, broker,
// simulated machines, machine interface and status, workflow engine, sensor
// gateway, event ring and HTTP gateway.

#include <condition_variable>
#include <map>
#include <memory>
#include <mutex>
#include <thread>

#include "urgent/broker.hpp"
#include "urgent/config.hpp"
#include "urgent/events.hpp"
#include "urgent/gateway.hpp"
#include "urgent/machine.hpp"
#include "urgent/machine_status.hpp"
#include "urgent/sensors.hpp"
#include "urgent/simulator.hpp"
#include "urgent/state_store.hpp"
#include "urgent/workflow_engine.hpp"

namespace urgent {

/// The consumer installed for a sensor type without its own handler: a JSON
/// object payload becomes the trigger context, anything else an empty one.
nlohmann::json json_payload_context(StateStore& store, const sensors::SensorEnvelope& e);

class ControlPlane {
 public:
  struct Options {
    /// Replaces the clock derived from the simulator's clock_rate.
    const Clock* clock = nullptr;
    /// Per sensor type; json_payload_context otherwise.
    std::map<std::string, sensors::SensorGateway::Handler> handlers;
    sensors::Fetcher fetch = sensors::default_fetch;
    bool serve_http = true;
  };

  explicit ControlPlane(Config cfg) : ControlPlane(std::move(cfg), Options{}) {}
  ControlPlane(Config cfg, Options opts);
  ~ControlPlane();
  ControlPlane(const ControlPlane&) = delete;
  ControlPlane& operator=(const ControlPlane&) = delete;

  /// Starts the machine pollers, the pull-sensor ticker and the HTTP server.
  void start();
  void stop();

  const Config& config() const { return cfg_; }
  const Clock& clock() const { return *clock_; }
  StateStore& store() { return *store_; }
  mq::Broker& broker() { return *broker_; }
  sim::SimCluster* cluster() { return cluster_.get(); }
  machine::MachineInterface& machines() { return *mi_; }
  status::MachineStatus& status() { return *status_; }
  wf::WorkflowEngine& engine() { return *engine_; }
  sensors::SensorGateway& sensors() { return *sensors_; }
  api::EventLog& events() { return *events_; }
  api::Gateway& gateway() { return *gateway_; }

 private:
  void sensor_ticker();

  Config cfg_;
  Options opts_;
  std::unique_ptr<Clock> own_clock_;
  const Clock* clock_ = nullptr;
  std::unique_ptr<sim::SimCluster> cluster_;
  std::unique_ptr<api::EventLog> events_;
  std::unique_ptr<StateStore> store_;
  std::unique_ptr<mq::Broker> broker_;
  std::unique_ptr<machine::MachineInterface> mi_;
  std::unique_ptr<status::MachineStatus> status_;
  std::unique_ptr<wf::WorkflowEngine> engine_;
  std::unique_ptr<sensors::SensorGateway> sensors_;
  std::unique_ptr<api::Gateway> gateway_;

  std::mutex run_mu_;
  std::condition_variable run_cv_;
  bool running_ = false;
  std::thread ticker_;
};

}  // namespace urgent
