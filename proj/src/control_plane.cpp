#include "urgent/control_plane.hpp"

#include <algorithm>

namespace urgent {

using nlohmann::json;

json json_payload_context(StateStore& store, const sensors::SensorEnvelope& e) {
  if (e.size_bytes > 1 << 20) return json::object();
  const auto bytes = store.get_object(e.payload_uri);
  const json j = json::parse(bytes, nullptr, false);
  return j.is_object() ? j : json::object();
}

ControlPlane::ControlPlane(Config cfg, Options opts) : cfg_(std::move(cfg)), opts_(std::move(opts)) {
  if (opts_.clock) {
    clock_ = opts_.clock;
  } else if (const double rate = simulation_rate(cfg_); rate == 1.0) {
    own_clock_ = std::make_unique<SystemClock>();
  } else {
    own_clock_ = std::make_unique<ScaledClock>(SystemClock().now(), rate);
  }
  if (!clock_) clock_ = own_clock_.get();

  for (const auto& m : cfg_.machines)
    if (m.transport != "sim")
      fail(ErrorCode::Unsupported, m.name + ": only the simulator transport ships");
  if (!cfg_.simulator.empty()) cluster_ = std::make_unique<sim::SimCluster>(cfg_.simulator, clock_);

  events_ = std::make_unique<api::EventLog>(cfg_.api.event_capacity, clock_);
  std::filesystem::create_directories(cfg_.data_dir);
  store_ = std::make_unique<StateStore>(StateStore::Options{cfg_.data_dir / "state", clock_});
  store_->subscribe([ev = events_.get()](const Transition& t) {
    if (t.kind == Transition::Kind::ACTIVITY) {
      ev->emit(api::EventKind::ACTIVITY_STATUS, {{"activity_id", t.id}, {"from", t.from}, {"to", t.to}});
    } else {
      ev->emit(api::EventKind::JOB_STATUS, {{"job_id", t.id},
                                            {"activity_id", t.activity_id},
                                            {"machine_id", t.machine_id},
                                            {"batch_id", t.batch_id},
                                            {"from", t.from},
                                            {"to", t.to}});
    }
  });

  mq::Broker::Options bo;
  bo.dir = cfg_.data_dir / "mq";
  bo.clock = clock_;
  bo.dispatch = mq::Broker::Dispatch::Threaded;
  bo.fsync = cfg_.broker_fsync;
  bo.max_deliveries = cfg_.max_deliveries;
  broker_ = std::make_unique<mq::Broker>(bo);
  for (const auto& e : broker_->recovery_errors()) log_warn(std::string("broker recovery: ") + e.what());

  std::shared_ptr<machine::Transport> transport;
  if (cluster_)
    transport = std::make_shared<machine::TimedTransport>(std::make_shared<machine::SimTransport>(*cluster_),
                                                          cfg_.transport_timeout_s);
  else if (!cfg_.machines.empty())
    fail(ErrorCode::InvalidArgument, "machines configured without a simulator");
  mi_ = std::make_unique<machine::MachineInterface>(*store_, transport, cfg_.machines);
  status_ = std::make_unique<status::MachineStatus>(*store_, *mi_, cfg_.machine_status);
  status_->add_listener([this](const QueueSnapshot& s) {
    const auto rel = status_->reliability(s.machine_id);
    events_->emit(api::EventKind::MACHINE_STATUS, {{"machine_id", s.machine_id},
                                                   {"name", mi_->config(s.machine_id).name},
                                                   {"poll_ok", s.poll_ok},
                                                   {"polled_at", format_utc(s.polled_at)},
                                                   {"queue_length", s.entries.size()},
                                                   {"reliability", rel.reliability}});
  });

  wf::WorkflowEngine::Options eo;
  eo.max_deliveries = cfg_.max_deliveries;
  engine_ = std::make_unique<wf::WorkflowEngine>(*store_, *broker_, *mi_, *status_, eo);
  for (const auto& def : cfg_.workflows) engine_->register_workflow(def);
  engine_->resume();

  sensors::SensorGateway::Options so;
  so.types = cfg_.sensors;
  so.fetch = opts_.fetch;
  sensors_ = std::make_unique<sensors::SensorGateway>(*store_, *broker_, so);
  sensors_->set_trigger_sink([this](const std::string& type, const std::string& env, const json& ctx) {
    engine_->on_trigger(type, env, ctx);
  });
  sensors_->add_arrival_listener([this](const sensors::SensorEnvelope& e) {
    events_->emit(api::EventKind::SENSOR_ARRIVAL, sensors::to_json(e));
  });
  for (const auto& t : cfg_.sensors) {
    auto it = opts_.handlers.find(t.sensor_type);
    sensors::SensorGateway::Handler h;
    if (it != opts_.handlers.end()) h = it->second;
    else h = [this](const sensors::SensorEnvelope& e) { return json_payload_context(*store_, e); };
    sensors_->register_consumer(t.sensor_type, std::move(h));
  }

  api::Services services{*store_, *engine_, *mi_, *status_, *sensors_, *events_, nullptr};
  services.viz = [this](const std::string& name) -> std::optional<api::VizEndpoint> {
    if (!cluster_) return std::nullopt;
    for (const auto& m : cfg_.machines) {
      if (m.name != name) continue;
      const std::string target = starts_with(m.endpoint, "sim://") ? m.endpoint.substr(6) : m.name;
      if (!cluster_->has(target)) return std::nullopt;
      const auto& sc = cluster_->machine(target).config();
      return api::VizEndpoint{sc.login_host, sc.viz_port};
    }
    return std::nullopt;
  };
  gateway_ = std::make_unique<api::Gateway>(services, cfg_.api);
}

ControlPlane::~ControlPlane() {
  stop();
  gateway_.reset();
  sensors_.reset();
  engine_.reset();
  status_.reset();
  mi_.reset();
  broker_.reset();
  store_.reset();
}

void ControlPlane::start() {
  {
    std::lock_guard lock(run_mu_);
    if (running_) return;
    running_ = true;
  }
  status_->start();
  if (std::any_of(cfg_.sensors.begin(), cfg_.sensors.end(),
                  [](const sensors::SensorTypeConfig& t) { return t.mode == sensors::Mode::PULL; }))
    ticker_ = std::thread([this] { sensor_ticker(); });
  if (opts_.serve_http) gateway_->start();
}

void ControlPlane::stop() {
  {
    std::lock_guard lock(run_mu_);
    if (!running_) return;
    running_ = false;
  }
  run_cv_.notify_all();
  if (ticker_.joinable()) ticker_.join();
  gateway_->stop();
  status_->stop();
}

void ControlPlane::sensor_ticker() {
  const auto period = clock_->to_wall(cfg_.sensor_tick_s);
  while (true) {
    try {
      sensors_->poll_pull_sources();
    } catch (const std::exception& e) {
      log_warn(std::string("sensor poll: ") + e.what());
    }
    std::unique_lock lock(run_mu_);
    run_cv_.wait_for(lock, period, [&] { return !running_; });
    if (!running_) return;
  }
}

}  // namespace urgent
