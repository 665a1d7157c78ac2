#include "rig.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

namespace urgent::testkit {

sim::SimMachineConfig sim_machine(const std::string& name, batch::Scheduler scheduler,
                                  std::int64_t nodes, double fraction) {
  sim::SimMachineConfig c;
  c.name = name;
  c.scheduler = scheduler;
  c.nodes = nodes;
  c.runtime_fraction = {sim::RuntimeFraction::Kind::FIXED, fraction, fraction};
  return c;
}

wf::WorkflowDefinition shipped_workflow(const std::string& file) {
  std::ifstream in(source_dir() / "config" / "workflows" / file);
  if (!in) fail(ErrorCode::NotFound, "no workflow file " + file);
  return wf::definition_from_json(nlohmann::json::parse(in));
}

Rig::Rig(Options opts)
    : cluster(opts.machines, opts.clock ? opts.clock : &clock), opts_(std::move(opts)) {
  for (const auto& m : opts_.machines) {
    machine::MachineConfig mc;
    mc.name = m.name;
    mc.scheduler = m.scheduler;
    mc.endpoint = "sim://" + m.name;
    mc.account = "vestec";
    mc.nodes = m.nodes;
    configs_.push_back(mc);
  }
  open(opts_.engine);
  status_->poll_all();
  const auto start = (opts_.clock ? opts_.clock : &clock)->now();
  const auto interval = static_cast<std::int64_t>(opts_.status.poll_interval_s);
  for (const auto& m : opts_.machines) {
    auto it = opts_.poll_offsets.find(m.name);
    next_poll_[m.name] = start + (it == opts_.poll_offsets.end() || it->second == 0 ? interval : it->second);
  }
}

Rig::~Rig() { close(); }

void Rig::open(wf::WorkflowEngine::Options engine) {
  const Clock* c = opts_.clock ? opts_.clock : &clock;
  store_ = std::make_unique<StateStore>(StateStore::Options{dir_ / "state", c});
  mq::Broker::Options bo;
  bo.dir = dir_ / "mq";
  bo.clock = c;
  bo.fsync = false;
  bo.dispatch = opts_.threaded ? mq::Broker::Dispatch::Threaded : mq::Broker::Dispatch::Manual;
  broker_ = std::make_unique<mq::Broker>(bo);
  mi_ = std::make_unique<machine::MachineInterface>(
      *store_, std::make_shared<machine::SimTransport>(cluster), configs_);
  status_ = std::make_unique<status::MachineStatus>(*store_, *mi_, opts_.status);
  engine_ = std::make_unique<wf::WorkflowEngine>(*store_, *broker_, *mi_, *status_, std::move(engine));
}

void Rig::close() {
  if (status_) status_->stop();
  engine_.reset();
  status_.reset();
  mi_.reset();
  broker_.reset();
  store_.reset();
}

void Rig::restart(wf::WorkflowEngine::Options engine) {
  close();
  open(std::move(engine));
  engine_->resume();
}

bool Rig::drain() {
  if (broker_->killed()) return false;
  try {
    broker_->run_until_idle();
  } catch (const Error& e) {
    if (e.code() != ErrorCode::InvalidState) throw;
  }
  return !broker_->killed();
}

bool Rig::step(std::int64_t dt) {
  if (!drain()) return false;
  clock.advance(dt);
  status_->poll_all();
  return drain();
}

void Rig::warm_up(int polls) {
  const auto interval = static_cast<std::int64_t>(opts_.status.poll_interval_s);
  for (int i = 0; i < polls; ++i) {
    clock.advance(interval);
    status_->poll_all();
    drain();
  }
  const auto now = clock.now();
  for (const auto& m : opts_.machines) {
    auto it = opts_.poll_offsets.find(m.name);
    next_poll_[m.name] = now + (it == opts_.poll_offsets.end() || it->second == 0 ? interval : it->second);
  }
}

bool Rig::tick(std::int64_t dt) {
  if (!drain()) return false;
  clock.advance(dt);
  const auto interval = static_cast<std::int64_t>(opts_.status.poll_interval_s);
  for (auto& [name, next] : next_poll_) {
    if (clock.now() < next) continue;
    status_->poll_machine(mi_->machine_id(name));
    next += interval;
    if (!drain()) return false;
  }
  return drain();
}

std::optional<ActivityStatus> Rig::run_ticks(const std::string& activity_id, int max_ticks,
                                             std::int64_t dt) {
  for (int i = 0; i <= max_ticks; ++i) {
    if (!drain()) return std::nullopt;
    auto s = store_->get_activity(activity_id).status;
    if (is_terminal(s)) return s;
    if (i == max_ticks || !tick(dt)) break;
  }
  return std::nullopt;
}

std::optional<ActivityStatus> Rig::run(const std::string& activity_id, int max_steps,
                                       std::int64_t dt) {
  for (int i = 0; i < max_steps; ++i) {
    if (!drain()) return std::nullopt;
    auto s = store_->get_activity(activity_id).status;
    if (is_terminal(s)) return s;
    if (!step(dt)) return std::nullopt;
  }
  auto s = store_->get_activity(activity_id).status;
  if (is_terminal(s)) return s;
  return std::nullopt;
}

}  // namespace urgent::testkit
