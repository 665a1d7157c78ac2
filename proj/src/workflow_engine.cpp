#include "urgent/workflow_engine.hpp"

#include <algorithm>

#include "urgent/predicate.hpp"

namespace urgent::wf {

using nlohmann::json;

const char* to_string(StageMessage::Type t) {
  switch (t) {
    case StageMessage::Type::ARRIVAL: return "ARRIVAL";
    case StageMessage::Type::SKIP: return "SKIP";
    case StageMessage::Type::INSTANCE: return "INSTANCE";
    case StageMessage::Type::CONTINUATION: return "CONTINUATION";
  }
  return "?";
}

json to_json(const StageMessage& m) {
  return json{{"activity_id", m.activity_id}, {"stage", m.stage}, {"type", to_string(m.type)},
              {"from", m.from}, {"index", m.index}, {"job_id", m.job_id}, {"context", m.context}};
}

StageMessage stage_message_from_json(const json& j) {
  StageMessage m;
  try {
    m.activity_id = j.at("activity_id").get<std::string>();
    m.stage = j.at("stage").get<std::string>();
    const auto type = j.at("type").get<std::string>();
    bool known = false;
    for (auto t : {StageMessage::Type::ARRIVAL, StageMessage::Type::SKIP,
                   StageMessage::Type::INSTANCE, StageMessage::Type::CONTINUATION})
      if (type == to_string(t)) m.type = t, known = true;
    if (!known) fail(ErrorCode::InvalidArgument, "unknown stage message type " + type);
    m.from = j.value("from", std::string());
    m.index = j.value("index", std::int64_t{0});
    m.job_id = j.value("job_id", std::string());
    m.context = j.value("context", json::object());
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("stage message: ") + e.what());
  }
  return m;
}

namespace {

constexpr const char* kJobKey = "wfjob:";
constexpr const char* kTriggerKey = "trigger:";

json empty_barrier() {
  return json{{"arrivals", json::object()}, {"fired", false}, {"skipped", false},
              {"done", false}, {"results", json::object()}};
}

std::vector<std::string> required_arrivals(const WorkflowDefinition& def, const std::string& stage) {
  if (stage == def.entry_stage) return {""};
  return def.incoming(stage);
}

std::int64_t instances(const Stage& s) { return s.fan_out.value_or(1); }

bool condition_error(const Error& e) {
  return e.code() == ErrorCode::MissingField || e.code() == ErrorCode::TypeMismatch;
}

// Moves an activity to `to`, passing through ACTIVE when still PENDING.
// False when it was already terminal.
bool set_activity(StateStore& store, const std::string& id, ActivityStatus to) {
  auto a = store.get_activity(id);
  if (is_terminal(a.status)) return false;
  if (a.status == ActivityStatus::PENDING && to != ActivityStatus::ACTIVE)
    store.update_activity_status(id, ActivityStatus::ACTIVE);
  if (a.status != to) store.update_activity_status(id, to);
  return true;
}

}  // namespace

WorkflowEngine::WorkflowEngine(StateStore& store, mq::Broker& broker,
                               machine::MachineInterface& machines, status::MachineStatus& status,
                               Options opts)
    : store_(store),
      broker_(broker),
      machines_(machines),
      status_(status),
      opts_(std::move(opts)),
      hook_(std::make_shared<Hook>()) {
  hook_->engine = this;
  auto hook = hook_;
  // Job transitions come from whichever thread changed the job; the observer
  // only publishes and never writes to the store.
  store_.subscribe([hook](const Transition& t) {
    if (t.kind != Transition::Kind::JOB || t.from.empty()) return;
    const auto to = parse_job_status(t.to);
    if (!is_terminal(to)) return;
    Hook::Guard g(*hook);
    if (!g) return;
    try {
      g->on_job_event(t.id, to);
    } catch (const std::exception& e) {
      log_warn("job event " + t.id + " not published: " + e.what());
    }
  });
  status_.add_listener([hook](const QueueSnapshot&) {
    Hook::Guard g(*hook);
    if (g) g->after_poll();
  });
}

WorkflowEngine::~WorkflowEngine() {
  hook_->close();
  std::lock_guard lock(mu_);
  for (auto& [id, inst] : installed_)
    for (const auto& c : inst.consumers) {
      try {
        broker_.cancel(c);
      } catch (const std::exception&) {
      }
    }
}

// ---------------------------------------------------------------------------
// Hook: lets callbacks registered with longer-lived objects outlast us.

WorkflowEngine::Hook::Guard::Guard(Hook& h) : h_(h) {
  std::lock_guard lock(h_.mu);
  if (!h_.engine) return;
  ++h_.active;
  e_ = h_.engine;
}

WorkflowEngine::Hook::Guard::~Guard() {
  if (!e_) return;
  std::lock_guard lock(h_.mu);
  --h_.active;
  h_.cv.notify_all();
}

void WorkflowEngine::Hook::close() {
  std::unique_lock lock(mu);
  engine = nullptr;
  cv.wait(lock, [&] { return active == 0; });
}

// ---------------------------------------------------------------------------
// Registration

std::string WorkflowEngine::register_workflow(const WorkflowDefinition& def) {
  validate(def);
  const auto text = to_json(def).dump();
  if (auto existing = store_.get_workflow(def.workflow_id)) {
    if (json::parse(*existing) != to_json(def))
      fail(ErrorCode::AlreadyRegistered,
           "workflow " + def.workflow_id + " is registered with a different definition");
  } else {
    store_.put_workflow(def.workflow_id, text);
  }
  install(def);
  return def.workflow_id;
}

void WorkflowEngine::install(const WorkflowDefinition& def) {
  {
    std::lock_guard lock(mu_);
    if (installed_.count(def.workflow_id)) return;
    installed_[def.workflow_id].def = def;
  }
  broker_.declare_queue(error_queue(def.workflow_id), true);
  std::vector<std::string> consumers;
  auto hook = hook_;
  for (const auto& s : def.stages) {
    const auto q = stage_queue(def.workflow_id, s.name);
    broker_.declare_queue(q, true);
    consumers.push_back(broker_.consume(
        q,
        [hook](const mq::Message& m) {
          Hook::Guard g(*hook);
          if (!g) throw Error(ErrorCode::InvalidState, "workflow engine is shutting down");
          g->handle_delivery(m);
        },
        1));
  }
  std::lock_guard lock(mu_);
  installed_[def.workflow_id].consumers = std::move(consumers);
}

std::vector<WorkflowDefinition> WorkflowEngine::workflows() const {
  std::lock_guard lock(mu_);
  std::vector<WorkflowDefinition> out;
  for (const auto& [id, inst] : installed_) out.push_back(inst.def);
  return out;
}

std::optional<WorkflowDefinition> WorkflowEngine::workflow(const std::string& workflow_id) const {
  std::lock_guard lock(mu_);
  auto it = installed_.find(workflow_id);
  if (it == installed_.end()) return std::nullopt;
  return it->second.def;
}

WorkflowDefinition WorkflowEngine::def_for(const std::string& workflow_id) const {
  if (auto d = workflow(workflow_id)) return *d;
  fail(ErrorCode::NotFound, "unknown workflow " + workflow_id);
}

std::mutex& WorkflowEngine::activity_mutex(const std::string& activity_id) {
  std::lock_guard lock(mu_);
  auto& p = activity_mu_[activity_id];
  if (!p) p = std::make_unique<std::mutex>();
  return *p;
}

void WorkflowEngine::fault(const std::string& point) {
  if (opts_.fault) opts_.fault(point);
}

bool WorkflowEngine::live(const std::string& activity_id) const {
  return !is_terminal(store_.get_activity(activity_id).status);
}

json WorkflowEngine::barrier(const std::string& activity_id, const std::string& stage) const {
  auto b = store_.get_barrier(activity_id, stage);
  return b ? json::parse(*b) : json();
}

void WorkflowEngine::save_barrier(const std::string& activity_id, const std::string& stage,
                                  const json& b) {
  store_.put_barrier(activity_id, stage, b.dump());
}

void WorkflowEngine::publish(const WorkflowDefinition& def, const StageMessage& m) {
  broker_.publish(stage_queue(def.workflow_id, m.stage), to_json(m).dump());
}

// ---------------------------------------------------------------------------
// Activities

std::string WorkflowEngine::start_activity(const std::string& workflow_id, const json& context,
                                           Origin origin) {
  const auto def = def_for(workflow_id);
  if (!context.is_object()) fail(ErrorCode::InvalidArgument, "initial context must be an object");
  auto a = store_.create_activity("workflow", workflow_id,
                                  {{"origin", to_string(origin)}, {"context", context.dump()}});
  fault("start.created");
  std::lock_guard lock(activity_mutex(a.activity_id));
  kick(def, a);
  return a.activity_id;
}

void WorkflowEngine::kick(const WorkflowDefinition& def, const ActivityRecord& a) {
  StageMessage m;
  m.activity_id = a.activity_id;
  m.stage = def.entry_stage;
  auto it = a.metadata.find("context");
  m.context = it == a.metadata.end() ? json::object() : json::parse(it->second);
  publish(def, m);
  fault("start.published");
  if (a.status == ActivityStatus::PENDING)
    store_.update_activity_status(a.activity_id, ActivityStatus::ACTIVE);
}

std::vector<std::string> WorkflowEngine::on_trigger(const std::string& sensor_type,
                                                    const std::string& envelope_id,
                                                    const json& context) {
  std::vector<std::string> started;
  for (const auto& def : workflows()) {
    const bool wanted = std::any_of(def.triggers.begin(), def.triggers.end(), [&](const Trigger& t) {
      return t.kind == TriggerKind::SENSOR && t.sensor_type == sensor_type;
    });
    if (!wanted) continue;
    const auto key = kTriggerKey + envelope_id + ":" + def.workflow_id;
    if (store_.get_kv(key)) continue;
    json ctx = context.is_object() ? context : json::object();
    ctx["sensor.type"] = sensor_type;
    ctx["sensor.envelope_id"] = envelope_id;
    auto a = store_.create_activity("workflow", def.workflow_id,
                                    {{"origin", to_string(Origin::SENSOR)}, {"context", ctx.dump()},
                                     {"envelope_id", envelope_id}});
    store_.put_kv(key, a.activity_id);
    std::lock_guard lock(activity_mutex(a.activity_id));
    kick(def, a);
    started.push_back(a.activity_id);
  }
  return started;
}

void WorkflowEngine::cancel_activity(const std::string& activity_id) {
  std::lock_guard lock(activity_mutex(activity_id));
  auto a = store_.get_activity(activity_id);
  if (a.status == ActivityStatus::CANCELLED) return;
  if (is_terminal(a.status))
    fail(ErrorCode::InvalidState, activity_id + " is already " + to_string(a.status));
  set_activity(store_, activity_id, ActivityStatus::CANCELLED);
  cancel_outstanding(activity_id);
}

void WorkflowEngine::check_complete(const WorkflowDefinition& def, const std::string& activity_id) {
  for (const auto& s : def.stages) {
    auto b = barrier(activity_id, s.name);
    if (b.is_null() || !b.value("done", false)) return;
  }
  try {
    set_activity(store_, activity_id, ActivityStatus::COMPLETED);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::InvalidTransition) throw;
  }
}

void WorkflowEngine::fail_activity(const WorkflowDefinition& def, const std::string& activity_id,
                                   const std::string& stage, const std::string& reason,
                                   const json& context) {
  if (!live(activity_id)) return;
  log_warn("activity " + activity_id + " failed at " + stage + ": " + reason);
  json diag{{"activity_id", activity_id}, {"workflow_id", def.workflow_id}, {"stage", stage},
            {"reason", reason}, {"context", context}};
  broker_.publish(error_queue(def.workflow_id), diag.dump());
  try {
    set_activity(store_, activity_id, ActivityStatus::ERROR);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::InvalidTransition) throw;
  }
  cancel_outstanding(activity_id);
}

void WorkflowEngine::cancel_outstanding(const std::string& activity_id) {
  for (const auto& j : store_.query_jobs(JobQuery{activity_id, std::nullopt, std::nullopt})) {
    if (is_terminal(j.status)) continue;
    try {
      if (j.batch_id.empty()) store_.update_job_status(j.job_id, JobStatus::CANCELLED);
      else machines_.cancel_job(j.job_id);
    } catch (const std::exception& e) {
      log_warn("cancel of " + j.job_id + ": " + e.what());
      try {
        store_.update_job_status(j.job_id, JobStatus::CANCELLED);
      } catch (const std::exception&) {
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Message handling

void WorkflowEngine::handle_delivery(const mq::Message& m) {
  StageMessage msg;
  try {
    msg = stage_message_from_json(json::parse(m.payload));
  } catch (const std::exception& e) {
    log_warn("malformed stage message " + m.message_id + " on " + m.queue + ": " + e.what());
    broker_.nack(m.message_id, false);
    return;
  }
  try {
    advance(msg);
  } catch (const std::exception& e) {
    if (broker_.killed()) throw;
    log_warn("stage " + msg.stage + " of " + msg.activity_id + " (" + to_string(msg.type) +
             ") failed: " + e.what());
    if (m.delivery_count >= opts_.max_deliveries) {
      try {
        const auto def = def_for(store_.get_activity(msg.activity_id).workflow_id);
        std::lock_guard lock(activity_mutex(msg.activity_id));
        fail_activity(def, msg.activity_id, msg.stage, e.what(), msg.context);
      } catch (const std::exception& e2) {
        log_warn(std::string("could not fail activity: ") + e2.what());
      }
    }
    throw;
  }
  broker_.ack(m.message_id);
}

std::vector<StageMessage> WorkflowEngine::advance(const StageMessage& msg) {
  ActivityRecord a;
  try {
    a = store_.get_activity(msg.activity_id);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NotFound) throw;
    log_warn("message for unknown activity " + msg.activity_id + " dropped");
    return {};
  }
  const auto def = def_for(a.workflow_id);
  def.stage(msg.stage);
  std::lock_guard lock(activity_mutex(msg.activity_id));
  switch (msg.type) {
    case StageMessage::Type::ARRIVAL:
    case StageMessage::Type::SKIP: return on_arrival(def, msg);
    case StageMessage::Type::INSTANCE: return on_instance(def, msg);
    case StageMessage::Type::CONTINUATION: return on_continuation(def, msg);
  }
  return {};
}

std::vector<StageMessage> WorkflowEngine::on_arrival(const WorkflowDefinition& def,
                                                     const StageMessage& msg) {
  if (!live(msg.activity_id)) return {};
  auto b = barrier(msg.activity_id, msg.stage);
  if (b.is_null()) b = empty_barrier();
  if (b["fired"].get<bool>() || b["done"].get<bool>()) return {};

  const auto required = required_arrivals(def, msg.stage);
  if (std::find(required.begin(), required.end(), msg.from) == required.end()) {
    log_warn("stage " + msg.stage + " got an arrival from unrelated stage '" + msg.from + "'");
    return {};
  }
  b["arrivals"][msg.from] = {{"skip", msg.type == StageMessage::Type::SKIP},
                             {"context", msg.context}};

  bool all = true, all_skip = true;
  for (const auto& r : required) {
    if (!b["arrivals"].contains(r)) all = false;
    else if (!b["arrivals"][r]["skip"].get<bool>()) all_skip = false;
  }
  const auto& stage = def.stage(msg.stage);
  if (!all) {
    save_barrier(msg.activity_id, msg.stage, b);
    return {};
  }
  if (all_skip) return skip_stage(def, stage, msg.activity_id, b);

  // Merge live arrivals in ascending source order; later sources win.
  json merged = json::object();
  for (const auto& r : required) {
    const auto& arr = b["arrivals"][r];
    if (arr["skip"].get<bool>()) continue;
    for (const auto& [k, v] : arr["context"].items()) merged[k] = v;
  }
  b["input"] = merged;
  b["fired"] = true;
  return fire(def, stage, msg.activity_id, b);
}

std::vector<StageMessage> WorkflowEngine::skip_stage(const WorkflowDefinition& def,
                                                     const Stage& stage,
                                                     const std::string& activity_id, json& b) {
  std::vector<StageMessage> out;
  for (const auto* e : def.outgoing(stage.name)) {
    StageMessage m;
    m.activity_id = activity_id;
    m.stage = e->to;
    m.type = StageMessage::Type::SKIP;
    m.from = stage.name;
    out.push_back(std::move(m));
  }
  for (const auto& m : out) publish(def, m);
  fault("skip.published");
  b["skipped"] = true;
  b["done"] = true;
  save_barrier(activity_id, stage.name, b);
  check_complete(def, activity_id);
  return out;
}

std::vector<StageMessage> WorkflowEngine::fire(const WorkflowDefinition& def, const Stage& stage,
                                               const std::string& activity_id, json& b) {
  json ctx = b["input"];
  try {
    switch (stage.kind) {
      case StageKind::SUBMIT_JOB: {
        std::vector<StageMessage> out;
        for (std::int64_t i = 0; i < instances(stage); ++i) {
          StageMessage m;
          m.activity_id = activity_id;
          m.stage = stage.name;
          m.type = StageMessage::Type::INSTANCE;
          m.index = i;
          m.context = ctx;
          if (stage.fan_out) m.context["ensemble.index"] = i;
          out.push_back(std::move(m));
        }
        for (const auto& m : out) publish(def, m);
        fault("fire.published");
        save_barrier(activity_id, stage.name, b);
        return out;
      }
      case StageKind::PROCESS: {
        const json sets = stage.params.value("set", json::object());
        for (const auto& [key, tmpl] : sets.items()) {
          if (!tmpl.is_string()) {
            ctx[key] = tmpl;
            continue;
          }
          const auto t = tmpl.get<std::string>();
          // A bare "${name}" copies the value with its JSON type.
          if (t.size() > 3 && t.rfind("${", 0) == 0 && t.back() == '}' &&
              t.find("${", 2) == std::string::npos) {
            const auto name = t.substr(2, t.size() - 3);
            if (const json* v = pred::lookup(b["input"], name)) {
              ctx[key] = *v;
              continue;
            }
          }
          ctx[key] = substitute(t, b["input"]);
        }
        break;
      }
      case StageKind::TRANSFER: {
        const auto source_key = stage.params.at("source").get<std::string>();
        const json* src = pred::lookup(ctx, source_key);
        if (!src) fail(ErrorCode::MissingField, source_key);
        std::vector<std::string> uris;
        if (src->is_array()) {
          for (const auto& u : *src) uris.push_back(u.get<std::string>());
        } else if (src->is_string()) {
          uris.push_back(src->get<std::string>());
        } else {
          fail(ErrorCode::TypeMismatch, source_key + " must hold a URI or a list of URIs");
        }
        const auto machine_name = substitute(stage.params.at("machine").get<std::string>(), ctx);
        const auto dest = machines_.machine_id(machine_name);
        auto dir = substitute(stage.params.at("remote_dir").get<std::string>(), ctx);
        if (!dir.empty() && dir.back() != '/') dir += '/';
        json placed = json::array();
        for (const auto& uri : uris) {
          auto key = parse_object_uri(uri).second;
          auto path = dir + key.substr(key.rfind('/') + 1);
          machines_.transfer_between(uri, dest, path);
          placed.push_back(path);
        }
        ctx[stage.name + ".paths"] = placed;
        break;
      }
      case StageKind::DECISION:
      case StageKind::TERMINAL: break;
    }
  } catch (const Error& e) {
    if (!condition_error(e)) throw;
    fail_activity(def, activity_id, stage.name, std::string(to_string(e.code())) + ": " + e.what(),
                  ctx);
    return {};
  }
  return finish_stage(def, stage, activity_id, b, std::move(ctx));
}

std::vector<StageMessage> WorkflowEngine::finish_stage(const WorkflowDefinition& def,
                                                       const Stage& stage,
                                                       const std::string& activity_id, json& b,
                                                       json context) {
  std::vector<StageMessage> out;
  for (const auto* e : def.outgoing(stage.name)) {
    bool take = true;
    if (e->condition) {
      try {
        take = pred::eval(*e->condition, context);
      } catch (const Error& err) {
        if (!condition_error(err)) throw;
        fail_activity(def, activity_id, stage.name,
                      std::string(to_string(err.code())) + ": " + err.what() + " in condition '" +
                          *e->condition + "' on edge " + e->from + " -> " + e->to,
                      context);
        return {};
      }
    }
    StageMessage m;
    m.activity_id = activity_id;
    m.stage = e->to;
    m.type = take ? StageMessage::Type::ARRIVAL : StageMessage::Type::SKIP;
    m.from = stage.name;
    if (take) m.context = context;
    out.push_back(std::move(m));
  }
  for (const auto& m : out) publish(def, m);
  fault("route.published");
  b["done"] = true;
  save_barrier(activity_id, stage.name, b);
  check_complete(def, activity_id);
  return out;
}

// ---------------------------------------------------------------------------
// Jobs

std::vector<StageMessage> WorkflowEngine::on_instance(const WorkflowDefinition& def,
                                                      const StageMessage& msg) {
  if (!live(msg.activity_id)) return {};
  const auto& stage = def.stage(msg.stage);
  if (stage.kind != StageKind::SUBMIT_JOB || msg.index < 0 || msg.index >= instances(stage)) {
    log_warn("bad INSTANCE for " + msg.stage + " index " + std::to_string(msg.index));
    return {};
  }
  auto b = barrier(msg.activity_id, msg.stage);
  if (!b.is_null() && (b["done"].get<bool>() || b["results"].contains(std::to_string(msg.index))))
    return {};

  const JobLink link{msg.stage, msg.index, 1};
  auto job = store_.find_job(msg.activity_id, link);
  if (job && store_.get_kv(kJobKey + job->job_id) && job->status != JobStatus::PENDING_SUBMIT)
    return {};

  json spec;
  std::int64_t nodes = 1, walltime = 3600;
  try {
    StringMap vars{{"activity.id", msg.activity_id}, {"stage", msg.stage},
                   {"ensemble.index", std::to_string(msg.index)}};
    const auto& p = stage.params;
    nodes = int_param(p.value("nodes", json(1)), msg.context, vars, "nodes");
    walltime = int_param(p.value("walltime_req_s", json(3600)), msg.context, vars, "walltime_req_s");
    json outputs = json::array();
    for (const auto& o : p.value("outputs", json::array({"out.dat"})))
      outputs.push_back(substitute(o.get<std::string>(), msg.context, vars));
    spec = {{"script", substitute(p.at("script").get<std::string>(), msg.context, vars)},
            {"job_name", substitute(p.value("job_name", msg.stage), msg.context, vars)},
            {"outputs", outputs},
            {"machines", p.value("machines", json::array())}};
  } catch (const Error& e) {
    if (!condition_error(e)) throw;
    fail_activity(def, msg.activity_id, msg.stage,
                  std::string(to_string(e.code())) + ": " + e.what(), msg.context);
    return {};
  }

  if (!job) job = store_.create_job(msg.activity_id, "", nodes, walltime, link);
  fault("instance.created");
  if (!store_.get_kv(kJobKey + job->job_id)) store_.put_kv(kJobKey + job->job_id, spec.dump());
  try_submit(def, job->job_id);
  fault("instance.submitted");
  return {};
}

void WorkflowEngine::try_submit(const WorkflowDefinition& def, const std::string& job_id) {
  auto job = store_.get_job(job_id);
  if (job.status != JobStatus::PENDING_SUBMIT || !live(job.activity_id)) return;
  auto spec_text = store_.get_kv(kJobKey + job_id);
  if (!spec_text) return;
  const auto spec = json::parse(*spec_text);

  std::set<std::string> exclude;
  for (int a = 1; a < job.link.attempt; ++a) {
    auto prev = store_.find_job(job.activity_id, {job.link.stage, job.link.ensemble_index, a});
    if (prev && !prev->machine_id.empty()) exclude.insert(prev->machine_id);
  }
  std::vector<std::string> allowed;
  for (const auto& name : spec.value("machines", json::array()))
    allowed.push_back(machines_.machine_id(name.get<std::string>()));

  std::string target;
  try {
    target = status_.select_machine(job.nodes, job.walltime_req_s, allowed, exclude);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NoEligibleMachine) throw;
    if (job.link.attempt >= 2) {
      store_.update_job_status(job_id, JobStatus::ERROR);
      store_.set_job_handled(job_id, true);
      fail_activity(def, job.activity_id, job.link.stage,
                    "no eligible machine to retry " + job_id + ": " + e.what(), json::object());
    }
    return;  // first attempts wait for the next poll
  }
  if (job.machine_id != target) store_.place_job(job_id, target);
  try {
    machines_.submit_job(job_id, spec.at("script").get<std::string>(),
                         spec.value("job_name", std::string()));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::MachineUnreachable) {
      log_warn("submit of " + job_id + " deferred: " + e.what());
      return;
    }
    if (e.code() != ErrorCode::SubmitRejected) throw;
    log_warn("submit of " + job_id + " rejected: " + e.what());
    store_.update_job_status(job_id, JobStatus::ERROR);
  }
}

void WorkflowEngine::retry_or_fail(const WorkflowDefinition& def, const JobRecord& job,
                                   const std::string& why) {
  if (job.link.attempt >= 2) {
    store_.set_job_handled(job.job_id, true);
    fail_activity(def, job.activity_id, job.link.stage,
                  "job " + job.job_id + " failed after retry: " + why, json::object());
    return;
  }
  JobLink next{job.link.stage, job.link.ensemble_index, job.link.attempt + 1};
  auto retry = store_.find_job(job.activity_id, next);
  if (!retry) retry = store_.create_job(job.activity_id, "", job.nodes, job.walltime_req_s, next);
  if (!store_.get_kv(kJobKey + retry->job_id))
    if (auto spec = store_.get_kv(kJobKey + job.job_id))
      store_.put_kv(kJobKey + retry->job_id, *spec);
  fault("retry.created");
  store_.set_job_handled(job.job_id, true);
  log_info("retrying " + job.job_id + " as " + retry->job_id + ": " + why);
  try_submit(def, retry->job_id);
}

std::vector<StageMessage> WorkflowEngine::on_continuation(const WorkflowDefinition& def,
                                                          const StageMessage& msg) {
  JobRecord job;
  try {
    job = store_.get_job(msg.job_id);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NotFound) throw;
    log_warn("event for unknown job " + msg.job_id + " dropped");
    return {};
  }
  if (job.handled || !is_terminal(job.status)) return {};
  if (!live(job.activity_id)) {
    store_.set_job_handled(job.job_id, true);
    return {};
  }
  const auto& stage = def.stage(job.link.stage);
  auto b = barrier(job.activity_id, stage.name);
  if (b.is_null()) b = empty_barrier();
  if (b["done"].get<bool>()) {
    store_.set_job_handled(job.job_id, true);
    return {};
  }

  if (job.status != JobStatus::COMPLETED) {
    retry_or_fail(def, job, std::string("job ended ") + to_string(job.status));
    return {};
  }

  const auto spec = json::parse(store_.get_kv(kJobKey + job.job_id).value_or("{}"));
  std::vector<std::string> paths;
  for (const auto& o : spec.value("outputs", json::array({"out.dat"})))
    paths.push_back(machine::job_dir(job) + o.get<std::string>());
  std::vector<ObjectHandle> handles;
  try {
    handles = machines_.fetch_results(job.job_id, paths);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::MachineUnreachable) {
      log_warn("fetch for " + job.job_id + " deferred: " + e.what());
      return {};  // re-emitted after the next poll
    }
    if (e.code() != ErrorCode::PartialFetch) throw;
    retry_or_fail(def, job, e.what());
    return {};
  }
  fault("continuation.fetched");

  json uris = json::array();
  for (const auto& h : handles) uris.push_back(h.uri);
  b["results"][std::to_string(job.link.ensemble_index)] = {
      {"job_id", job.job_id}, {"uris", uris}, {"machine", job.machine_id}};

  std::vector<StageMessage> out;
  if (static_cast<std::int64_t>(b["results"].size()) == instances(stage)) {
    json ctx = b.contains("input") ? b["input"] : msg.context;
    json all_uris = json::array(), jobs = json::array();
    for (std::int64_t i = 0; i < instances(stage); ++i) {
      const auto& r = b["results"][std::to_string(i)];
      for (const auto& u : r["uris"]) all_uris.push_back(u);
      jobs.push_back(r["job_id"]);
    }
    ctx[stage.name + ".results"] = all_uris;
    ctx[stage.name + ".jobs"] = jobs;
    ctx[stage.name + ".state"] = "COMPLETED";
    ctx["state"] = "COMPLETED";
    out = finish_stage(def, stage, job.activity_id, b, std::move(ctx));
  } else {
    save_barrier(job.activity_id, stage.name, b);
  }
  fault("continuation.saved");
  store_.set_job_handled(job.job_id, true);
  return out;
}

void WorkflowEngine::on_job_event(const std::string& job_id, JobStatus status) {
  JobRecord job;
  try {
    job = store_.get_job(job_id);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NotFound) throw;
    log_warn("event " + std::string(to_string(status)) + " for unknown job " + job_id + " dropped");
    return;
  }
  const auto a = store_.get_activity(job.activity_id);
  auto def = workflow(a.workflow_id);
  if (!def || !def->find_stage(job.link.stage)) {
    log_warn("event for job " + job_id + " outside any registered workflow dropped");
    return;
  }
  StageMessage m;
  m.activity_id = job.activity_id;
  m.stage = job.link.stage;
  m.type = StageMessage::Type::CONTINUATION;
  m.index = job.link.ensemble_index;
  m.job_id = job_id;
  publish(*def, m);
}

void WorkflowEngine::after_poll() {
  for (const auto& a : store_.list_activities()) {
    if (is_terminal(a.status)) continue;
    auto def = workflow(a.workflow_id);
    if (!def) continue;
    try {
      std::lock_guard lock(activity_mutex(a.activity_id));
      for (const auto& j : store_.query_jobs(JobQuery{a.activity_id, std::nullopt, std::nullopt})) {
        if (j.status == JobStatus::PENDING_SUBMIT) try_submit(*def, j.job_id);
        else if (is_terminal(j.status) && !j.handled) on_job_event(j.job_id, j.status);
      }
    } catch (const std::exception& e) {
      log_warn("after poll, activity " + a.activity_id + ": " + e.what());
    }
  }
}

void WorkflowEngine::resume() {
  for (const auto& [id, text] : store_.list_workflows()) {
    try {
      install(definition_from_json(json::parse(text)));
    } catch (const std::exception& e) {
      log_warn("stored workflow " + id + " not loaded: " + e.what());
    }
  }
  for (const auto& a : store_.list_activities()) {
    if (is_terminal(a.status)) continue;
    auto def = workflow(a.workflow_id);
    if (!def) continue;
    std::lock_guard lock(activity_mutex(a.activity_id));
    if (a.status == ActivityStatus::PENDING) kick(*def, a);
    check_complete(*def, a.activity_id);
    for (const auto& j : store_.query_jobs(JobQuery{a.activity_id, std::nullopt, std::nullopt})) {
      if (j.status == JobStatus::PENDING_SUBMIT) try_submit(*def, j.job_id);
      else if (is_terminal(j.status) && !j.handled) on_job_event(j.job_id, j.status);
    }
  }
}

}  // namespace urgent::wf
