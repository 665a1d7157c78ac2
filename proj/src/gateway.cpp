#include "urgent/gateway.hpp"

#include <algorithm>
#include <atomic>

#include <httplib.h>

namespace urgent::api {

using nlohmann::json;

namespace {

json opt_time(const std::optional<Timestamp>& t) { return t ? json(format_utc(*t)) : json(nullptr); }

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, ErrorCode code, const std::string& detail) {
  send_json(res, http_status(code), {{"error", to_string(code)}, {"detail", detail}});
}

json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("malformed JSON: ") + e.what());
  }
}

bool same_token(std::string_view given, std::string_view want) {
  if (want.empty() || given.size() != want.size()) return false;
  unsigned char diff = 0;
  for (std::size_t i = 0; i < want.size(); ++i) diff |= static_cast<unsigned char>(given[i] ^ want[i]);
  return diff == 0;
}

std::string sse_frame(const ApiEvent& e) {
  return "id: " + std::to_string(e.seq) + "\nevent: " + to_string(e.kind) + "\ndata: " + to_json(e).dump() + "\n\n";
}

}  // namespace

json to_json(const ActivityRecord& a) {
  return {{"activity_id", a.activity_id}, {"kind", a.kind},
          {"status", to_string(a.status)},  {"workflow_id", a.workflow_id},
          {"created_at", format_utc(a.created_at)}, {"updated_at", format_utc(a.updated_at)},
          {"metadata", a.metadata}};
}

json to_json(const JobRecord& j) {
  return {{"job_id", j.job_id},
          {"activity_id", j.activity_id},
          {"machine_id", j.machine_id},
          {"batch_id", j.batch_id},
          {"status", to_string(j.status)},
          {"nodes", j.nodes},
          {"walltime_req_s", j.walltime_req_s},
          {"submitted_at", opt_time(j.submitted_at)},
          {"started_at", opt_time(j.started_at)},
          {"ended_at", opt_time(j.ended_at)},
          {"result_handles", j.result_handles},
          {"stage", j.link.stage},
          {"ensemble_index", j.link.ensemble_index},
          {"attempt", j.link.attempt}};
}

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::NotFound:
    case ErrorCode::UnknownSensorType:
      return 404;
    case ErrorCode::InvalidArgument:
    case ErrorCode::ParseError:
    case ErrorCode::PredicateSyntax:
    case ErrorCode::CyclicWorkflow:
    case ErrorCode::MissingField:
    case ErrorCode::TypeMismatch:
      return 400;
    case ErrorCode::AlreadyRegistered:
    case ErrorCode::InvalidState:
    case ErrorCode::InvalidTransition:
    case ErrorCode::DeclMismatch:
      return 409;
    default:
      return 500;
  }
}

Gateway::Gateway(Services services, ApiConfig cfg)
    : s_(std::move(services)), cfg_(std::move(cfg)), server_(std::make_unique<httplib::Server>()) {
  if (cfg_.token.empty()) {
    cfg_.token = make_id("tok");
    log_warn("no API token configured; generated " + cfg_.token);
  }
  routes();
}

Gateway::~Gateway() { stop(); }

int Gateway::start() {
  if (thread_.joinable()) return port_;
  if (cfg_.port == 0) {
    port_ = server_->bind_to_any_port(cfg_.host);
  } else {
    port_ = server_->bind_to_port(cfg_.host, cfg_.port) ? cfg_.port : -1;
  }
  if (port_ <= 0) fail(ErrorCode::InvalidState, "cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  log_info("api listening on " + cfg_.host + ":" + std::to_string(port_));
  return port_;
}

void Gateway::stop() {
  if (!thread_.joinable()) return;
  server_->stop();
  thread_.join();
}

json Gateway::machine_view(const MachineRecord& m) const {
  const auto rel = s_.status.reliability(m.machine_id);
  json v{{"machine_id", m.machine_id},
         {"name", m.name},
         {"scheduler", batch::to_string(m.scheduler)},
         {"total_nodes", m.total_nodes},
         {"available", m.available},
         {"reliability", rel.reliability},
         {"window_polls", rel.window_polls},
         {"ok_polls", rel.ok_polls}};
  if (auto snap = s_.store.latest_snapshot(m.machine_id)) {
    v["last_poll_at"] = format_utc(snap->polled_at);
    v["last_poll_ok"] = snap->poll_ok;
    v["queue_length"] = snap->entries.size();
  } else {
    v["last_poll_at"] = nullptr;
    v["last_poll_ok"] = nullptr;
    v["queue_length"] = nullptr;
  }
  json est{{"nodes", cfg_.reference_nodes}, {"walltime_s", cfg_.reference_walltime_s}};
  try {
    const auto w = s_.status.estimate_wait(m.machine_id, cfg_.reference_nodes, cfg_.reference_walltime_s);
    est["wait_s"] = w.wait_s;
    est["ratio_used"] = w.ratio_used;
    est["sample_size"] = w.sample_size;
  } catch (const Error& e) {
    est["wait_s"] = nullptr;
    est["reason"] = to_string(e.code());
  }
  v["wait_estimate"] = est;
  return v;
}

json Gateway::activity_view(const ActivityRecord& a) const {
  json v = to_json(a);
  json stages = json::object();
  if (auto def = s_.engine.workflow(a.workflow_id)) {
    for (const auto& st : def->stages) {
      const auto b = s_.engine.barrier(a.activity_id, st.name);
      std::string state = "PENDING";
      if (!b.is_null()) {
        if (b.value("skipped", false)) state = "SKIPPED";
        else if (b.value("done", false)) state = "DONE";
        else if (b.value("fired", false)) state = "RUNNING";
        else if (!b.value("arrivals", json::object()).empty()) state = "WAITING";
      }
      stages[st.name] = {{"kind", wf::to_string(st.kind)}, {"state", state}};
    }
  }
  v["stages"] = stages;
  return v;
}

void Gateway::routes() {
  auto& srv = *server_;
  srv.new_task_queue = [] { return new httplib::ThreadPool(32); };

  srv.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
    if (!starts_with(req.path, "/api/")) return httplib::Server::HandlerResponse::Unhandled;
    std::string given;
    const auto auth = req.get_header_value("Authorization");
    if (starts_with(auth, "Bearer ")) given = auth.substr(7);
    // Browsers cannot set headers on an EventSource.
    else if (req.path == "/api/events" && req.has_param("access_token")) given = req.get_param_value("access_token");
    if (same_token(given, cfg_.token)) return httplib::Server::HandlerResponse::Unhandled;
    res.set_header("WWW-Authenticate", "Bearer");
    send_json(res, 401, {{"error", "Unauthorized"}, {"detail", "missing or wrong bearer token"}});
    return httplib::Server::HandlerResponse::Handled;
  });

  srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const Error& e) {
      send_error(res, e.code(), e.what());
    } catch (const std::exception& e) {
      send_error(res, ErrorCode::Internal, e.what());
    }
  });

  // --- activities
  srv.Post("/api/activities", [this](const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req);
    if (!body.is_object() || !body.contains("workflow_id") || !body["workflow_id"].is_string())
      fail(ErrorCode::InvalidArgument, "body needs a workflow_id string");
    const json ctx = body.value("context", json::object());
    const auto wf_id = body["workflow_id"].get<std::string>();
    if (!s_.engine.workflow(wf_id)) fail(ErrorCode::NotFound, "unknown workflow " + wf_id);
    send_json(res, 201, {{"activity_id", s_.engine.start_activity(wf_id, ctx)}});
  });
  srv.Get("/api/activities", [this](const httplib::Request&, httplib::Response& res) {
    json out = json::array();
    for (const auto& a : s_.store.list_activities()) out.push_back(to_json(a));
    send_json(res, 200, out);
  });
  srv.Get(R"(/api/activities/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    send_json(res, 200, activity_view(s_.store.get_activity(req.matches[1])));
  });
  srv.Post(R"(/api/activities/([^/]+)/cancel)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    s_.engine.cancel_activity(id);
    send_json(res, 202, {{"activity_id", id}, {"status", to_string(s_.store.get_activity(id).status)}});
  });
  srv.Get(R"(/api/activities/([^/]+)/jobs)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    s_.store.get_activity(id);
    json out = json::array();
    for (const auto& j : s_.store.query_jobs(JobQuery{id, std::nullopt, std::nullopt})) out.push_back(to_json(j));
    send_json(res, 200, out);
  });
  srv.Get(R"(/api/activities/([^/]+)/viz)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    s_.store.get_activity(id);
    std::optional<JobRecord> latest;
    for (const auto& j : s_.store.query_jobs(JobQuery{id, std::nullopt, std::nullopt})) {
      if (j.status != JobStatus::COMPLETED || j.result_handles.empty()) continue;
      if (!latest || std::make_pair(j.ended_at.value_or(0), j.seq) >
                         std::make_pair(latest->ended_at.value_or(0), latest->seq))
        latest = j;
    }
    if (!latest) fail(ErrorCode::NotFound, "activity " + id + " has no results yet");
    const auto machine = s_.store.get_machine(latest->machine_id);
    auto ep = s_.viz ? s_.viz(machine.name) : std::nullopt;
    if (!ep) fail(ErrorCode::NotFound, "no visualization endpoint for " + machine.name);
    const auto key = "viz.token:" + id;
    auto token = s_.store.get_kv(key);
    if (!token) {
      token = make_id("viz");
      s_.store.put_kv(key, *token);
    }
    send_json(res, 200, {{"host", ep->host}, {"port", ep->port}, {"token", *token},
                         {"machine", machine.name}, {"job_id", latest->job_id}});
  });

  // --- machines
  srv.Get("/api/machines", [this](const httplib::Request&, httplib::Response& res) {
    json out = json::array();
    for (const auto& m : s_.store.list_machines()) out.push_back(machine_view(m));
    send_json(res, 200, out);
  });

  // --- workflows
  srv.Post("/api/workflows", [this](const httplib::Request& req, httplib::Response& res) {
    const auto def = wf::definition_from_json(parse_body(req));
    send_json(res, 201, {{"workflow_id", s_.engine.register_workflow(def)}});
  });
  srv.Get("/api/workflows", [this](const httplib::Request&, httplib::Response& res) {
    json out = json::array();
    for (const auto& d : s_.engine.workflows()) out.push_back(wf::to_json(d));
    send_json(res, 200, out);
  });

  // --- sensors
  srv.Post(R"(/api/sensors/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    std::optional<sensors::GeoPoint> geo;
    if (req.has_header("X-Geolocation")) geo = sensors::parse_geolocation(req.get_header_value("X-Geolocation"));
    const auto id = s_.sensors.ingest_push(req.matches[1], req.get_header_value("X-Source-Id"), req.body, geo);
    send_json(res, 202, {{"envelope_id", id}});
  });
  srv.Get("/api/sensors", [this](const httplib::Request&, httplib::Response& res) {
    json out = json::array();
    for (const auto& t : s_.sensors.types()) {
      json v = sensors::to_json(t);
      v["pull_failures"] = s_.sensors.pull_failures(t.sensor_type);
      json recent = json::array();
      for (const auto& e : s_.sensors.recent(t.sensor_type)) recent.push_back(sensors::to_json(e));
      v["recent"] = recent;
      out.push_back(v);
    }
    send_json(res, 200, out);
  });

  // --- events
  srv.Get("/api/events", [this](const httplib::Request& req, httplib::Response& res) {
    std::uint64_t after = 0;
    const std::string since = req.has_param("since") ? req.get_param_value("since")
                                                     : req.get_header_value("Last-Event-ID");
    if (!since.empty()) {
      try {
        std::size_t used = 0;
        after = std::stoull(since, &used);
        if (used != since.size()) throw std::invalid_argument(since);
      } catch (const std::logic_error&) {
        fail(ErrorCode::InvalidArgument, "since must be a non-negative integer");
      }
    }
    res.set_header("Cache-Control", "no-cache");
    auto cursor = std::make_shared<std::uint64_t>(after);
    res.set_chunked_content_provider("text/event-stream", [this, cursor](std::size_t, httplib::DataSink& sink) {
      if (!server_->is_running() || s_.events.closed()) return false;
      auto batch = s_.events.since(*cursor, 256);
      if (batch.empty()) {
        if (!s_.events.wait_newer(*cursor, std::chrono::milliseconds(500))) {
          const std::string ping = ": keepalive\n\n";
          return sink.write(ping.data(), ping.size());
        }
        batch = s_.events.since(*cursor, 256);
      }
      std::string out;
      for (const auto& e : batch) out += sse_frame(e);
      if (!batch.empty()) *cursor = batch.back().seq;
      return out.empty() || sink.write(out.data(), out.size());
    });
  });

  if (!cfg_.static_dir.empty() && std::filesystem::is_directory(cfg_.static_dir))
    srv.set_mount_point("/", cfg_.static_dir.string());
}

}  // namespace urgent::api
