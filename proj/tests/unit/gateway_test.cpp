#include <gtest/gtest.h>

#include <chrono>
#include <cstdlib>
#include <set>
#include <thread>

#include <httplib.h>

#include "support.hpp"
#include "urgent/control_plane.hpp"

using namespace urgent;
using nlohmann::json;
using urgent::testkit::TempDir;

namespace {

json config_json() {
  json j = json::parse(R"({
    "data_dir": "data",
    "api": {"port": 0, "token": "t0ken", "reference_job": {"nodes": 2, "walltime_s": 600}},
    "machines": [
      {"name": "archer", "scheduler": "PBS", "endpoint": "sim://archer", "account": "vestec", "nodes": 8},
      {"name": "cirrus", "scheduler": "SLURM", "endpoint": "sim://cirrus", "account": "vestec", "nodes": 8}
    ],
    "simulator": {"machines": [
      {"name": "archer", "scheduler": "PBS", "nodes": 8, "login_host": "login.archer", "viz_port": 5555,
       "runtime_fraction": {"kind": "FIXED", "value": 0.5}},
      {"name": "cirrus", "scheduler": "SLURM", "nodes": 8,
       "runtime_fraction": {"kind": "FIXED", "value": 0.5}}
    ]},
    "sensors": [{"sensor_type": "hotspot", "mode": "PUSH"}, {"sensor_type": "river_gauge", "mode": "PUSH"}],
    "broker": {"fsync": false}
  })");
  j["workflows_dir"] = (testkit::source_dir() / "config" / "workflows").string();
  return j;
}

/// A control plane on a manual clock, stepped by hand, with its HTTP server up.
struct Plane {
  TempDir dir;
  ManualClock clock;
  std::unique_ptr<ControlPlane> cp;
  std::unique_ptr<httplib::Client> http;
  httplib::Headers auth{{"Authorization", "Bearer t0ken"}};

  explicit Plane(json j = json()) {
    if (j.is_null()) j = config_json();
    ControlPlane::Options o;
    o.clock = &clock;
    o.serve_http = false;
    cp = std::make_unique<ControlPlane>(config_from_json(j, dir.path()), o);
    const int port = cp->gateway().start();
    http = std::make_unique<httplib::Client>("127.0.0.1", port);
    http->set_read_timeout(10);
  }

  /// Lets the broker threads settle, advances the clock and polls.
  void step(std::int64_t dt) {
    settle();
    clock.advance(dt);
    cp->status().poll_all();
    settle();
  }
  void settle() {
    for (int i = 0; i < 400; ++i) {
      bool idle = true;
      for (const auto& q : cp->broker().queues()) {
        const auto s = cp->broker().stats(q.name);
        if (s.consumers > 0 && (s.ready > 0 || s.unacked > 0)) idle = false;
      }
      if (idle) return;
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
  }
  ActivityStatus run(const std::string& id, int steps = 300) {
    for (int i = 0; i < steps; ++i) {
      settle();
      auto s = cp->store().get_activity(id).status;
      if (is_terminal(s)) return s;
      step(60);
    }
    return cp->store().get_activity(id).status;
  }

  httplib::Result get(const std::string& path) { return http->Get(path, auth); }
  httplib::Result post(const std::string& path, const std::string& body,
                       const std::string& type = "application/json") {
    return http->Post(path, auth, body, type);
  }
};

}  // namespace

TEST(Config, ShippedConfigLoads) {
  auto c = load_config(testkit::source_dir() / "config" / "urgent.json");
  EXPECT_EQ(c.machine_status.poll_interval_s, 600);
  EXPECT_EQ(c.api.port, 8700);
  EXPECT_EQ(c.api.host, "127.0.0.1");
  EXPECT_EQ(c.machines.size(), 2u);
  EXPECT_EQ(c.simulator.size(), 2u);
  EXPECT_EQ(simulation_rate(c), 1000);
  EXPECT_GE(c.workflows.size(), 2u);
  EXPECT_EQ(c.data_dir, testkit::source_dir() / "config" / ".." / "data");
}

TEST(Config, DefaultsAndOverrides) {
  TempDir d;
  auto c = config_from_json(json::object(), d.path());
  EXPECT_EQ(c.machine_status.poll_interval_s, 600);
  EXPECT_EQ(c.api.port, 8700);
  EXPECT_EQ(c.api.event_capacity, 10000u);
  EXPECT_EQ(c.transport_timeout_s, 30);
  auto o = config_from_json(json::parse(R"({"machine_status": {"poll_interval_s": 120}})"), d.path());
  EXPECT_EQ(o.machine_status.poll_interval_s, 120);
}

TEST(Config, Rejects) {
  TempDir d;
  auto bad = [&](const char* text) {
    EXPECT_THROW(config_from_json(json::parse(text), d.path()), Error) << text;
  };
  bad(R"({"machines": [{"name": "a", "scheduler": "PBS", "endpoint": "sim://a"}]})");
  bad(R"({"api": {"port": 70000}})");
  bad(R"({"transport_timeout_s": 0})");
  bad(R"({"machine_status": {"poll_interval_s": -1}})");
  bad(R"({"simulator": [{"name": "a", "nodes": 1, "clock_rate": 10}, {"name": "b", "nodes": 1, "clock_rate": 20}]})");
  bad(R"({"sensors": [{"sensor_type": "kp", "mode": "PULL"}]})");
  bad(R"([1, 2])");
}

TEST(Config, TokenFromEnvironment) {
  TempDir d;
  ::setenv(kTokenEnv, "from-env", 1);
  auto c = config_from_json(json::parse(R"({"api": {"token": "from-file"}})"), d.path());
  ::unsetenv(kTokenEnv);
  EXPECT_EQ(c.api.token, "from-env");
  EXPECT_EQ(config_from_json(json::parse(R"({"api": {"token": "from-file"}})"), d.path()).api.token, "from-file");
}

TEST(Events, SequenceAndRing) {
  api::EventLog log(3);
  EXPECT_EQ(log.emit(api::EventKind::JOB_STATUS), 1u);
  EXPECT_EQ(log.emit(api::EventKind::JOB_STATUS, json()), 2u);
  auto all = log.since(0);
  ASSERT_EQ(all.size(), 2u);
  EXPECT_TRUE(all[1].body.is_object());
  log.emit(api::EventKind::SENSOR_ARRIVAL, {{"x", 1}});
  log.emit(api::EventKind::MACHINE_STATUS);
  all = log.since(0);
  ASSERT_EQ(all.size(), 3u);
  EXPECT_EQ(all.front().seq, 2u);  // seq 1 fell out of the ring
  EXPECT_EQ(log.since(3).size(), 1u);
  EXPECT_TRUE(log.since(4).empty());
  EXPECT_EQ(log.since(1, 1).at(0).seq, 2u);
}

TEST(Events, TenThousandAndOne) {
  api::EventLog log;
  for (int i = 0; i < 10001; ++i) log.emit(api::EventKind::JOB_STATUS);
  EXPECT_EQ(log.size(), 10000u);
  EXPECT_EQ(log.since(0).front().seq, 2u);
}

TEST(Events, WaitWakesOnEmit) {
  api::EventLog log;
  std::thread t([&] {
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    log.emit(api::EventKind::JOB_STATUS);
  });
  EXPECT_TRUE(log.wait_newer(0, std::chrono::seconds(5)));
  t.join();
  EXPECT_FALSE(log.wait_newer(1, std::chrono::milliseconds(10)));
  log.close();
  EXPECT_FALSE(log.wait_newer(1, std::chrono::seconds(5)));
}

TEST(Gateway, RequiresBearerToken) {
  Plane p;
  auto r = p.http->Get("/api/activities");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 401);
  r = p.http->Get("/api/activities", {{"Authorization", "Bearer wrong"}});
  EXPECT_EQ(r->status, 401);
  r = p.get("/api/activities");
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(json::parse(r->body), json::array());
}

TEST(Gateway, StartTrackAndInspectActivity) {
  Plane p;
  auto r = p.post("/api/activities", R"({"workflow_id": "wf-fire", "context": {"region": "north"}})");
  ASSERT_EQ(r->status, 201) << r->body;
  const auto id = json::parse(r->body)["activity_id"].get<std::string>();
  EXPECT_EQ(p.run(id), ActivityStatus::COMPLETED);

  auto a = json::parse(p.get("/api/activities/" + id)->body);
  EXPECT_EQ(a["status"], "COMPLETED");
  EXPECT_EQ(a["stages"]["ensemble"]["state"], "DONE");
  EXPECT_EQ(a["metadata"]["origin"], "MANUAL");

  auto jobs = json::parse(p.get("/api/activities/" + id + "/jobs")->body);
  EXPECT_EQ(jobs.size(), 7u);
  for (const auto& j : jobs) EXPECT_EQ(j["status"], "COMPLETED");

  auto viz = p.get("/api/activities/" + id + "/viz");
  ASSERT_EQ(viz->status, 200) << viz->body;
  auto v = json::parse(viz->body);
  EXPECT_FALSE(v["token"].get<std::string>().empty());
  EXPECT_TRUE((v["host"] == "login.archer" && v["port"] == 5555) ||
              (v["host"] == "login1" && v["port"] == 11111))
      << v;
  EXPECT_EQ(json::parse(p.get("/api/activities/" + id + "/viz")->body)["token"], v["token"]);

  EXPECT_EQ(p.get("/api/activities/act-nope")->status, 404);
  EXPECT_EQ(p.get("/api/activities/act-nope/jobs")->status, 404);
  EXPECT_EQ(p.get("/api/activities/act-nope/viz")->status, 404);
}

TEST(Gateway, ActivityErrors) {
  Plane p;
  EXPECT_EQ(p.post("/api/activities", R"({"workflow_id": "wf-nope"})")->status, 404);
  EXPECT_EQ(p.post("/api/activities", "{not json")->status, 400);
  EXPECT_EQ(p.post("/api/activities", R"({"context": {}})")->status, 400);
  EXPECT_EQ(p.post("/api/activities", R"({"workflow_id": "wf-fire", "context": 3})")->status, 400);
}

TEST(Gateway, CancelIsIdempotent) {
  Plane p;
  auto id = json::parse(p.post("/api/activities", R"({"workflow_id": "wf-fire"})")->body)["activity_id"]
                .get<std::string>();
  p.step(60);
  auto r = p.post("/api/activities/" + id + "/cancel", "");
  EXPECT_EQ(r->status, 202);
  EXPECT_EQ(json::parse(r->body)["status"], "CANCELLED");
  EXPECT_EQ(p.post("/api/activities/" + id + "/cancel", "")->status, 202);
  p.settle();
  for (const auto& j : json::parse(p.get("/api/activities/" + id + "/jobs")->body))
    EXPECT_EQ(j["status"], "CANCELLED");
  EXPECT_EQ(p.post("/api/activities/act-nope/cancel", "")->status, 404);
}

TEST(Gateway, Machines) {
  Plane p;
  auto ms = json::parse(p.get("/api/machines")->body);
  ASSERT_EQ(ms.size(), 2u);
  for (const auto& m : ms) {
    EXPECT_EQ(m["reliability"], 1.0);
    EXPECT_EQ(m["wait_estimate"]["nodes"], 2);
    EXPECT_EQ(m["wait_estimate"]["walltime_s"], 600);
    EXPECT_TRUE(m["wait_estimate"]["wait_s"].is_null());  // never polled
  }
  p.step(600);
  ms = json::parse(p.get("/api/machines")->body);
  for (const auto& m : ms) {
    EXPECT_EQ(m["wait_estimate"]["wait_s"], 0);
    EXPECT_EQ(m["last_poll_ok"], true);
  }
}

TEST(Gateway, Workflows) {
  Plane p;
  const char* good = R"({"workflow_id": "wf-x", "entry_stage": "a",
    "stages": [{"name": "a", "kind": "DECISION"}, {"name": "b", "kind": "TERMINAL"}],
    "edges": [{"from": "a", "to": "b", "condition": "x > 1"}]})";
  auto r = p.post("/api/workflows", good);
  EXPECT_EQ(r->status, 201) << r->body;
  EXPECT_EQ(p.post("/api/workflows", good)->status, 201);
  auto cyc = p.post("/api/workflows", R"({"workflow_id": "wf-c", "entry_stage": "a",
    "stages": [{"name": "a", "kind": "DECISION"}, {"name": "b", "kind": "DECISION"}],
    "edges": [{"from": "a", "to": "b"}, {"from": "b", "to": "a"}]})");
  EXPECT_EQ(cyc->status, 400);
  EXPECT_EQ(json::parse(cyc->body)["error"], "CyclicWorkflow");
  auto pred = p.post("/api/workflows", R"({"workflow_id": "wf-p", "entry_stage": "a",
    "stages": [{"name": "a", "kind": "DECISION"}, {"name": "b", "kind": "TERMINAL"}],
    "edges": [{"from": "a", "to": "b", "condition": "x >"}]})");
  EXPECT_EQ(pred->status, 400);
  EXPECT_EQ(json::parse(pred->body)["error"], "PredicateSyntax");
  EXPECT_EQ(p.post("/api/workflows", "[")->status, 400);
  auto list = json::parse(p.get("/api/workflows")->body);
  EXPECT_EQ(list.size(), 3u);
}

TEST(Gateway, SensorPushTriggersWorkflow) {
  Plane p;
  auto r = p.http->Post("/api/sensors/river_gauge",
                        {{"Authorization", "Bearer t0ken"}, {"X-Source-Id", "gauge-12"},
                         {"X-Geolocation", "51.5,-0.12"}},
                        R"({"level": 8})", "application/json");
  ASSERT_EQ(r->status, 202) << r->body;
  const auto env = json::parse(r->body)["envelope_id"].get<std::string>();
  p.settle();
  auto acts = p.cp->store().list_activities();
  ASSERT_EQ(acts.size(), 1u);
  EXPECT_EQ(acts[0].workflow_id, "wf-flood");
  EXPECT_EQ(acts[0].metadata.at("origin"), "SENSOR");
  EXPECT_EQ(p.run(acts[0].activity_id), ActivityStatus::COMPLETED);
  EXPECT_TRUE(p.cp->engine().barrier(acts[0].activity_id, "model")["fired"].get<bool>());

  auto e = p.cp->sensors().get_envelope(env);
  EXPECT_EQ(e.source_id, "gauge-12");
  ASSERT_TRUE(e.geolocation);
  EXPECT_DOUBLE_EQ(e.geolocation->lat, 51.5);

  EXPECT_EQ(p.post("/api/sensors/volcano", "x", "application/octet-stream")->status, 404);
  auto bad = p.http->Post("/api/sensors/hotspot", {{"Authorization", "Bearer t0ken"}, {"X-Geolocation", "999,0"}},
                          "x", "application/octet-stream");
  EXPECT_EQ(bad->status, 400);
  auto feed = json::parse(p.get("/api/sensors")->body);
  ASSERT_EQ(feed.size(), 2u);
  EXPECT_EQ(feed[1]["sensor_type"], "river_gauge");
  EXPECT_EQ(feed[1]["recent"][0]["envelope_id"], env);
}

TEST(Gateway, EventStreamReplaysThenFollows) {
  Plane p;
  for (int i = 0; i < 3; ++i) p.cp->events().emit(api::EventKind::SENSOR_ARRIVAL, {{"i", i}});
  const auto base = p.cp->events().last_seq() - 3;
  std::vector<std::uint64_t> seqs;
  std::string buffer;
  std::thread late([&] {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    p.cp->events().emit(api::EventKind::MACHINE_STATUS, {{"late", true}});
  });
  httplib::Client c("127.0.0.1", p.cp->gateway().port());
  c.set_read_timeout(10);
  auto r = c.Get("/api/events?since=" + std::to_string(base), {{"Authorization", "Bearer t0ken"}},
                 [&](const char* data, std::size_t n) {
                   buffer.append(data, n);
                   std::size_t pos;
                   while ((pos = buffer.find("\n\n")) != std::string::npos) {
                     const auto frame = buffer.substr(0, pos);
                     buffer.erase(0, pos + 2);
                     if (starts_with(frame, "id: ")) seqs.push_back(std::stoull(frame.substr(4)));
                   }
                   return seqs.size() < 4;
                 });
  late.join();
  ASSERT_EQ(seqs.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(seqs[i], base + 1 + i);
  auto bad = p.get("/api/events?since=abc");
  EXPECT_EQ(bad->status, 400);
}

TEST(Gateway, EventsMatchTransitionLog) {
  Plane p;
  auto id = json::parse(p.post("/api/activities", R"({"workflow_id": "wf-fire"})")->body)["activity_id"]
                .get<std::string>();
  ASSERT_EQ(p.run(id), ActivityStatus::COMPLETED);
  std::multiset<std::string> from_log, from_events;
  for (const auto& t : p.cp->store().activity_transitions()) from_log.insert("A " + t.id + " " + t.from + ">" + t.to);
  for (const auto& t : p.cp->store().job_transitions()) from_log.insert("J " + t.id + " " + t.from + ">" + t.to);
  std::uint64_t prev = 0;
  for (const auto& e : p.cp->events().since(0)) {
    EXPECT_GT(e.seq, prev);
    prev = e.seq;
    if (e.kind == api::EventKind::ACTIVITY_STATUS)
      from_events.insert("A " + e.body["activity_id"].get<std::string>() + " " + e.body["from"].get<std::string>() +
                         ">" + e.body["to"].get<std::string>());
    if (e.kind == api::EventKind::JOB_STATUS)
      from_events.insert("J " + e.body["job_id"].get<std::string>() + " " + e.body["from"].get<std::string>() +
                         ">" + e.body["to"].get<std::string>());
  }
  EXPECT_FALSE(from_log.empty());
  EXPECT_EQ(from_events, from_log);
}
