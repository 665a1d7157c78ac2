#include <gtest/gtest.h>

#include <atomic>
#include <set>

#include "checks.hpp"
#include "support.hpp"
#include "urgent/sensors.hpp"

using namespace urgent;
using namespace urgent::sensors;
using nlohmann::json;
using urgent::testkit::TempDir;

namespace {

SensorTypeConfig push_type(const std::string& name) { return {name, Mode::PUSH, std::nullopt, std::nullopt}; }

struct SensorFixture : ::testing::Test {
  TempDir dir;
  ManualClock clock;
  StateStore store{{dir / "state", &clock}};
  mq::Broker broker{{dir / "mq", &clock, mq::Broker::Dispatch::Manual, false, 5}};
  std::map<std::string, std::string> pages;  // url -> body; missing means unreachable
  std::unique_ptr<SensorGateway> gw;

  void SetUp() override { open(); }
  void open() {
    SensorGateway::Options o;
    o.types = {push_type("hotspot"),
               {"kp-index", Mode::PULL, "http://feeds/kp", 600}};
    o.fetch = [this](const std::string& url) {
      auto it = pages.find(url);
      if (it == pages.end()) fail(ErrorCode::MachineUnreachable, "down");
      return it->second;
    };
    gw = std::make_unique<SensorGateway>(store, broker, o);
  }
};

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::Internal;
}

}  // namespace

TEST(SensorConfig, Validation) {
  EXPECT_NO_THROW(validate(push_type("hotspot")));
  EXPECT_THROW(validate(push_type("Hot Spot")), Error);
  EXPECT_THROW(validate({"kp", Mode::PULL, std::nullopt, 60}), Error);
  EXPECT_THROW(validate({"kp", Mode::PULL, "http://x/", 0}), Error);
  auto c = sensor_type_from_json(json::parse(R"({"sensor_type": "kp", "mode": "PULL",
                                                 "pull_url": "file:///tmp/kp", "pull_interval_s": 60})"));
  EXPECT_EQ(c.queue(), "sensor.kp");
  EXPECT_EQ(sensor_type_from_json(to_json(c)), c);
  EXPECT_THROW(sensor_type_from_json(json::parse(R"({"sensor_type": "x", "mode": "SOMETIMES"})")), Error);
}

TEST(SensorConfig, Geolocation) {
  auto g = parse_geolocation(" 55.95, -3.19 ");
  EXPECT_DOUBLE_EQ(g.lat, 55.95);
  EXPECT_DOUBLE_EQ(g.lon, -3.19);
  EXPECT_THROW(parse_geolocation("91,0"), Error);
  EXPECT_THROW(parse_geolocation("1;2"), Error);
  EXPECT_THROW(parse_geolocation("1x,2"), Error);
}

TEST_F(SensorFixture, PushRoutesToTypeQueue) {
  const std::string bytes = "hotspot frame \x01\x02";
  auto id = gw->ingest_push("hotspot", "sat-7", bytes, GeoPoint{10, 20});
  auto msgs = broker.peek("sensor.hotspot");
  ASSERT_EQ(msgs.size(), 1u);
  EXPECT_EQ(msgs[0].headers.at(mq::kSensorType), "hotspot");
  auto e = envelope_from_json(json::parse(msgs[0].payload));
  EXPECT_EQ(e.envelope_id, id);
  EXPECT_EQ(e.source_id, "sat-7");
  EXPECT_EQ(e.content_sha256, sha256_hex(bytes));
  EXPECT_EQ(e.received_at, clock.now());
  EXPECT_EQ(e.geolocation, (GeoPoint{10, 20}));
  // Payload lives in the object store, never inline.
  EXPECT_EQ(msgs[0].payload.find("hotspot frame"), std::string::npos);
  EXPECT_EQ(store.get_object(e.payload_uri), bytes);
  EXPECT_EQ(store.get_handle(e.payload_handle).store_name, kObjectStore);
  EXPECT_EQ(gw->get_envelope(id), e);
  EXPECT_EQ(envelope_from_json(to_json(e)), e);
  EXPECT_EQ(gw->recent("hotspot").at(0), e);
}

TEST_F(SensorFixture, UnknownOrPullTypeIsRejected) {
  EXPECT_EQ(code_of([&] { gw->ingest_push("unknown", "x", "b"); }), ErrorCode::UnknownSensorType);
  EXPECT_EQ(code_of([&] { gw->ingest_push("kp-index", "x", "b"); }), ErrorCode::UnknownSensorType);
  EXPECT_FALSE(broker.has_queue("sensor.unknown"));
  EXPECT_EQ(code_of([&] { gw->register_consumer("unknown", nullptr); }), ErrorCode::UnknownSensorType);
}

TEST_F(SensorFixture, ReRegisteringType) {
  EXPECT_NO_THROW(gw->register_type(push_type("hotspot")));
  EXPECT_EQ(code_of([&] { gw->register_type({"hotspot", Mode::PULL, "http://a/", 5}); }),
            ErrorCode::AlreadyRegistered);
}

TEST_F(SensorFixture, PullChangeDetection) {
  pages["http://feeds/kp"] = "kp=3";
  EXPECT_EQ(gw->poll_pull_sources().size(), 1u);
  EXPECT_TRUE(gw->poll_pull_sources().empty());  // interval not elapsed
  clock.advance(600);
  EXPECT_TRUE(gw->poll_pull_sources().empty());  // same bytes
  clock.advance(600);
  pages["http://feeds/kp"] = "kp=5";
  auto ids = gw->poll_pull_sources();
  ASSERT_EQ(ids.size(), 1u);
  EXPECT_EQ(store.get_object(gw->get_envelope(ids[0]).payload_uri), "kp=5");
  EXPECT_EQ(gw->get_envelope(ids[0]).source_id, "http://feeds/kp");
  EXPECT_EQ(broker.depth("sensor.kp-index"), 2u);
}

TEST_F(SensorFixture, PullFailureIsCounted) {
  EXPECT_TRUE(gw->poll_pull_sources().empty());
  EXPECT_EQ(gw->pull_failures("kp-index"), 1);
  clock.advance(600);
  EXPECT_TRUE(gw->poll_pull_sources().empty());
  EXPECT_EQ(gw->pull_failures("kp-index"), 2);
  EXPECT_EQ(broker.depth("sensor.kp-index"), 0u);
  // The count and the last digest survive a restart.
  pages["http://feeds/kp"] = "kp=1";
  clock.advance(600);
  EXPECT_EQ(gw->poll_pull_sources().size(), 1u);
  gw.reset();
  open();
  EXPECT_EQ(gw->pull_failures("kp-index"), 2);
  EXPECT_TRUE(gw->poll_pull_sources().empty());
}

TEST_F(SensorFixture, ConsumerAcksAndEmitsTrigger) {
  std::vector<std::pair<std::string, json>> triggers;
  gw->set_trigger_sink([&](const std::string& type, const std::string& env, const json& ctx) {
    EXPECT_EQ(type, "hotspot");
    triggers.push_back({env, ctx});
  });
  gw->register_consumer("hotspot", [&](const SensorEnvelope& e) {
    return json{{"fire.area", static_cast<double>(e.size_bytes)}};
  });
  auto id = gw->ingest_push("hotspot", "sat-7", "abcd");
  broker.run_until_idle();
  ASSERT_EQ(triggers.size(), 1u);
  EXPECT_EQ(triggers[0].first, id);
  EXPECT_EQ(triggers[0].second["fire.area"], 4.0);
  EXPECT_EQ(broker.stats("sensor.hotspot").acked, 1u);
  EXPECT_EQ(broker.depth("sensor.hotspot"), 0u);
}

TEST_F(SensorFixture, FailingHandlerDeadLetters) {
  int calls = 0;
  gw->register_consumer("hotspot", [&](const SensorEnvelope&) -> json {
    ++calls;
    throw std::runtime_error("boom");
  });
  gw->ingest_push("hotspot", "sat-7", "x");
  broker.run_until_idle();
  EXPECT_EQ(calls, 5);
  EXPECT_EQ(broker.depth("sensor.hotspot.dead"), 1u);
  EXPECT_EQ(broker.depth("sensor.hotspot"), 0u);
}

TEST_F(SensorFixture, ExclusiveRegistration) {
  auto a = gw->register_consumer("hotspot", nullptr);
  EXPECT_EQ(code_of([&] { gw->register_consumer("hotspot", nullptr); }), ErrorCode::AlreadyRegistered);
  EXPECT_EQ(code_of([&] { gw->register_consumer("hotspot", nullptr, false); }), ErrorCode::AlreadyRegistered);
  gw->unregister_consumer(a);
  gw->register_consumer("hotspot", nullptr, false);
  gw->register_consumer("hotspot", nullptr, false);
  EXPECT_EQ(code_of([&] { gw->register_consumer("hotspot", nullptr); }), ErrorCode::AlreadyRegistered);
}

TEST_F(SensorFixture, SharedConsumersSplitEnvelopes) {
  std::map<int, std::multiset<std::string>> seen;
  for (int k = 0; k < 2; ++k)
    gw->register_consumer("hotspot", [&, k](const SensorEnvelope& e) {
      seen[k].insert(e.envelope_id);
      return json::object();
    }, false);
  std::set<std::string> ids;
  for (int i = 0; i < 20; ++i) ids.insert(gw->ingest_push("hotspot", "s", std::to_string(i)));
  broker.run_until_idle();
  EXPECT_FALSE(seen[0].empty());
  EXPECT_FALSE(seen[1].empty());
  std::multiset<std::string> all(seen[0]);
  all.insert(seen[1].begin(), seen[1].end());
  EXPECT_EQ(all, std::multiset<std::string>(ids.begin(), ids.end()));
}

TEST_F(SensorFixture, EnvelopesSurviveRestart) {
  gw->ingest_push("hotspot", "s", "a");
  gw->ingest_push("hotspot", "s", "b");
  gw.reset();
  broker.kill();
  mq::Broker again({dir / "mq", &clock, mq::Broker::Dispatch::Manual, false, 5});
  SensorGateway g2(store, again, {{push_type("hotspot")}, default_fetch, 1});
  std::vector<std::string> got;
  g2.register_consumer("hotspot", [&](const SensorEnvelope& e) {
    got.push_back(store.get_object(e.payload_uri));
    return json::object();
  });
  again.run_until_idle();
  EXPECT_EQ(got, (std::vector<std::string>{"a", "b"}));
}

TEST(SensorBurst, NoLossWithSlowConsumer) {
  auto r = urgent::testkit::run_sensor_burst(200, 2);
  EXPECT_EQ(r.accepted, 200u);
  EXPECT_EQ(r.acked + r.dead_lettered, 200u);
  EXPECT_EQ(r.handled_distinct, 200u);
  EXPECT_EQ(r.remaining, 0u);
  EXPECT_GT(r.max_depth, 1u);
}

TEST(SensorFetch, FileUrls) {
  TempDir d;
  urgent::testkit::write_text(d / "kp.txt", "kp=2");
  EXPECT_EQ(default_fetch("file://" + (d / "kp.txt").string()), "kp=2");
  EXPECT_THROW(default_fetch("file://" + (d / "missing").string()), Error);
  EXPECT_THROW(default_fetch("gopher://x"), Error);
  EXPECT_THROW(default_fetch("http://127.0.0.1:1/kp"), Error);
}
