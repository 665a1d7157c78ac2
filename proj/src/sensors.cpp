#include "urgent/sensors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <httplib.h>

namespace urgent::sensors {

using nlohmann::json;

namespace {

constexpr std::size_t kRecentPerType = 50;

bool valid_type_name(std::string_view s) {
  if (s.empty() || s.size() > 64) return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
  });
}

std::string envelope_key(const std::string& id) { return "envelope:" + id; }
std::string digest_key(const std::string& type) { return "sensor.digest:" + type; }
std::string failures_key(const std::string& type) { return "sensor.failures:" + type; }

}  // namespace

const char* to_string(Mode m) { return m == Mode::PUSH ? "PUSH" : "PULL"; }

void validate(const SensorTypeConfig& c) {
  if (!valid_type_name(c.sensor_type))
    fail(ErrorCode::InvalidArgument, "bad sensor type name '" + c.sensor_type + "'");
  if (c.mode == Mode::PULL) {
    if (!c.pull_url || c.pull_url->empty())
      fail(ErrorCode::InvalidArgument, c.sensor_type + ": PULL needs pull_url");
    if (!c.pull_interval_s || *c.pull_interval_s <= 0)
      fail(ErrorCode::InvalidArgument, c.sensor_type + ": PULL needs a positive pull_interval_s");
  }
  if (c.pull_interval_s && *c.pull_interval_s <= 0)
    fail(ErrorCode::InvalidArgument, c.sensor_type + ": pull_interval_s must be positive");
}

SensorTypeConfig sensor_type_from_json(const json& j) {
  SensorTypeConfig c;
  try {
    c.sensor_type = j.at("sensor_type").get<std::string>();
    const auto mode = j.value("mode", std::string("PUSH"));
    if (mode == "PUSH") c.mode = Mode::PUSH;
    else if (mode == "PULL") c.mode = Mode::PULL;
    else fail(ErrorCode::InvalidArgument, "unknown sensor mode '" + mode + "'");
    if (j.contains("pull_url")) c.pull_url = j["pull_url"].get<std::string>();
    if (j.contains("pull_interval_s")) c.pull_interval_s = j["pull_interval_s"].get<std::int64_t>();
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("sensor type: ") + e.what());
  }
  validate(c);
  return c;
}

json to_json(const SensorTypeConfig& c) {
  json j{{"sensor_type", c.sensor_type}, {"mode", to_string(c.mode)}, {"queue", c.queue()}};
  if (c.pull_url) j["pull_url"] = *c.pull_url;
  if (c.pull_interval_s) j["pull_interval_s"] = *c.pull_interval_s;
  return j;
}

GeoPoint parse_geolocation(std::string_view text) {
  auto parts = split(text, ',');
  if (parts.size() != 2) fail(ErrorCode::InvalidArgument, "geolocation must be 'lat,lon'");
  GeoPoint g;
  try {
    std::size_t used = 0;
    std::string a(trim(parts[0])), b(trim(parts[1]));
    g.lat = std::stod(a, &used);
    if (used != a.size()) throw std::invalid_argument(a);
    g.lon = std::stod(b, &used);
    if (used != b.size()) throw std::invalid_argument(b);
  } catch (const std::logic_error&) {
    fail(ErrorCode::InvalidArgument, "geolocation must be 'lat,lon'");
  }
  if (!std::isfinite(g.lat) || !std::isfinite(g.lon) || std::abs(g.lat) > 90 || std::abs(g.lon) > 180)
    fail(ErrorCode::InvalidArgument, "geolocation out of range");
  return g;
}

json to_json(const SensorEnvelope& e) {
  json meta{{"type", e.meta_type},
            {"timestamp", format_utc(e.meta_timestamp)},
            {"content_sha256", e.content_sha256}};
  if (e.geolocation) meta["geolocation"] = {{"lat", e.geolocation->lat}, {"lon", e.geolocation->lon}};
  return {{"envelope_id", e.envelope_id},
          {"sensor_type", e.sensor_type},
          {"source_id", e.source_id},
          {"received_at", format_utc(e.received_at)},
          {"payload_handle", e.payload_handle},
          {"payload_uri", e.payload_uri},
          {"size_bytes", e.size_bytes},
          {"meta", meta}};
}

SensorEnvelope envelope_from_json(const json& j) {
  SensorEnvelope e;
  try {
    e.envelope_id = j.at("envelope_id").get<std::string>();
    e.sensor_type = j.at("sensor_type").get<std::string>();
    e.source_id = j.at("source_id").get<std::string>();
    e.received_at = parse_utc(j.at("received_at").get<std::string>());
    e.payload_handle = j.at("payload_handle").get<std::string>();
    e.payload_uri = j.at("payload_uri").get<std::string>();
    e.size_bytes = j.at("size_bytes").get<std::int64_t>();
    const auto& m = j.at("meta");
    e.meta_type = m.at("type").get<std::string>();
    e.meta_timestamp = parse_utc(m.at("timestamp").get<std::string>());
    e.content_sha256 = m.at("content_sha256").get<std::string>();
    if (m.contains("geolocation"))
      e.geolocation = GeoPoint{m["geolocation"].at("lat").get<double>(),
                               m["geolocation"].at("lon").get<double>()};
  } catch (const json::exception& ex) {
    fail(ErrorCode::InvalidArgument, std::string("envelope: ") + ex.what());
  }
  return e;
}

std::string default_fetch(const std::string& url) {
  if (starts_with(url, "file://")) {
    std::ifstream in(url.substr(7), std::ios::binary);
    if (!in) fail(ErrorCode::NotFound, "cannot read " + url);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }
  if (starts_with(url, "http://")) {
    const auto slash = url.find('/', 7);
    const std::string origin = slash == std::string::npos ? url : url.substr(0, slash);
    const std::string path = slash == std::string::npos ? "/" : url.substr(slash);
    httplib::Client cli(origin);
    cli.set_connection_timeout(5);
    cli.set_read_timeout(30);
    auto res = cli.Get(path);
    if (!res) fail(ErrorCode::MachineUnreachable, "fetch " + url + ": " + httplib::to_string(res.error()));
    if (res->status != 200)
      fail(ErrorCode::NotFound, "fetch " + url + ": HTTP " + std::to_string(res->status));
    return res->body;
  }
  fail(ErrorCode::Unsupported, "unsupported pull URL " + url);
}

// ---------------------------------------------------------------------------

SensorGateway::SensorGateway(StateStore& store, mq::Broker& broker, Options opts)
    : store_(store), broker_(broker), opts_(std::move(opts)) {
  for (const auto& t : opts_.types) register_type(t);
}

SensorGateway::~SensorGateway() {
  std::vector<std::string> ids;
  {
    std::lock_guard lock(mu_);
    for (const auto& [id, info] : consumers_) ids.push_back(id);
  }
  for (const auto& id : ids) {
    try {
      broker_.cancel(id);
    } catch (const Error&) {
    }
  }
}

void SensorGateway::register_type(const SensorTypeConfig& cfg) {
  validate(cfg);
  std::lock_guard lock(mu_);
  auto it = types_.find(cfg.sensor_type);
  if (it != types_.end()) {
    if (it->second == cfg) return;
    fail(ErrorCode::AlreadyRegistered, "sensor type " + cfg.sensor_type + " registered differently");
  }
  broker_.declare_queue(cfg.queue(), true);
  types_[cfg.sensor_type] = cfg;
  if (auto f = store_.get_kv(failures_key(cfg.sensor_type))) failures_[cfg.sensor_type] = std::stoll(*f);
}

std::vector<SensorTypeConfig> SensorGateway::types() const {
  std::lock_guard lock(mu_);
  std::vector<SensorTypeConfig> out;
  for (const auto& [name, t] : types_) out.push_back(t);
  return out;
}

std::optional<SensorTypeConfig> SensorGateway::type(const std::string& sensor_type) const {
  std::lock_guard lock(mu_);
  auto it = types_.find(sensor_type);
  if (it == types_.end()) return std::nullopt;
  return it->second;
}

void SensorGateway::set_trigger_sink(TriggerSink sink) {
  std::lock_guard lock(mu_);
  sink_ = std::move(sink);
}

void SensorGateway::add_arrival_listener(ArrivalListener fn) {
  std::lock_guard lock(mu_);
  listeners_.push_back(std::move(fn));
}

std::string SensorGateway::ingest_push(const std::string& sensor_type, const std::string& source_id,
                                       std::string_view payload, std::optional<GeoPoint> geo) {
  auto cfg = type(sensor_type);
  if (!cfg) fail(ErrorCode::UnknownSensorType, "unknown sensor type '" + sensor_type + "'");
  if (cfg->mode != Mode::PUSH)
    fail(ErrorCode::UnknownSensorType, "sensor type '" + sensor_type + "' is not a push source");
  return ingest(*cfg, source_id, payload, geo);
}

std::string SensorGateway::ingest(const SensorTypeConfig& cfg, const std::string& source_id,
                                  std::string_view payload, std::optional<GeoPoint> geo) {
  SensorEnvelope e;
  e.envelope_id = make_id("env");
  e.sensor_type = cfg.sensor_type;
  e.source_id = source_id.empty() ? "anonymous" : source_id;
  e.received_at = store_.clock().now();
  const auto h = store_.put_object(kObjectStore, cfg.sensor_type + "/" + e.envelope_id, payload);
  e.payload_handle = h.handle_id;
  e.payload_uri = h.uri;
  e.size_bytes = h.size_bytes;
  e.meta_type = cfg.sensor_type;
  e.meta_timestamp = e.received_at;
  e.geolocation = geo;
  e.content_sha256 = h.sha256;
  const auto text = to_json(e).dump();
  store_.put_kv(envelope_key(e.envelope_id), text);
  broker_.publish(cfg.queue(), text, {{mq::kSensorType, cfg.sensor_type}});

  std::vector<ArrivalListener> ls;
  {
    std::lock_guard lock(mu_);
    auto& r = recent_[cfg.sensor_type];
    r.insert(r.begin(), e);
    if (r.size() > kRecentPerType) r.pop_back();
    ls = listeners_;
  }
  for (const auto& fn : ls) fn(e);
  return e.envelope_id;
}

std::vector<std::string> SensorGateway::poll_pull_sources() {
  const auto now = store_.clock().now();
  std::vector<SensorTypeConfig> due;
  {
    std::lock_guard lock(mu_);
    for (const auto& [name, t] : types_) {
      if (t.mode != Mode::PULL) continue;
      auto it = next_pull_.find(name);
      if (it != next_pull_.end() && now < it->second) continue;
      next_pull_[name] = now + *t.pull_interval_s;
      due.push_back(t);
    }
  }
  std::vector<std::string> out;
  for (const auto& t : due) {
    std::string body;
    try {
      body = opts_.fetch(*t.pull_url);
    } catch (const std::exception& ex) {
      std::int64_t n;
      {
        std::lock_guard lock(mu_);
        n = ++failures_[t.sensor_type];
      }
      store_.put_kv(failures_key(t.sensor_type), std::to_string(n));
      log_warn("sensor " + t.sensor_type + ": fetch failed: " + ex.what());
      continue;
    }
    const auto digest = sha256_hex(body);
    if (store_.get_kv(digest_key(t.sensor_type)) == digest) continue;
    out.push_back(ingest(t, *t.pull_url, body, std::nullopt));
    store_.put_kv(digest_key(t.sensor_type), digest);
  }
  return out;
}

std::int64_t SensorGateway::pull_failures(const std::string& sensor_type) const {
  std::lock_guard lock(mu_);
  auto it = failures_.find(sensor_type);
  return it == failures_.end() ? 0 : it->second;
}

std::string SensorGateway::register_consumer(const std::string& sensor_type, Handler handler,
                                             bool exclusive) {
  std::lock_guard lock(mu_);
  auto t = types_.find(sensor_type);
  if (t == types_.end()) fail(ErrorCode::UnknownSensorType, "unknown sensor type '" + sensor_type + "'");
  for (const auto& [id, info] : consumers_)
    if (info.sensor_type == sensor_type && (exclusive || info.exclusive))
      fail(ErrorCode::AlreadyRegistered, "sensor type " + sensor_type + " already has an exclusive consumer");
  auto id = broker_.consume(
      t->second.queue(), [this, sensor_type, h = std::move(handler)](const mq::Message& m) { deliver(sensor_type, h, m); },
      opts_.prefetch);
  consumers_[id] = {sensor_type, exclusive};
  return id;
}

void SensorGateway::unregister_consumer(const std::string& consumer_id) {
  {
    std::lock_guard lock(mu_);
    if (!consumers_.erase(consumer_id)) fail(ErrorCode::NotFound, "no consumer " + consumer_id);
  }
  broker_.cancel(consumer_id);
}

void SensorGateway::deliver(const std::string& sensor_type, const Handler& handler, const mq::Message& m) {
  SensorEnvelope e;
  try {
    e = envelope_from_json(json::parse(m.payload));
  } catch (const std::exception& ex) {
    log_warn("sensor " + sensor_type + ": malformed envelope " + m.message_id + ": " + ex.what());
    broker_.nack(m.message_id, false);
    return;
  }
  json ctx = handler ? handler(e) : json::object();
  if (ctx.is_null()) ctx = json::object();
  TriggerSink sink;
  {
    std::lock_guard lock(mu_);
    sink = sink_;
  }
  if (sink) sink(e.sensor_type, e.envelope_id, ctx);
  broker_.ack(m.message_id);
}

SensorEnvelope SensorGateway::get_envelope(const std::string& envelope_id) const {
  auto text = store_.get_kv(envelope_key(envelope_id));
  if (!text) fail(ErrorCode::NotFound, "no envelope " + envelope_id);
  return envelope_from_json(json::parse(*text));
}

std::vector<SensorEnvelope> SensorGateway::recent(const std::string& sensor_type, std::size_t limit) const {
  std::lock_guard lock(mu_);
  auto it = recent_.find(sensor_type);
  if (it == recent_.end()) return {};
  return {it->second.begin(), it->second.begin() + static_cast<std::ptrdiff_t>(std::min(limit, it->second.size()))};
}

}  // namespace urgent::sensors
