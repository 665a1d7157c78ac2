#pragma once

// Sensor ingestion: push and pull sources, payloads into the "sensors" object
// store, envelopes onto sensor.<type> queues, one consumer pipeline per type.

#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "urgent/broker.hpp"
#include "urgent/common.hpp"
#include "urgent/state_store.hpp"

namespace urgent::sensors {

inline constexpr const char* kObjectStore = "sensors";

enum class Mode { PUSH, PULL };
const char* to_string(Mode m);

struct SensorTypeConfig {
  std::string sensor_type;
  Mode mode = Mode::PUSH;
  std::optional<std::string> pull_url;
  std::optional<std::int64_t> pull_interval_s;

  std::string queue() const { return "sensor." + sensor_type; }
  bool operator==(const SensorTypeConfig&) const = default;
};

void validate(const SensorTypeConfig& c);
SensorTypeConfig sensor_type_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SensorTypeConfig& c);

struct GeoPoint {
  double lat = 0;
  double lon = 0;
  bool operator==(const GeoPoint&) const = default;
};

/// "lat,lon" in degrees. InvalidArgument when malformed or out of range.
GeoPoint parse_geolocation(std::string_view text);

struct SensorEnvelope {
  std::string envelope_id;
  std::string sensor_type;
  std::string source_id;
  Timestamp received_at = 0;
  std::string payload_handle;  // handle id in the object store
  std::string payload_uri;
  std::int64_t size_bytes = 0;
  // Standardized metadata.
  std::string meta_type;
  Timestamp meta_timestamp = 0;
  std::optional<GeoPoint> geolocation;
  std::string content_sha256;

  bool operator==(const SensorEnvelope&) const = default;
};

nlohmann::json to_json(const SensorEnvelope& e);
SensorEnvelope envelope_from_json(const nlohmann::json& j);

/// Returns the body at `url`; throws on any failure.
using Fetcher = std::function<std::string(const std::string& url)>;

/// file:// paths and plain http:// URLs.
std::string default_fetch(const std::string& url);

class SensorGateway {
 public:
  /// Context for the trigger; the envelope id and type are added by the
  /// engine. Throwing nacks the envelope.
  using Handler = std::function<nlohmann::json(const SensorEnvelope&)>;
  using TriggerSink = std::function<void(const std::string& sensor_type,
                                         const std::string& envelope_id,
                                         const nlohmann::json& context)>;
  using ArrivalListener = std::function<void(const SensorEnvelope&)>;

  struct Options {
    std::vector<SensorTypeConfig> types;
    Fetcher fetch = default_fetch;
    /// Prefetch per consumer.
    int prefetch = 1;
  };

  SensorGateway(StateStore& store, mq::Broker& broker, Options opts);
  ~SensorGateway();
  SensorGateway(const SensorGateway&) = delete;
  SensorGateway& operator=(const SensorGateway&) = delete;

  /// Declares the durable queue. Re-registering an identical type is a
  /// no-op; a different one is AlreadyRegistered.
  void register_type(const SensorTypeConfig& cfg);
  std::vector<SensorTypeConfig> types() const;
  std::optional<SensorTypeConfig> type(const std::string& sensor_type) const;

  void set_trigger_sink(TriggerSink sink);
  void add_arrival_listener(ArrivalListener fn);

  /// UnknownSensorType unless the type is registered for PUSH.
  std::string ingest_push(const std::string& sensor_type, const std::string& source_id,
                          std::string_view payload, std::optional<GeoPoint> geo = std::nullopt);

  /// Fetches every PULL source whose interval has elapsed and ingests the
  /// ones whose content changed. Never throws for fetch failures.
  std::vector<std::string> poll_pull_sources();
  std::int64_t pull_failures(const std::string& sensor_type) const;

  /// An exclusive consumer must be alone on its type.
  std::string register_consumer(const std::string& sensor_type, Handler handler,
                                bool exclusive = true);
  void unregister_consumer(const std::string& consumer_id);

  SensorEnvelope get_envelope(const std::string& envelope_id) const;
  /// Newest first, at most `limit` per type.
  std::vector<SensorEnvelope> recent(const std::string& sensor_type, std::size_t limit = 20) const;

 private:
  struct ConsumerInfo {
    std::string sensor_type;
    bool exclusive = false;
  };

  std::string ingest(const SensorTypeConfig& cfg, const std::string& source_id,
                     std::string_view payload, std::optional<GeoPoint> geo);
  void deliver(const std::string& sensor_type, const Handler& handler, const mq::Message& m);

  StateStore& store_;
  mq::Broker& broker_;
  Options opts_;
  mutable std::mutex mu_;
  std::map<std::string, SensorTypeConfig> types_;
  std::map<std::string, ConsumerInfo> consumers_;
  std::map<std::string, Timestamp> next_pull_;
  std::map<std::string, std::int64_t> failures_;
  std::map<std::string, std::vector<SensorEnvelope>> recent_;
  TriggerSink sink_;
  std::vector<ArrivalListener> listeners_;
};

}  // namespace urgent::sensors
