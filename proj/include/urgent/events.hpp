#pragma once

// Bounded, sequence-numbered event ring behind the live event stream.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "urgent/common.hpp"

namespace urgent::api {

enum class EventKind { ACTIVITY_STATUS, JOB_STATUS, MACHINE_STATUS, SENSOR_ARRIVAL };
const char* to_string(EventKind k);

struct ApiEvent {
  std::uint64_t seq = 0;
  EventKind kind = EventKind::ACTIVITY_STATUS;
  nlohmann::json body = nlohmann::json::object();
  Timestamp at = 0;
};

nlohmann::json to_json(const ApiEvent& e);

class EventLog {
 public:
  static constexpr std::size_t kDefaultCapacity = 10000;

  explicit EventLog(std::size_t capacity = kDefaultCapacity, const Clock* clock = nullptr);

  /// Seq values start at 1 and never repeat.
  std::uint64_t emit(EventKind kind, nlohmann::json body = nlohmann::json::object());

  /// Retained events with seq > `after`, oldest first.
  std::vector<ApiEvent> since(std::uint64_t after, std::size_t limit = SIZE_MAX) const;
  /// Blocks until an event with seq > `after` exists, `timeout` passes or
  /// the log is closed. True when there is something to read.
  bool wait_newer(std::uint64_t after, std::chrono::milliseconds timeout) const;

  std::uint64_t last_seq() const;
  std::size_t size() const;
  std::size_t capacity() const { return capacity_; }

  /// Wakes every waiter; later waits return immediately.
  void close();
  bool closed() const;

 private:
  std::size_t capacity_;
  SystemClock system_clock_;
  const Clock* clock_;
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::deque<ApiEvent> ring_;
  std::uint64_t next_ = 1;
  bool closed_ = false;
};

}  // namespace urgent::api
