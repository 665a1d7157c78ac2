#include "urgent/events.hpp"

namespace urgent::api {

const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::ACTIVITY_STATUS: return "ACTIVITY_STATUS";
    case EventKind::JOB_STATUS: return "JOB_STATUS";
    case EventKind::MACHINE_STATUS: return "MACHINE_STATUS";
    case EventKind::SENSOR_ARRIVAL: return "SENSOR_ARRIVAL";
  }
  return "?";
}

nlohmann::json to_json(const ApiEvent& e) {
  return {{"seq", e.seq}, {"kind", to_string(e.kind)}, {"body", e.body}, {"at", format_utc(e.at)}};
}

EventLog::EventLog(std::size_t capacity, const Clock* clock)
    : capacity_(capacity), clock_(clock ? clock : &system_clock_) {
  if (capacity_ == 0) fail(ErrorCode::InvalidArgument, "event ring capacity must be positive");
}

std::uint64_t EventLog::emit(EventKind kind, nlohmann::json body) {
  if (body.is_null()) body = nlohmann::json::object();
  std::uint64_t seq;
  {
    std::lock_guard lock(mu_);
    seq = next_++;
    ring_.push_back({seq, kind, std::move(body), clock_->now()});
    if (ring_.size() > capacity_) ring_.pop_front();
  }
  cv_.notify_all();
  return seq;
}

std::vector<ApiEvent> EventLog::since(std::uint64_t after, std::size_t limit) const {
  std::lock_guard lock(mu_);
  std::vector<ApiEvent> out;
  if (ring_.empty() || after >= ring_.back().seq) return out;
  // seq is contiguous inside the ring.
  const auto first = ring_.front().seq;
  std::size_t i = after < first ? 0 : static_cast<std::size_t>(after - first + 1);
  for (; i < ring_.size() && out.size() < limit; ++i) out.push_back(ring_[i]);
  return out;
}

bool EventLog::wait_newer(std::uint64_t after, std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mu_);
  cv_.wait_for(lock, timeout, [&] { return closed_ || next_ - 1 > after; });
  return next_ - 1 > after;
}

std::uint64_t EventLog::last_seq() const {
  std::lock_guard lock(mu_);
  return next_ - 1;
}

std::size_t EventLog::size() const {
  std::lock_guard lock(mu_);
  return ring_.size();
}

void EventLog::close() {
  {
    std::lock_guard lock(mu_);
    closed_ = true;
  }
  cv_.notify_all();
}

bool EventLog::closed() const {
  std::lock_guard lock(mu_);
  return closed_;
}

}  // namespace urgent::api
