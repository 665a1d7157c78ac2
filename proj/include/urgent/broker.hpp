#pragma once

// In-process message broker with AMQP-like semantics: named FIFO queues,
// competing consumers with prefetch, ack/nack with head-of-queue redelivery,
// dead-lettering, reply-to RPC, and per-queue append-only logs for recovery.

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "urgent/common.hpp"

namespace urgent::mq {

inline constexpr const char* kReplyTo = "reply-to";
inline constexpr const char* kCorrelationId = "correlation-id";
inline constexpr const char* kSensorType = "sensor-type";

struct Message {
  std::string message_id;
  std::string queue;
  std::string payload;
  StringMap headers;
  Timestamp enqueued_at = 0;
  std::uint32_t delivery_count = 0;
  std::uint64_t seq = 0;  // publish order within the queue

  bool operator==(const Message&) const = default;
};

struct QueueDecl {
  std::string name;
  bool durable = true;

  bool operator==(const QueueDecl&) const = default;
};

/// A corrupt or truncated log record. Records before `offset` were restored.
class RecoveryError : public Error {
 public:
  RecoveryError(std::string queue, std::uint64_t offset, const std::string& why);
  const std::string& queue() const { return queue_; }
  std::uint64_t offset() const { return offset_; }

 private:
  std::string queue_;
  std::uint64_t offset_;
};

struct QueueStats {
  std::uint64_t published = 0;      // accepted into this queue (incl. restored)
  std::uint64_t acked = 0;
  std::uint64_t dead_lettered = 0;  // moved out to <name>.dead (or dropped from a .dead queue)
  std::uint64_t ready = 0;
  std::uint64_t unacked = 0;
  std::uint64_t consumers = 0;
};

bool valid_queue_name(std::string_view name);
std::string dead_letter_name(std::string_view queue);

class Broker {
 public:
  enum class Dispatch { Threaded, Manual };

  struct Options {
    std::filesystem::path dir;  // log directory; required for durable queues
    const Clock* clock = nullptr;
    Dispatch dispatch = Dispatch::Threaded;
    bool fsync = true;
    std::uint32_t max_deliveries = 5;
  };

  using Handler = std::function<void(const Message&)>;

  /// Opens the directory and replays every `<queue>.qlog` found there.
  explicit Broker(Options opts);
  ~Broker();
  Broker(const Broker&) = delete;
  Broker& operator=(const Broker&) = delete;

  QueueDecl declare_queue(const std::string& name, bool durable = true);
  bool has_queue(const std::string& name) const;
  void delete_queue(const std::string& name);
  std::vector<QueueDecl> queues() const;

  std::string publish(const std::string& queue, std::string payload, StringMap headers = {});

  std::string consume(const std::string& queue, Handler handler, int prefetch = 1);
  /// Stops the consumer; its unacked messages go back to the queue head.
  void cancel(const std::string& consumer_id);

  void ack(const std::string& message_id);
  void nack(const std::string& message_id, bool requeue);

  std::string rpc_call(const std::string& queue, std::string payload, double timeout_s,
                       StringMap headers = {});
  /// Publishes `payload` to the request's reply-to queue. False when the
  /// caller has gone away.
  bool reply(const Message& request, std::string payload);

  /// Problems found while replaying logs at construction.
  const std::vector<RecoveryError>& recovery_errors() const { return recovery_errors_; }

  // Manual dispatch.
  /// Delivers one message to the next consumer able to take one (round
  /// robin) and runs its handler inline. False when nothing was deliverable.
  bool pump();
  bool pump_consumer(const std::string& consumer_id);
  std::size_t run_until_idle(std::size_t max_steps = SIZE_MAX);

  QueueStats stats(const std::string& queue) const;
  /// Ready (undelivered) messages in delivery order.
  std::vector<Message> peek(const std::string& queue) const;
  std::vector<Message> unacked(const std::string& queue) const;
  std::size_t depth(const std::string& queue) const;

  /// Simulates an abrupt process death: nothing more is written, consumer
  /// threads wind down, every later call fails with InvalidState.
  void kill();
  bool killed() const;

 private:
  struct Log;
  struct Queue;
  struct Consumer;
  struct Inflight {
    Message msg;
    std::string consumer_id;
  };

  void check_alive_locked() const;
  Queue& queue_locked(const std::string& name);
  const Queue& queue_locked(const std::string& name) const;
  Queue& declare_locked(const std::string& name, bool durable);
  void enqueue_locked(Queue& q, Message m, bool at_head);
  std::optional<Message> take_locked(Consumer& c);
  void nack_locked(const std::string& message_id, bool requeue);
  void requeue_inflight_locked(const std::string& consumer_id);
  void dead_letter_locked(Queue& q, Message m);
  void maybe_compact_locked(Queue& q);
  void recover_queue(const std::filesystem::path& file);
  void run_handler(Consumer& c, const Message& m);
  void consumer_loop(std::shared_ptr<Consumer> c);
  const Clock& clock() const { return *clock_; }

  Options opts_;
  SystemClock system_clock_;
  const Clock* clock_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::string, std::unique_ptr<Queue>> queues_;
  std::map<std::string, std::shared_ptr<Consumer>> consumers_;
  std::map<std::string, Inflight> inflight_;  // message_id -> delivery
  std::vector<std::thread> threads_;
  std::vector<RecoveryError> recovery_errors_;
  std::size_t rr_ = 0;
  bool killed_ = false;
  bool stopping_ = false;
};

}  // namespace urgent::mq
