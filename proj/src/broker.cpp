#include "urgent/broker.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>

namespace urgent::mq {

namespace fs = std::filesystem;

RecoveryError::RecoveryError(std::string queue, std::uint64_t offset, const std::string& why)
    : Error(ErrorCode::RecoveryError,
            "queue " + queue + ": " + why + " at byte offset " + std::to_string(offset)),
      queue_(std::move(queue)),
      offset_(offset) {}

bool valid_queue_name(std::string_view name) {
  if (name.empty()) return false;
  return std::all_of(name.begin(), name.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '.' || c == '_' || c == '-';
  });
}

std::string dead_letter_name(std::string_view queue) { return std::string(queue) + ".dead"; }

namespace {

bool is_dead_queue(std::string_view name) {
  return name.size() > 5 && name.substr(name.size() - 5) == ".dead";
}

enum Op : std::uint8_t { PUBLISH = 1, DELIVER = 2, ACK = 3, REQUEUE = 4, REMOVE = 5 };

// Little-endian record encoding.
class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  std::string& bytes() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(b_[p_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(b_[p_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(b_[p_++])) << (8 * i);
    return v;
  }
  std::string str() {
    auto n = u32();
    need(n);
    std::string s(b_.substr(p_, n));
    p_ += n;
    return s;
  }
  bool done() const { return p_ == b_.size(); }

 private:
  void need(std::size_t n) {
    if (b_.size() - p_ < n) throw std::out_of_range("short record");
  }
  std::string_view b_;
  std::size_t p_ = 0;
};

std::string encode_publish(const Message& m) {
  Writer w;
  w.u8(PUBLISH);
  w.str(m.message_id);
  w.u64(m.seq);
  w.u64(static_cast<std::uint64_t>(m.enqueued_at));
  w.u32(m.delivery_count);
  w.u32(static_cast<std::uint32_t>(m.headers.size()));
  for (const auto& [k, v] : m.headers) {
    w.str(k);
    w.str(v);
  }
  w.str(m.payload);
  return std::move(w.bytes());
}

std::string encode_op(Op op, const std::string& id) {
  Writer w;
  w.u8(op);
  w.str(id);
  return std::move(w.bytes());
}

std::string frame(const std::string& payload) {
  Writer w;
  w.u32(static_cast<std::uint32_t>(payload.size()));
  std::string out = std::move(w.bytes());
  out += payload;
  Writer c;
  c.u32(urgent::crc32(payload));
  out += c.bytes();
  return out;
}

void write_all(int fd, const std::string& data) {
  std::size_t off = 0;
  while (off < data.size()) {
    ssize_t n = ::write(fd, data.data() + off, data.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      fail(ErrorCode::Internal, std::string("log write failed: ") + std::strerror(errno));
    }
    off += static_cast<std::size_t>(n);
  }
}

}  // namespace

// ---------------------------------------------------------------------------

struct Broker::Log {
  fs::path path;
  int fd = -1;
  bool fsync = true;
  std::uint64_t records = 0;

  Log(fs::path p, bool sync) : path(std::move(p)), fsync(sync) { open(); }
  ~Log() { close(); }

  void open() {
    fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd < 0) fail(ErrorCode::Internal, "cannot open log " + path.string());
  }
  void close() {
    if (fd >= 0) ::close(fd);
    fd = -1;
  }
  void append(const std::string& record) {
    if (fd < 0) fail(ErrorCode::InvalidState, "log closed");
    write_all(fd, frame(record));
    if (fsync) ::fdatasync(fd);
    ++records;
  }
  bool wants_compaction(std::size_t live) const {
    return records > 4096 && records > 4 * live;
  }
  /// Atomically replaces the file with the given records.
  void rewrite(const std::vector<std::string>& recs) {
    fs::path tmp = path;
    tmp += ".tmp";
    int t = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (t < 0) fail(ErrorCode::Internal, "cannot write " + tmp.string());
    std::string all;
    for (const auto& r : recs) all += frame(r);
    write_all(t, all);
    if (fsync) ::fsync(t);
    ::close(t);
    close();
    fs::rename(tmp, path);
    open();
    records = recs.size();
  }
};

struct Broker::Queue {
  QueueDecl decl;
  std::deque<Message> ready;
  std::unique_ptr<Log> log;
  std::uint64_t next_seq = 1;
  QueueStats st;
};

struct Broker::Consumer {
  std::string id;
  std::string queue;
  Handler handler;
  int prefetch = 1;
  int unacked = 0;
  bool cancelled = false;
  std::thread thread;
};

// ---------------------------------------------------------------------------

Broker::Broker(Options opts) : opts_(std::move(opts)) {
  clock_ = opts_.clock ? opts_.clock : &system_clock_;
  if (opts_.max_deliveries < 1) fail(ErrorCode::InvalidArgument, "max_deliveries must be >= 1");
  if (opts_.dir.empty()) return;
  fs::create_directories(opts_.dir);
  std::vector<fs::path> logs;
  for (const auto& e : fs::directory_iterator(opts_.dir))
    if (e.is_regular_file() && e.path().extension() == ".qlog") logs.push_back(e.path());
  std::sort(logs.begin(), logs.end());
  for (const auto& p : logs) recover_queue(p);
}

Broker::~Broker() {
  std::vector<std::shared_ptr<Consumer>> cs;
  {
    std::lock_guard lock(mu_);
    stopping_ = true;
    for (auto& [id, c] : consumers_) cs.push_back(c);
    cv_.notify_all();
  }
  for (auto& c : cs)
    if (c->thread.joinable()) {
      if (c->thread.get_id() == std::this_thread::get_id()) c->thread.detach();
      else c->thread.join();
    }
  for (auto& t : threads_)
    if (t.joinable()) t.join();
}

void Broker::recover_queue(const fs::path& file) {
  const std::string name = file.stem().string();
  if (!valid_queue_name(name)) return;

  std::string bytes;
  {
    std::ifstream in(file, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    bytes = ss.str();
  }

  std::map<std::string, Message> live;
  std::deque<std::string> ready;
  std::set<std::string> delivered;
  std::uint64_t max_seq = 0;

  std::size_t pos = 0;
  auto le32 = [&](std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= std::uint32_t(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
    return v;
  };
  while (pos < bytes.size()) {
    if (bytes.size() - pos < 4) {
      recovery_errors_.emplace_back(name, pos, "truncated record header");
      break;
    }
    const std::uint32_t len = le32(pos);
    if (bytes.size() - pos - 4 < std::uint64_t(len) + 4) {
      recovery_errors_.emplace_back(name, pos, "truncated record");
      break;
    }
    std::string_view rec(bytes.data() + pos + 4, len);
    if (urgent::crc32(rec) != le32(pos + 4 + len)) {
      recovery_errors_.emplace_back(name, pos, "crc mismatch");
      break;
    }
    try {
      Reader r(rec);
      const auto op = r.u8();
      if (op == PUBLISH) {
        Message m;
        m.queue = name;
        m.message_id = r.str();
        m.seq = r.u64();
        m.enqueued_at = static_cast<Timestamp>(r.u64());
        m.delivery_count = r.u32();
        const auto nh = r.u32();
        for (std::uint32_t i = 0; i < nh; ++i) {
          auto k = r.str();
          m.headers[k] = r.str();
        }
        m.payload = r.str();
        if (!r.done()) throw std::out_of_range("trailing bytes");
        max_seq = std::max(max_seq, m.seq);
        ready.push_back(m.message_id);
        live[m.message_id] = std::move(m);
      } else if (op >= DELIVER && op <= REMOVE) {
        const auto id = r.str();
        if (!r.done()) throw std::out_of_range("trailing bytes");
        auto it = live.find(id);
        if (it == live.end()) throw std::out_of_range("unknown message id");
        auto in_ready = std::find(ready.begin(), ready.end(), id);
        if (op == DELIVER) {
          if (in_ready == ready.end()) throw std::out_of_range("deliver of non-ready message");
          ready.erase(in_ready);
          delivered.insert(id);
          ++it->second.delivery_count;
        } else if (op == REQUEUE) {
          if (!delivered.erase(id)) throw std::out_of_range("requeue of undelivered message");
          ready.push_front(id);
        } else {
          if (in_ready != ready.end()) ready.erase(in_ready);
          delivered.erase(id);
          live.erase(it);
        }
      } else {
        throw std::out_of_range("unknown op");
      }
    } catch (const std::out_of_range& e) {
      recovery_errors_.emplace_back(name, pos, std::string("bad record: ") + e.what());
      break;
    }
    pos += 8 + len;
  }

  auto q = std::make_unique<Queue>();
  q->decl = {name, true};
  q->next_seq = max_seq + 1;
  // Unacked-at-crash messages return to the head in publish order.
  std::vector<Message> head;
  for (const auto& id : delivered) head.push_back(live.at(id));
  std::sort(head.begin(), head.end(), [](auto& a, auto& b) { return a.seq < b.seq; });
  for (auto& m : head) q->ready.push_back(std::move(m));
  for (const auto& id : ready) q->ready.push_back(live.at(id));
  q->st.published = q->ready.size();

  q->log = std::make_unique<Log>(file, opts_.fsync);
  std::vector<std::string> recs;
  for (const auto& m : q->ready) recs.push_back(encode_publish(m));
  q->log->rewrite(recs);
  queues_[name] = std::move(q);
}

void Broker::check_alive_locked() const {
  if (killed_) fail(ErrorCode::InvalidState, "broker has been killed");
}

Broker::Queue& Broker::queue_locked(const std::string& name) {
  auto it = queues_.find(name);
  if (it == queues_.end()) fail(ErrorCode::NotFound, "unknown queue " + name);
  return *it->second;
}

const Broker::Queue& Broker::queue_locked(const std::string& name) const {
  auto it = queues_.find(name);
  if (it == queues_.end()) fail(ErrorCode::NotFound, "unknown queue " + name);
  return *it->second;
}

Broker::Queue& Broker::declare_locked(const std::string& name, bool durable) {
  if (!valid_queue_name(name))
    fail(ErrorCode::InvalidArgument, "queue name must match [a-z0-9._-]+: " + name);
  if (auto it = queues_.find(name); it != queues_.end()) {
    if (it->second->decl.durable != durable)
      fail(ErrorCode::DeclMismatch, "queue " + name + " already declared with durable=" +
                                        (it->second->decl.durable ? "true" : "false"));
    return *it->second;
  }
  auto q = std::make_unique<Queue>();
  q->decl = {name, durable};
  if (durable) {
    if (opts_.dir.empty()) fail(ErrorCode::InvalidArgument, "durable queues need a log directory");
    q->log = std::make_unique<Log>(opts_.dir / (name + ".qlog"), opts_.fsync);
  }
  auto& ref = *q;
  queues_[name] = std::move(q);
  return ref;
}

QueueDecl Broker::declare_queue(const std::string& name, bool durable) {
  std::lock_guard lock(mu_);
  check_alive_locked();
  return declare_locked(name, durable).decl;
}

bool Broker::has_queue(const std::string& name) const {
  std::lock_guard lock(mu_);
  return queues_.count(name) > 0;
}

std::vector<QueueDecl> Broker::queues() const {
  std::lock_guard lock(mu_);
  std::vector<QueueDecl> out;
  for (const auto& [n, q] : queues_) out.push_back(q->decl);
  return out;
}

void Broker::delete_queue(const std::string& name) {
  std::vector<std::string> cs;
  {
    std::lock_guard lock(mu_);
    check_alive_locked();
    queue_locked(name);
    for (const auto& [id, c] : consumers_)
      if (c->queue == name) cs.push_back(id);
  }
  for (const auto& id : cs) cancel(id);
  std::lock_guard lock(mu_);
  auto it = queues_.find(name);
  if (it == queues_.end()) return;
  if (it->second->log) {
    fs::path p = it->second->log->path;
    it->second->log.reset();
    std::error_code ec;
    fs::remove(p, ec);
  }
  queues_.erase(it);
}

void Broker::maybe_compact_locked(Queue& q) {
  if (!q.log) return;
  std::vector<const Message*> held;
  for (const auto& [id, f] : inflight_)
    if (f.msg.queue == q.decl.name) held.push_back(&f.msg);
  if (!q.log->wants_compaction(held.size() + q.ready.size())) return;
  std::sort(held.begin(), held.end(), [](auto* a, auto* b) { return a->seq < b->seq; });
  // Outstanding deliveries are written as PUBLISH + DELIVER so that replay
  // reproduces both their delivery count and their unacked status.
  std::vector<std::string> recs;
  for (const Message* m : held) {
    Message undelivered = *m;
    --undelivered.delivery_count;
    recs.push_back(encode_publish(undelivered));
    recs.push_back(encode_op(DELIVER, m->message_id));
  }
  for (const auto& m : q.ready) recs.push_back(encode_publish(m));
  q.log->rewrite(recs);
}

void Broker::enqueue_locked(Queue& q, Message m, bool at_head) {
  if (at_head) q.ready.push_front(std::move(m));
  else q.ready.push_back(std::move(m));
  cv_.notify_all();
}

std::string Broker::publish(const std::string& queue, std::string payload, StringMap headers) {
  std::lock_guard lock(mu_);
  check_alive_locked();
  Queue& q = queue_locked(queue);
  Message m;
  m.message_id = make_id("msg");
  m.queue = queue;
  m.payload = std::move(payload);
  m.headers = std::move(headers);
  m.enqueued_at = clock().now();
  m.seq = q.next_seq++;
  if (q.log) q.log->append(encode_publish(m));
  ++q.st.published;
  auto id = m.message_id;
  enqueue_locked(q, std::move(m), false);
  return id;
}

std::string Broker::consume(const std::string& queue, Handler handler, int prefetch) {
  if (prefetch < 1) fail(ErrorCode::InvalidArgument, "prefetch must be positive");
  if (!handler) fail(ErrorCode::InvalidArgument, "handler required");
  std::lock_guard lock(mu_);
  check_alive_locked();
  queue_locked(queue);
  auto c = std::make_shared<Consumer>();
  c->id = make_id("consumer");
  c->queue = queue;
  c->handler = std::move(handler);
  c->prefetch = prefetch;
  consumers_[c->id] = c;
  if (opts_.dispatch == Dispatch::Threaded)
    c->thread = std::thread([this, c] { consumer_loop(c); });
  return c->id;
}

void Broker::requeue_inflight_locked(const std::string& consumer_id) {
  std::vector<std::string> ids;
  for (const auto& [id, f] : inflight_)
    if (f.consumer_id == consumer_id) ids.push_back(id);
  std::vector<Message> back;
  for (const auto& id : ids) {
    back.push_back(inflight_.at(id).msg);
    inflight_.erase(id);
  }
  std::sort(back.begin(), back.end(), [](auto& a, auto& b) { return a.seq > b.seq; });
  for (auto& m : back) {
    auto it = queues_.find(m.queue);
    if (it == queues_.end()) continue;
    Queue& q = *it->second;
    --q.st.unacked;
    if (q.log) q.log->append(encode_op(REQUEUE, m.message_id));
    enqueue_locked(q, std::move(m), true);
  }
}

void Broker::cancel(const std::string& consumer_id) {
  std::shared_ptr<Consumer> c;
  {
    std::lock_guard lock(mu_);
    auto it = consumers_.find(consumer_id);
    if (it == consumers_.end()) fail(ErrorCode::NotFound, "unknown consumer " + consumer_id);
    c = it->second;
    c->cancelled = true;
    consumers_.erase(it);
    if (!killed_) requeue_inflight_locked(consumer_id);
    cv_.notify_all();
  }
  if (c->thread.joinable()) {
    if (c->thread.get_id() == std::this_thread::get_id()) {
      // Cancelled from inside its own handler; the loop exits once it returns.
      std::lock_guard lock(mu_);
      threads_.push_back(std::move(c->thread));
    } else {
      c->thread.join();
    }
  }
}

std::optional<Message> Broker::take_locked(Consumer& c) {
  if (c.cancelled || c.unacked >= c.prefetch) return std::nullopt;
  auto it = queues_.find(c.queue);
  if (it == queues_.end() || it->second->ready.empty()) return std::nullopt;
  Queue& q = *it->second;
  Message m = std::move(q.ready.front());
  q.ready.pop_front();
  ++m.delivery_count;
  if (q.log) q.log->append(encode_op(DELIVER, m.message_id));
  ++q.st.unacked;
  ++c.unacked;
  inflight_[m.message_id] = {m, c.id};
  return m;
}

void Broker::run_handler(Consumer& c, const Message& m) {
  try {
    c.handler(m);
  } catch (...) {
    std::lock_guard lock(mu_);
    if (!killed_ && inflight_.count(m.message_id)) nack_locked(m.message_id, true);
  }
}

void Broker::consumer_loop(std::shared_ptr<Consumer> c) {
  for (;;) {
    std::optional<Message> m;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] {
        if (stopping_ || c->cancelled) return true;
        auto it = queues_.find(c->queue);
        return c->unacked < c->prefetch && it != queues_.end() && !it->second->ready.empty();
      });
      if (stopping_ || c->cancelled) return;
      m = take_locked(*c);
    }
    if (m) run_handler(*c, *m);
  }
}

void Broker::ack(const std::string& message_id) {
  std::lock_guard lock(mu_);
  check_alive_locked();
  auto it = inflight_.find(message_id);
  if (it == inflight_.end()) fail(ErrorCode::InvalidAck, "no outstanding delivery " + message_id);
  auto qit = queues_.find(it->second.msg.queue);
  if (qit != queues_.end()) {
    Queue& q = *qit->second;
    if (q.log) q.log->append(encode_op(ACK, message_id));
    --q.st.unacked;
    ++q.st.acked;
  }
  if (auto c = consumers_.find(it->second.consumer_id); c != consumers_.end()) --c->second->unacked;
  inflight_.erase(it);
  if (qit != queues_.end()) maybe_compact_locked(*qit->second);
  cv_.notify_all();
}

void Broker::nack(const std::string& message_id, bool requeue) {
  std::lock_guard lock(mu_);
  check_alive_locked();
  nack_locked(message_id, requeue);
}

void Broker::nack_locked(const std::string& message_id, bool requeue) {
  auto it = inflight_.find(message_id);
  if (it == inflight_.end()) fail(ErrorCode::InvalidAck, "no outstanding delivery " + message_id);
  Message m = std::move(it->second.msg);
  if (auto c = consumers_.find(it->second.consumer_id); c != consumers_.end()) --c->second->unacked;
  inflight_.erase(it);
  auto qit = queues_.find(m.queue);
  if (qit == queues_.end()) return;
  Queue& q = *qit->second;
  --q.st.unacked;
  if (requeue && m.delivery_count < opts_.max_deliveries) {
    if (q.log) q.log->append(encode_op(REQUEUE, m.message_id));
    enqueue_locked(q, std::move(m), true);
  } else {
    dead_letter_locked(q, std::move(m));
  }
  maybe_compact_locked(q);
  cv_.notify_all();
}

void Broker::dead_letter_locked(Queue& q, Message m) {
  ++q.st.dead_lettered;
  if (!is_dead_queue(q.decl.name)) {
    const auto dname = dead_letter_name(q.decl.name);
    Queue* dq = nullptr;
    if (auto it = queues_.find(dname); it != queues_.end()) dq = it->second.get();
    else dq = &declare_locked(dname, q.decl.durable);
    Message d = m;
    d.queue = dname;
    d.seq = dq->next_seq++;
    d.headers["x-dead-from"] = q.decl.name;
    if (dq->log) dq->log->append(encode_publish(d));
    ++dq->st.published;
    enqueue_locked(*dq, std::move(d), false);
  }
  if (q.log) q.log->append(encode_op(REMOVE, m.message_id));
}

// ---------------------------------------------------------------------------
// RPC

std::string Broker::rpc_call(const std::string& queue, std::string payload, double timeout_s,
                             StringMap headers) {
  const std::string corr = make_id("corr");
  const std::string reply_q = "rpc.reply." + corr.substr(corr.find('-') + 1);
  {
    std::lock_guard lock(mu_);
    check_alive_locked();
    queue_locked(queue);
    declare_locked(reply_q, false);
  }
  auto drop_reply_queue = [&] {
    std::lock_guard lock(mu_);
    queues_.erase(reply_q);
  };
  headers[kReplyTo] = reply_q;
  headers[kCorrelationId] = corr;
  try {
    publish(queue, std::move(payload), std::move(headers));
  } catch (...) {
    drop_reply_queue();
    throw;
  }

  const auto deadline = std::chrono::steady_clock::now() +
                        std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                            std::chrono::duration<double>(timeout_s));
  for (;;) {
    {
      std::unique_lock lock(mu_);
      if (killed_) {
        queues_.erase(reply_q);
        fail(ErrorCode::InvalidState, "broker has been killed");
      }
      Queue& rq = queue_locked(reply_q);
      while (!rq.ready.empty()) {
        Message m = std::move(rq.ready.front());
        rq.ready.pop_front();
        ++rq.st.acked;
        auto h = m.headers.find(kCorrelationId);
        if (h != m.headers.end() && h->second == corr) {
          queues_.erase(reply_q);
          return m.payload;
        }
      }
      if (std::chrono::steady_clock::now() >= deadline) {
        queues_.erase(reply_q);
        fail(ErrorCode::Timeout, "no reply from " + queue + " within " +
                                     std::to_string(timeout_s) + " s");
      }
      if (opts_.dispatch == Dispatch::Threaded) {
        cv_.wait_until(lock, deadline);
        continue;
      }
    }
    if (!pump()) {
      std::unique_lock lock(mu_);
      cv_.wait_until(lock, std::min(deadline, std::chrono::steady_clock::now() +
                                                  std::chrono::milliseconds(5)));
    }
  }
}

bool Broker::reply(const Message& request, std::string payload) {
  auto rt = request.headers.find(kReplyTo);
  if (rt == request.headers.end()) fail(ErrorCode::InvalidArgument, "request has no reply-to");
  StringMap h;
  if (auto c = request.headers.find(kCorrelationId); c != request.headers.end())
    h[kCorrelationId] = c->second;
  try {
    publish(rt->second, std::move(payload), std::move(h));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::NotFound) return false;
    throw;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Manual dispatch

bool Broker::pump() {
  std::shared_ptr<Consumer> c;
  std::optional<Message> m;
  {
    std::lock_guard lock(mu_);
    check_alive_locked();
    if (consumers_.empty()) return false;
    std::vector<std::shared_ptr<Consumer>> order;
    for (auto& [id, cc] : consumers_) order.push_back(cc);
    for (std::size_t i = 0; i < order.size() && !m; ++i) {
      auto& cand = order[(rr_ + i) % order.size()];
      m = take_locked(*cand);
      if (m) {
        c = cand;
        rr_ = (rr_ + i + 1) % order.size();
      }
    }
  }
  if (!m) return false;
  run_handler(*c, *m);
  return true;
}

bool Broker::pump_consumer(const std::string& consumer_id) {
  std::shared_ptr<Consumer> c;
  std::optional<Message> m;
  {
    std::lock_guard lock(mu_);
    check_alive_locked();
    auto it = consumers_.find(consumer_id);
    if (it == consumers_.end()) fail(ErrorCode::NotFound, "unknown consumer " + consumer_id);
    c = it->second;
    m = take_locked(*c);
  }
  if (!m) return false;
  run_handler(*c, *m);
  return true;
}

std::size_t Broker::run_until_idle(std::size_t max_steps) {
  std::size_t n = 0;
  while (n < max_steps && pump()) ++n;
  return n;
}

// ---------------------------------------------------------------------------
// Introspection and crash simulation

QueueStats Broker::stats(const std::string& queue) const {
  std::lock_guard lock(mu_);
  const Queue& q = queue_locked(queue);
  QueueStats s = q.st;
  s.ready = q.ready.size();
  s.consumers = static_cast<std::uint64_t>(std::count_if(
      consumers_.begin(), consumers_.end(), [&](auto& kv) { return kv.second->queue == queue; }));
  return s;
}

std::vector<Message> Broker::peek(const std::string& queue) const {
  std::lock_guard lock(mu_);
  const Queue& q = queue_locked(queue);
  return {q.ready.begin(), q.ready.end()};
}

std::vector<Message> Broker::unacked(const std::string& queue) const {
  std::lock_guard lock(mu_);
  std::vector<Message> out;
  for (const auto& [id, f] : inflight_)
    if (f.msg.queue == queue) out.push_back(f.msg);
  std::sort(out.begin(), out.end(), [](auto& a, auto& b) { return a.seq < b.seq; });
  return out;
}

std::size_t Broker::depth(const std::string& queue) const {
  std::lock_guard lock(mu_);
  return queue_locked(queue).ready.size();
}

void Broker::kill() {
  std::lock_guard lock(mu_);
  killed_ = true;
  stopping_ = true;
  for (auto& [n, q] : queues_)
    if (q->log) q->log->close();
  cv_.notify_all();
}

bool Broker::killed() const {
  std::lock_guard lock(mu_);
  return killed_;
}

}  // namespace urgent::mq
