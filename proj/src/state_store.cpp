#include "urgent/state_store.hpp"

#include <sqlite3.h>

#include <cctype>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace urgent {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Status enums

const char* to_string(ActivityStatus s) {
  switch (s) {
    case ActivityStatus::PENDING: return "PENDING";
    case ActivityStatus::ACTIVE: return "ACTIVE";
    case ActivityStatus::COMPLETED: return "COMPLETED";
    case ActivityStatus::ERROR: return "ERROR";
    case ActivityStatus::CANCELLED: return "CANCELLED";
  }
  return "?";
}

const char* to_string(JobStatus s) {
  switch (s) {
    case JobStatus::PENDING_SUBMIT: return "PENDING_SUBMIT";
    case JobStatus::QUEUED: return "QUEUED";
    case JobStatus::RUNNING: return "RUNNING";
    case JobStatus::COMPLETED: return "COMPLETED";
    case JobStatus::ERROR: return "ERROR";
    case JobStatus::CANCELLED: return "CANCELLED";
  }
  return "?";
}

ActivityStatus parse_activity_status(std::string_view s) {
  for (auto v : {ActivityStatus::PENDING, ActivityStatus::ACTIVE, ActivityStatus::COMPLETED,
                 ActivityStatus::ERROR, ActivityStatus::CANCELLED})
    if (s == to_string(v)) return v;
  fail(ErrorCode::InvalidArgument, "unknown activity status " + std::string(s));
}

JobStatus parse_job_status(std::string_view s) {
  for (auto v : {JobStatus::PENDING_SUBMIT, JobStatus::QUEUED, JobStatus::RUNNING,
                 JobStatus::COMPLETED, JobStatus::ERROR, JobStatus::CANCELLED})
    if (s == to_string(v)) return v;
  fail(ErrorCode::InvalidArgument, "unknown job status " + std::string(s));
}

bool is_terminal(ActivityStatus s) {
  return s == ActivityStatus::COMPLETED || s == ActivityStatus::ERROR ||
         s == ActivityStatus::CANCELLED;
}

bool is_terminal(JobStatus s) {
  return s == JobStatus::COMPLETED || s == JobStatus::ERROR || s == JobStatus::CANCELLED;
}

bool legal_transition(ActivityStatus from, ActivityStatus to) {
  if (from == ActivityStatus::PENDING) return to == ActivityStatus::ACTIVE;
  if (from == ActivityStatus::ACTIVE) return is_terminal(to);
  return false;
}

bool legal_transition(JobStatus from, JobStatus to) {
  if (is_terminal(from)) return false;
  switch (to) {
    case JobStatus::QUEUED: return from == JobStatus::PENDING_SUBMIT;
    case JobStatus::RUNNING: return from == JobStatus::QUEUED;
    case JobStatus::COMPLETED: return from == JobStatus::RUNNING;
    case JobStatus::ERROR:
    case JobStatus::CANCELLED: return true;
    case JobStatus::PENDING_SUBMIT: return false;
  }
  return false;
}

bool JobRecord::operator==(const JobRecord& o) const {
  return job_id == o.job_id && activity_id == o.activity_id && machine_id == o.machine_id &&
         batch_id == o.batch_id && status == o.status && nodes == o.nodes &&
         walltime_req_s == o.walltime_req_s && submitted_at == o.submitted_at &&
         started_at == o.started_at && ended_at == o.ended_at &&
         result_handles == o.result_handles && link.stage == o.link.stage &&
         link.ensemble_index == o.link.ensemble_index && link.attempt == o.link.attempt &&
         handled == o.handled && seq == o.seq;
}

// ---------------------------------------------------------------------------
// objstore:// URIs

namespace {

constexpr std::string_view kScheme = "objstore://";

bool valid_store_name(std::string_view s) {
  if (s.empty()) return false;
  for (unsigned char c : s)
    if (!(std::isalnum(c) || c == '_' || c == '.' || c == '-')) return false;
  return true;
}

std::string percent_encode(std::string_view key) {
  static constexpr char kHex[] = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : key) {
    if (std::isalnum(c) || c == '-' || c == '.' || c == '_' || c == '~' || c == '/') {
      out += static_cast<char>(c);
    } else {
      out += '%';
      out += kHex[c >> 4];
      out += kHex[c & 0xf];
    }
  }
  return out;
}

std::string percent_decode(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '%') {
      out += s[i];
      continue;
    }
    if (i + 2 >= s.size() || !std::isxdigit(static_cast<unsigned char>(s[i + 1])) ||
        !std::isxdigit(static_cast<unsigned char>(s[i + 2])))
      fail(ErrorCode::InvalidArgument, "bad percent escape in object URI");
    out += static_cast<char>(std::stoi(std::string(s.substr(i + 1, 2)), nullptr, 16));
    i += 2;
  }
  return out;
}

}  // namespace

std::string make_object_uri(std::string_view store_name, std::string_view key) {
  return std::string(kScheme) + std::string(store_name) + "/" + percent_encode(key);
}

std::pair<std::string, std::string> parse_object_uri(std::string_view uri) {
  if (!starts_with(uri, kScheme)) fail(ErrorCode::InvalidArgument, "not an objstore URI");
  auto rest = uri.substr(kScheme.size());
  auto slash = rest.find('/');
  if (slash == std::string_view::npos || slash == 0 || slash + 1 == rest.size())
    fail(ErrorCode::InvalidArgument, "objstore URI needs <store>/<key>");
  std::string store(rest.substr(0, slash));
  if (!valid_store_name(store)) fail(ErrorCode::InvalidArgument, "bad store name in URI");
  return {store, percent_decode(rest.substr(slash + 1))};
}

// ---------------------------------------------------------------------------
// SQLite plumbing

class Stmt {
 public:
  Stmt(sqlite3* db, std::string_view sql) : db_(db) {
    if (sqlite3_prepare_v2(db, sql.data(), static_cast<int>(sql.size()), &s_, nullptr) != SQLITE_OK)
      fail(ErrorCode::Internal, std::string("sqlite prepare: ") + sqlite3_errmsg(db));
  }
  ~Stmt() { sqlite3_finalize(s_); }
  Stmt(const Stmt&) = delete;
  Stmt& operator=(const Stmt&) = delete;

  Stmt& bind(int i, std::int64_t v) { check(sqlite3_bind_int64(s_, i, v)); return *this; }
  Stmt& bind(int i, int v) { return bind(i, static_cast<std::int64_t>(v)); }
  Stmt& bind(int i, double v) { check(sqlite3_bind_double(s_, i, v)); return *this; }
  Stmt& bind(int i, std::string_view v) {
    check(sqlite3_bind_text(s_, i, v.data(), static_cast<int>(v.size()), SQLITE_TRANSIENT));
    return *this;
  }
  Stmt& bind(int i, const std::string& v) { return bind(i, std::string_view(v)); }
  Stmt& bind(int i, const char* v) { return bind(i, std::string_view(v)); }
  Stmt& bind(int i, const std::optional<std::int64_t>& v) {
    if (v) return bind(i, *v);
    check(sqlite3_bind_null(s_, i));
    return *this;
  }

  bool step() {
    int rc = sqlite3_step(s_);
    if (rc == SQLITE_ROW) return true;
    if (rc == SQLITE_DONE) return false;
    if (rc == SQLITE_CONSTRAINT)
      fail(ErrorCode::InvalidArgument, std::string("constraint violated: ") + sqlite3_errmsg(db_));
    fail(ErrorCode::Internal, std::string("sqlite step: ") + sqlite3_errmsg(db_));
  }
  void run() { while (step()) {} }

  std::string text(int i) const {
    auto p = reinterpret_cast<const char*>(sqlite3_column_text(s_, i));
    return p ? std::string(p, static_cast<std::size_t>(sqlite3_column_bytes(s_, i))) : std::string();
  }
  std::int64_t i64(int i) const { return sqlite3_column_int64(s_, i); }
  double real(int i) const { return sqlite3_column_double(s_, i); }
  bool null(int i) const { return sqlite3_column_type(s_, i) == SQLITE_NULL; }
  std::optional<std::int64_t> opt_i64(int i) const {
    return null(i) ? std::nullopt : std::optional(i64(i));
  }

 private:
  void check(int rc) {
    if (rc != SQLITE_OK) fail(ErrorCode::Internal, std::string("sqlite bind: ") + sqlite3_errmsg(db_));
  }
  sqlite3* db_;
  sqlite3_stmt* s_ = nullptr;
};

class StateStore::Db {
 public:
  explicit Db(const fs::path& file, bool sync_full) {
    if (sqlite3_open(file.c_str(), &h) != SQLITE_OK) {
      std::string msg = sqlite3_errmsg(h);
      sqlite3_close(h);
      fail(ErrorCode::Internal, "cannot open store: " + msg);
    }
    sqlite3_busy_timeout(h, 5000);
    exec("PRAGMA journal_mode=WAL");
    exec(sync_full ? "PRAGMA synchronous=FULL" : "PRAGMA synchronous=NORMAL");
    exec("PRAGMA foreign_keys=ON");
  }
  ~Db() { sqlite3_close(h); }

  void exec(const std::string& sql) {
    char* err = nullptr;
    if (sqlite3_exec(h, sql.c_str(), nullptr, nullptr, &err) != SQLITE_OK) {
      std::string msg = err ? err : "?";
      sqlite3_free(err);
      fail(ErrorCode::Internal, "sqlite: " + msg);
    }
  }

  Stmt prepare(std::string_view sql) { return Stmt(h, sql); }

  sqlite3* h = nullptr;
};

namespace {

constexpr const char* kSchema = R"sql(
CREATE TABLE IF NOT EXISTS workflows(
  workflow_id TEXT PRIMARY KEY, definition TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS activities(
  seq INTEGER PRIMARY KEY AUTOINCREMENT,
  activity_id TEXT UNIQUE NOT NULL, kind TEXT NOT NULL, status TEXT NOT NULL,
  workflow_id TEXT NOT NULL REFERENCES workflows(workflow_id),
  created_at INTEGER NOT NULL, updated_at INTEGER NOT NULL, metadata TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS activity_transitions(
  id INTEGER PRIMARY KEY AUTOINCREMENT, activity_id TEXT NOT NULL,
  from_status TEXT NOT NULL, to_status TEXT NOT NULL, at INTEGER NOT NULL);
CREATE TABLE IF NOT EXISTS machines(
  machine_id TEXT PRIMARY KEY, name TEXT UNIQUE NOT NULL, scheduler TEXT NOT NULL,
  total_nodes INTEGER NOT NULL CHECK(total_nodes > 0),
  cores_per_node INTEGER NOT NULL CHECK(cores_per_node > 0),
  available INTEGER NOT NULL, reliability REAL NOT NULL CHECK(reliability BETWEEN 0 AND 1));
CREATE TABLE IF NOT EXISTS jobs(
  seq INTEGER PRIMARY KEY AUTOINCREMENT,
  job_id TEXT UNIQUE NOT NULL,
  activity_id TEXT NOT NULL REFERENCES activities(activity_id),
  machine_id TEXT REFERENCES machines(machine_id),
  batch_id TEXT NOT NULL DEFAULT '', status TEXT NOT NULL,
  nodes INTEGER NOT NULL CHECK(nodes > 0),
  walltime_req_s INTEGER NOT NULL CHECK(walltime_req_s > 0),
  submitted_at INTEGER, started_at INTEGER, ended_at INTEGER,
  result_handles TEXT NOT NULL DEFAULT '[]',
  stage TEXT NOT NULL DEFAULT '', ensemble_index INTEGER NOT NULL DEFAULT 0,
  attempt INTEGER NOT NULL DEFAULT 1, handled INTEGER NOT NULL DEFAULT 0);
CREATE INDEX IF NOT EXISTS jobs_by_activity ON jobs(activity_id);
CREATE INDEX IF NOT EXISTS jobs_by_machine ON jobs(machine_id);
CREATE TABLE IF NOT EXISTS job_transitions(
  id INTEGER PRIMARY KEY AUTOINCREMENT, job_id TEXT NOT NULL,
  from_status TEXT NOT NULL, to_status TEXT NOT NULL, at INTEGER NOT NULL);
CREATE TABLE IF NOT EXISTS objects(
  handle_id TEXT PRIMARY KEY, store_name TEXT NOT NULL, key TEXT NOT NULL,
  size_bytes INTEGER NOT NULL, sha256 TEXT NOT NULL, UNIQUE(store_name, key));
CREATE TABLE IF NOT EXISTS snapshots(
  id INTEGER PRIMARY KEY AUTOINCREMENT, machine_id TEXT NOT NULL,
  polled_at INTEGER NOT NULL, poll_ok INTEGER NOT NULL, fallback INTEGER NOT NULL,
  entries TEXT NOT NULL);
CREATE INDEX IF NOT EXISTS snapshots_by_machine ON snapshots(machine_id, id);
CREATE TABLE IF NOT EXISTS completions(
  id INTEGER PRIMARY KEY AUTOINCREMENT, machine_id TEXT NOT NULL, batch_id TEXT NOT NULL,
  ratio REAL NOT NULL, observed_at INTEGER NOT NULL);
CREATE INDEX IF NOT EXISTS completions_by_machine ON completions(machine_id, id);
CREATE TABLE IF NOT EXISTS barriers(
  activity_id TEXT NOT NULL, stage TEXT NOT NULL, state TEXT NOT NULL,
  PRIMARY KEY(activity_id, stage));
CREATE TABLE IF NOT EXISTS kv(key TEXT PRIMARY KEY, value TEXT NOT NULL);
)sql";

/// BEGIN IMMEDIATE ... COMMIT, rolled back on unwind.
class Tx {
 public:
  explicit Tx(sqlite3* db) : db_(db) { exec("BEGIN IMMEDIATE"); }
  ~Tx() {
    if (!done_) sqlite3_exec(db_, "ROLLBACK", nullptr, nullptr, nullptr);
  }
  void commit() {
    exec("COMMIT");
    done_ = true;
  }

 private:
  void exec(const char* sql) {
    if (sqlite3_exec(db_, sql, nullptr, nullptr, nullptr) != SQLITE_OK)
      fail(ErrorCode::Internal, std::string("sqlite: ") + sqlite3_errmsg(db_));
  }
  sqlite3* db_;
  bool done_ = false;
};

constexpr const char* kJobCols =
    "job_id, activity_id, machine_id, batch_id, status, nodes, walltime_req_s, submitted_at, "
    "started_at, ended_at, result_handles, stage, ensemble_index, attempt, handled, seq";

JobRecord read_job(const Stmt& s) {
  JobRecord j;
  j.job_id = s.text(0);
  j.activity_id = s.text(1);
  j.machine_id = s.text(2);
  j.batch_id = s.text(3);
  j.status = parse_job_status(s.text(4));
  j.nodes = s.i64(5);
  j.walltime_req_s = s.i64(6);
  j.submitted_at = s.opt_i64(7);
  j.started_at = s.opt_i64(8);
  j.ended_at = s.opt_i64(9);
  j.result_handles = json::parse(s.text(10)).get<std::vector<std::string>>();
  j.link.stage = s.text(11);
  j.link.ensemble_index = s.i64(12);
  j.link.attempt = static_cast<int>(s.i64(13));
  j.handled = s.i64(14) != 0;
  j.seq = s.i64(15);
  return j;
}

constexpr const char* kActivityCols =
    "activity_id, kind, status, workflow_id, created_at, updated_at, metadata";

ActivityRecord read_activity(const Stmt& s) {
  ActivityRecord a;
  a.activity_id = s.text(0);
  a.kind = s.text(1);
  a.status = parse_activity_status(s.text(2));
  a.workflow_id = s.text(3);
  a.created_at = s.i64(4);
  a.updated_at = s.i64(5);
  a.metadata = json::parse(s.text(6)).get<StringMap>();
  return a;
}

MachineRecord read_machine(const Stmt& s) {
  MachineRecord m;
  m.machine_id = s.text(0);
  m.name = s.text(1);
  m.scheduler = batch::parse_scheduler(s.text(2));
  m.total_nodes = s.i64(3);
  m.cores_per_node = s.i64(4);
  m.available = s.i64(5) != 0;
  m.reliability = s.real(6);
  return m;
}

json entries_to_json(const std::vector<batch::QueueEntry>& entries) {
  json arr = json::array();
  for (const auto& e : entries) {
    json o = {{"batch_id", e.batch_id}, {"name", e.name},  {"queue", e.queue},
              {"state", batch::to_string(e.state)},        {"nodes", e.nodes},
              {"walltime_req_s", e.walltime_req_s},        {"owner", e.owner}};
    if (e.elapsed_s) o["elapsed_s"] = *e.elapsed_s;
    arr.push_back(std::move(o));
  }
  return arr;
}

std::vector<batch::QueueEntry> entries_from_json(const json& arr) {
  std::vector<batch::QueueEntry> out;
  for (const auto& o : arr) {
    batch::QueueEntry e;
    e.batch_id = o.at("batch_id").get<std::string>();
    e.name = o.value("name", std::string());
    e.queue = o.at("queue").get<std::string>();
    e.state = batch::parse_queue_state(o.at("state").get<std::string>());
    e.nodes = o.at("nodes").get<std::int64_t>();
    e.walltime_req_s = o.at("walltime_req_s").get<std::int64_t>();
    e.owner = o.at("owner").get<std::string>();
    if (o.contains("elapsed_s")) e.elapsed_s = o["elapsed_s"].get<std::int64_t>();
    out.push_back(std::move(e));
  }
  return out;
}

QueueSnapshot read_snapshot(const Stmt& s) {
  QueueSnapshot q;
  q.machine_id = s.text(0);
  q.polled_at = s.i64(1);
  q.poll_ok = s.i64(2) != 0;
  q.elapsed_fallback_used = s.i64(3) != 0;
  q.entries = entries_from_json(json::parse(s.text(4)));
  return q;
}

}  // namespace

// ---------------------------------------------------------------------------

StateStore::StateStore(Options opts) : opts_(std::move(opts)) {
  clock_ = opts_.clock ? opts_.clock : &system_clock_;
  fs::create_directories(opts_.dir / "objects");
  db_ = std::make_unique<Db>(opts_.dir / "state.db", opts_.sync_full);
  db_->exec(kSchema);
}

StateStore::~StateStore() = default;

void StateStore::subscribe(Observer obs) {
  std::lock_guard lock(obs_mu_);
  observers_.push_back(std::move(obs));
}

void StateStore::notify(const std::vector<Transition>& ts) {
  // Caller holds obs_mu_ so that observers see commit order.
  for (const auto& t : ts)
    for (const auto& o : observers_) o(t);
}

// --- workflows --------------------------------------------------------------

void StateStore::put_workflow(const std::string& workflow_id, const std::string& definition) {
  std::lock_guard lock(mu_);
  db_->prepare("INSERT INTO workflows(workflow_id, definition) VALUES(?1, ?2) "
               "ON CONFLICT(workflow_id) DO UPDATE SET definition = excluded.definition")
      .bind(1, workflow_id).bind(2, definition).run();
}

std::optional<std::string> StateStore::get_workflow(const std::string& workflow_id) const {
  std::lock_guard lock(mu_);
  auto s = db_->prepare("SELECT definition FROM workflows WHERE workflow_id = ?1");
  s.bind(1, workflow_id);
  if (!s.step()) return std::nullopt;
  return s.text(0);
}

std::vector<std::pair<std::string, std::string>> StateStore::list_workflows() const {
  std::lock_guard lock(mu_);
  auto s = db_->prepare("SELECT workflow_id, definition FROM workflows ORDER BY workflow_id");
  std::vector<std::pair<std::string, std::string>> out;
  while (s.step()) out.emplace_back(s.text(0), s.text(1));
  return out;
}

// --- activities -------------------------------------------------------------

ActivityRecord StateStore::create_activity(const std::string& kind, const std::string& workflow_id,
                                           const StringMap& metadata) {
  std::unique_lock lock(mu_);
  {
    auto s = db_->prepare("SELECT 1 FROM workflows WHERE workflow_id = ?1");
    s.bind(1, workflow_id);
    if (!s.step()) fail(ErrorCode::NotFound, "unknown workflow " + workflow_id);
  }
  ActivityRecord a;
  a.activity_id = make_id("act");
  a.kind = kind;
  a.workflow_id = workflow_id;
  a.created_at = a.updated_at = clock_->now();
  a.metadata = metadata;
  Tx tx(db_->h);
  db_->prepare(std::string("INSERT INTO activities(") + kActivityCols +
               ") VALUES(?1, ?2, ?3, ?4, ?5, ?6, ?7)")
      .bind(1, a.activity_id).bind(2, a.kind).bind(3, to_string(a.status)).bind(4, a.workflow_id)
      .bind(5, a.created_at).bind(6, a.updated_at).bind(7, json(a.metadata).dump())
      .run();
  db_->prepare("INSERT INTO activity_transitions(activity_id, from_status, to_status, at) "
               "VALUES(?1, '', ?2, ?3)")
      .bind(1, a.activity_id).bind(2, to_string(a.status)).bind(3, a.created_at).run();
  tx.commit();
  std::lock_guard obs(obs_mu_);
  lock.unlock();
  notify({{Transition::Kind::ACTIVITY, a.activity_id, "", to_string(a.status), a.created_at,
           a.activity_id, "", ""}});
  return a;
}

ActivityRecord StateStore::get_activity(const std::string& activity_id) const {
  std::lock_guard lock(mu_);
  auto s = db_->prepare(std::string("SELECT ") + kActivityCols +
                        " FROM activities WHERE activity_id = ?1");
  s.bind(1, activity_id);
  if (!s.step()) fail(ErrorCode::NotFound, "unknown activity " + activity_id);
  return read_activity(s);
}

std::vector<ActivityRecord> StateStore::list_activities() const {
  std::lock_guard lock(mu_);
  auto s = db_->prepare(std::string("SELECT ") + kActivityCols + " FROM activities ORDER BY seq");
  std::vector<ActivityRecord> out;
  while (s.step()) out.push_back(read_activity(s));
  return out;
}

ActivityRecord StateStore::update_activity_status(const std::string& activity_id,
                                                  ActivityStatus to) {
  std::unique_lock lock(mu_);
  ActivityRecord a;
  {
    auto s = db_->prepare(std::string("SELECT ") + kActivityCols +
                          " FROM activities WHERE activity_id = ?1");
    s.bind(1, activity_id);
    if (!s.step()) fail(ErrorCode::NotFound, "unknown activity " + activity_id);
    a = read_activity(s);
  }
  if (!legal_transition(a.status, to))
    fail(ErrorCode::InvalidTransition, std::string("activity ") + to_string(a.status) + " -> " +
                                           to_string(to));
  const auto from = a.status;
  a.status = to;
  a.updated_at = clock_->now();
  Tx tx(db_->h);
  db_->prepare("UPDATE activities SET status = ?2, updated_at = ?3 WHERE activity_id = ?1")
      .bind(1, activity_id).bind(2, to_string(to)).bind(3, a.updated_at).run();
  db_->prepare("INSERT INTO activity_transitions(activity_id, from_status, to_status, at) "
               "VALUES(?1, ?2, ?3, ?4)")
      .bind(1, activity_id).bind(2, to_string(from)).bind(3, to_string(to)).bind(4, a.updated_at)
      .run();
  tx.commit();
  std::lock_guard obs(obs_mu_);
  lock.unlock();
  notify({{Transition::Kind::ACTIVITY, activity_id, to_string(from), to_string(to), a.updated_at,
           activity_id, "", ""}});
  return a;
}

// --- machines ---------------------------------------------------------------

MachineRecord StateStore::upsert_machine(MachineRecord m) {
  if (m.total_nodes < 1 || m.cores_per_node < 1)
    fail(ErrorCode::InvalidArgument, "machine sizes must be positive");
  if (!(m.reliability >= 0.0 && m.reliability <= 1.0))
    fail(ErrorCode::InvalidArgument, "reliability must lie in [0,1]");
  std::lock_guard lock(mu_);
  {
    auto s = db_->prepare("SELECT machine_id FROM machines WHERE name = ?1");
    s.bind(1, m.name);
    if (s.step()) m.machine_id = s.text(0);
    else if (m.machine_id.empty()) m.machine_id = make_id("mach");
  }
  db_->prepare("INSERT INTO machines(machine_id, name, scheduler, total_nodes, cores_per_node, "
               "available, reliability) VALUES(?1, ?2, ?3, ?4, ?5, ?6, ?7) "
               "ON CONFLICT(machine_id) DO UPDATE SET scheduler = excluded.scheduler, "
               "total_nodes = excluded.total_nodes, cores_per_node = excluded.cores_per_node")
      .bind(1, m.machine_id).bind(2, m.name).bind(3, batch::to_string(m.scheduler))
      .bind(4, m.total_nodes).bind(5, m.cores_per_node).bind(6, m.available ? 1 : 0)
      .bind(7, m.reliability).run();
  auto s = db_->prepare("SELECT machine_id, name, scheduler, total_nodes, cores_per_node, "
                        "available, reliability FROM machines WHERE machine_id = ?1");
  s.bind(1, m.machine_id);
  s.step();
  return read_machine(s);
}

MachineRecord StateStore::get_machine(const std::string& machine_id) const {
  std::lock_guard lock(mu_);
  auto s = db_->prepare("SELECT machine_id, name, scheduler, total_nodes, cores_per_node, "
                        "available, reliability FROM machines WHERE machine_id = ?1");
  s.bind(1, machine_id);
  if (!s.step()) fail(ErrorCode::NotFound, "unknown machine " + machine_id);
  return read_machine(s);
}

std::optional<MachineRecord> StateStore::find_machine_by_name(std::string_view name) const {
  std::lock_guard lock(mu_);
  auto s = db_->prepare("SELECT machine_id, name, scheduler, total_nodes, cores_per_node, "
                        "available, reliability FROM machines WHERE name = ?1");
  s.bind(1, name);
  if (!s.step()) return std::nullopt;
  return read_machine(s);
}

std::vector<MachineRecord> StateStore::list_machines() const {
  std::lock_guard lock(mu_);
  auto s = db_->prepare("SELECT machine_id, name, scheduler, total_nodes, cores_per_node, "
                        "available, reliability FROM machines ORDER BY name");
  std::vector<MachineRecord> out;
  while (s.step()) out.push_back(read_machine(s));
  return out;
}

void StateStore::set_machine_health(const std::string& machine_id, bool available,
                                    double reliability) {
  if (!(reliability >= 0.0 && reliability <= 1.0))
    fail(ErrorCode::InvalidArgument, "reliability must lie in [0,1]");
  std::lock_guard lock(mu_);
  db_->prepare("UPDATE machines SET available = ?2, reliability = ?3 WHERE machine_id = ?1")
      .bind(1, machine_id).bind(2, available ? 1 : 0).bind(3, reliability).run();
  if (sqlite3_changes(db_->h) == 0) fail(ErrorCode::NotFound, "unknown machine " + machine_id);
}

// --- jobs -------------------------------------------------------------------

JobRecord StateStore::create_job(const std::string& activity_id, const std::string& machine_id,
                                 std::int64_t nodes, std::int64_t walltime_req_s, JobLink link) {
  if (nodes < 1) fail(ErrorCode::InvalidArgument, "nodes must be >= 1");
  if (walltime_req_s < 1) fail(ErrorCode::InvalidArgument, "walltime_req_s must be >= 1");
  std::unique_lock lock(mu_);
  {
    auto s = db_->prepare("SELECT status FROM activities WHERE activity_id = ?1");
    s.bind(1, activity_id);
    if (!s.step()) fail(ErrorCode::NotFound, "unknown activity " + activity_id);
    if (is_terminal(parse_activity_status(s.text(0))))
      fail(ErrorCode::InvalidState, "activity " + activity_id + " is terminal");
  }
  if (!machine_id.empty()) {
    auto s = db_->prepare("SELECT 1 FROM machines WHERE machine_id = ?1");
    s.bind(1, machine_id);
    if (!s.step()) fail(ErrorCode::NotFound, "unknown machine " + machine_id);
  }
  JobRecord j;
  j.job_id = make_id("job");
  j.activity_id = activity_id;
  j.machine_id = machine_id;
  j.nodes = nodes;
  j.walltime_req_s = walltime_req_s;
  j.link = std::move(link);
  const Timestamp now = clock_->now();
  Tx tx(db_->h);
  auto ins = db_->prepare(
      "INSERT INTO jobs(job_id, activity_id, machine_id, status, nodes, walltime_req_s, stage, "
      "ensemble_index, attempt) VALUES(?1, ?2, NULLIF(?3, ''), ?4, ?5, ?6, ?7, ?8, ?9)");
  ins.bind(1, j.job_id).bind(2, activity_id).bind(3, machine_id).bind(4, to_string(j.status))
      .bind(5, nodes).bind(6, walltime_req_s).bind(7, j.link.stage).bind(8, j.link.ensemble_index)
      .bind(9, j.link.attempt).run();
  j.seq = sqlite3_last_insert_rowid(db_->h);
  db_->prepare("INSERT INTO job_transitions(job_id, from_status, to_status, at) "
               "VALUES(?1, '', ?2, ?3)")
      .bind(1, j.job_id).bind(2, to_string(j.status)).bind(3, now).run();
  db_->prepare("UPDATE activities SET updated_at = ?2 WHERE activity_id = ?1")
      .bind(1, activity_id).bind(2, now).run();
  tx.commit();
  std::lock_guard obs(obs_mu_);
  lock.unlock();
  notify({{Transition::Kind::JOB, j.job_id, "", to_string(j.status), now, activity_id, machine_id,
           ""}});
  return j;
}

JobRecord StateStore::get_job(const std::string& job_id) const {
  std::lock_guard lock(mu_);
  auto s = db_->prepare(std::string("SELECT ") + kJobCols + " FROM jobs WHERE job_id = ?1");
  s.bind(1, job_id);
  if (!s.step()) fail(ErrorCode::NotFound, "unknown job " + job_id);
  return read_job(s);
}

std::vector<JobRecord> StateStore::query_jobs(const JobQuery& q) const {
  std::lock_guard lock(mu_);
  std::string sql = std::string("SELECT ") + kJobCols + " FROM jobs WHERE 1=1";
  if (q.activity_id) sql += " AND activity_id = ?1";
  if (q.machine_id) sql += " AND machine_id = ?2";
  if (q.status) sql += " AND status = ?3";
  sql += " ORDER BY seq";
  auto s = db_->prepare(sql);
  if (q.activity_id) s.bind(1, *q.activity_id);
  if (q.machine_id) s.bind(2, *q.machine_id);
  if (q.status) s.bind(3, to_string(*q.status));
  std::vector<JobRecord> out;
  while (s.step()) out.push_back(read_job(s));
  return out;
}

std::optional<JobRecord> StateStore::find_job(const std::string& activity_id,
                                              const JobLink& link) const {
  std::lock_guard lock(mu_);
  auto s = db_->prepare(std::string("SELECT ") + kJobCols +
                        " FROM jobs WHERE activity_id = ?1 AND stage = ?2 AND ensemble_index = ?3"
                        " AND attempt = ?4");
  s.bind(1, activity_id).bind(2, link.stage).bind(3, link.ensemble_index).bind(4, link.attempt);
  if (!s.step()) return std::nullopt;
  return read_job(s);
}

JobRecord StateStore::update_job_status(const std::string& job_id, JobStatus to, JobTimes times) {
  std::unique_lock lock(mu_);
  JobRecord j;
  {
    auto s = db_->prepare(std::string("SELECT ") + kJobCols + " FROM jobs WHERE job_id = ?1");
    s.bind(1, job_id);
    if (!s.step()) fail(ErrorCode::NotFound, "unknown job " + job_id);
    j = read_job(s);
  }
  if (!legal_transition(j.status, to))
    fail(ErrorCode::InvalidTransition,
         "job " + job_id + ": " + to_string(j.status) + " -> " + to_string(to));
  const auto from = j.status;
  const Timestamp now = clock_->now();
  j.status = to;
  if (to == JobStatus::RUNNING) j.started_at = times.started_at.value_or(now);
  if (is_terminal(to)) {
    j.ended_at = times.ended_at.value_or(now);
    if (j.started_at && *j.ended_at < *j.started_at) j.ended_at = j.started_at;
  }
  Tx tx(db_->h);
  db_->prepare("UPDATE jobs SET status = ?2, started_at = ?3, ended_at = ?4 WHERE job_id = ?1")
      .bind(1, job_id).bind(2, to_string(to)).bind(3, j.started_at).bind(4, j.ended_at).run();
  db_->prepare("INSERT INTO job_transitions(job_id, from_status, to_status, at) "
               "VALUES(?1, ?2, ?3, ?4)")
      .bind(1, job_id).bind(2, to_string(from)).bind(3, to_string(to)).bind(4, now).run();
  db_->prepare("UPDATE activities SET updated_at = ?2 WHERE activity_id = ?1")
      .bind(1, j.activity_id).bind(2, now).run();
  tx.commit();
  std::lock_guard obs(obs_mu_);
  lock.unlock();
  notify({{Transition::Kind::JOB, job_id, to_string(from), to_string(to), now, j.activity_id,
           j.machine_id, j.batch_id}});
  return j;
}

JobRecord StateStore::place_job(const std::string& job_id, const std::string& machine_id) {
  std::lock_guard lock(mu_);
  {
    auto s = db_->prepare("SELECT 1 FROM machines WHERE machine_id = ?1");
    s.bind(1, machine_id);
    if (!s.step()) fail(ErrorCode::NotFound, "unknown machine " + machine_id);
  }
  auto s = db_->prepare(std::string("SELECT ") + kJobCols + " FROM jobs WHERE job_id = ?1");
  s.bind(1, job_id);
  if (!s.step()) fail(ErrorCode::NotFound, "unknown job " + job_id);
  JobRecord j = read_job(s);
  if (j.status != JobStatus::PENDING_SUBMIT)
    fail(ErrorCode::InvalidState, "only PENDING_SUBMIT jobs can be re-placed");
  db_->prepare("UPDATE jobs SET machine_id = ?2 WHERE job_id = ?1")
      .bind(1, job_id).bind(2, machine_id).run();
  j.machine_id = machine_id;
  return j;
}

JobRecord StateStore::record_submission(const std::string& job_id, const std::string& batch_id) {
  std::unique_lock lock(mu_);
  JobRecord j;
  {
    auto s = db_->prepare(std::string("SELECT ") + kJobCols + " FROM jobs WHERE job_id = ?1");
    s.bind(1, job_id);
    if (!s.step()) fail(ErrorCode::NotFound, "unknown job " + job_id);
    j = read_job(s);
  }
  if (j.status != JobStatus::PENDING_SUBMIT)
    fail(ErrorCode::InvalidTransition, "job " + job_id + " is not PENDING_SUBMIT");
  const Timestamp now = clock_->now();
  j.batch_id = batch_id;
  j.status = JobStatus::QUEUED;
  j.submitted_at = now;
  Tx tx(db_->h);
  db_->prepare("UPDATE jobs SET batch_id = ?2, status = ?3, submitted_at = ?4 WHERE job_id = ?1")
      .bind(1, job_id).bind(2, batch_id).bind(3, to_string(j.status)).bind(4, now).run();
  db_->prepare("INSERT INTO job_transitions(job_id, from_status, to_status, at) "
               "VALUES(?1, ?2, ?3, ?4)")
      .bind(1, job_id).bind(2, to_string(JobStatus::PENDING_SUBMIT)).bind(3, to_string(j.status))
      .bind(4, now).run();
  db_->prepare("UPDATE activities SET updated_at = ?2 WHERE activity_id = ?1")
      .bind(1, j.activity_id).bind(2, now).run();
  tx.commit();
  std::lock_guard obs(obs_mu_);
  lock.unlock();
  notify({{Transition::Kind::JOB, job_id, to_string(JobStatus::PENDING_SUBMIT),
           to_string(j.status), now, j.activity_id, j.machine_id, batch_id}});
  return j;
}

JobRecord StateStore::set_job_results(const std::string& job_id,
                                      const std::vector<std::string>& handle_ids) {
  std::lock_guard lock(mu_);
  db_->prepare("UPDATE jobs SET result_handles = ?2 WHERE job_id = ?1")
      .bind(1, job_id).bind(2, json(handle_ids).dump()).run();
  if (sqlite3_changes(db_->h) == 0) fail(ErrorCode::NotFound, "unknown job " + job_id);
  auto s = db_->prepare(std::string("SELECT ") + kJobCols + " FROM jobs WHERE job_id = ?1");
  s.bind(1, job_id);
  s.step();
  return read_job(s);
}

void StateStore::set_job_handled(const std::string& job_id, bool handled) {
  std::lock_guard lock(mu_);
  db_->prepare("UPDATE jobs SET handled = ?2 WHERE job_id = ?1")
      .bind(1, job_id).bind(2, handled ? 1 : 0).run();
  if (sqlite3_changes(db_->h) == 0) fail(ErrorCode::NotFound, "unknown job " + job_id);
}

std::vector<Transition> StateStore::job_transitions(const std::string& job_id) const {
  std::lock_guard lock(mu_);
  auto s = db_->prepare(job_id.empty()
                            ? "SELECT job_id, from_status, to_status, at FROM job_transitions ORDER BY id"
                            : "SELECT job_id, from_status, to_status, at FROM job_transitions "
                              "WHERE job_id = ?1 ORDER BY id");
  if (!job_id.empty()) s.bind(1, job_id);
  std::vector<Transition> out;
  while (s.step())
    out.push_back({Transition::Kind::JOB, s.text(0), s.text(1), s.text(2), s.i64(3), "", "", ""});
  return out;
}

std::vector<Transition> StateStore::activity_transitions(const std::string& activity_id) const {
  std::lock_guard lock(mu_);
  auto s = db_->prepare(activity_id.empty()
                            ? "SELECT activity_id, from_status, to_status, at FROM "
                              "activity_transitions ORDER BY id"
                            : "SELECT activity_id, from_status, to_status, at FROM "
                              "activity_transitions WHERE activity_id = ?1 ORDER BY id");
  if (!activity_id.empty()) s.bind(1, activity_id);
  std::vector<Transition> out;
  while (s.step())
    out.push_back(
        {Transition::Kind::ACTIVITY, s.text(0), s.text(1), s.text(2), s.i64(3), s.text(0), "", ""});
  return out;
}

// --- objects ----------------------------------------------------------------

ObjectHandle StateStore::put_object(const std::string& store_name, const std::string& key,
                                    std::string_view bytes) {
  if (key.empty()) fail(ErrorCode::InvalidArgument, "object key must be non-empty");
  if (!valid_store_name(store_name)) fail(ErrorCode::InvalidArgument, "bad store name " + store_name);
  ObjectHandle h;
  h.store_name = store_name;
  h.key = key;
  h.uri = make_object_uri(store_name, key);
  h.size_bytes = static_cast<std::int64_t>(bytes.size());
  h.sha256 = sha256_hex(bytes);

  const fs::path dir = opts_.dir / "objects" / store_name;
  fs::create_directories(dir);
  const fs::path file = dir / sha256_hex(key);
  const fs::path tmp = dir / (make_id("tmp"));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::Internal, "cannot write object payload");
  }
  std::lock_guard lock(mu_);
  fs::rename(tmp, file);
  {
    auto s = db_->prepare("SELECT handle_id FROM objects WHERE store_name = ?1 AND key = ?2");
    s.bind(1, store_name).bind(2, key);
    h.handle_id = s.step() ? s.text(0) : make_id("obj");
  }
  db_->prepare("INSERT INTO objects(handle_id, store_name, key, size_bytes, sha256) "
               "VALUES(?1, ?2, ?3, ?4, ?5) ON CONFLICT(handle_id) DO UPDATE SET "
               "size_bytes = excluded.size_bytes, sha256 = excluded.sha256")
      .bind(1, h.handle_id).bind(2, store_name).bind(3, key).bind(4, h.size_bytes)
      .bind(5, h.sha256).run();
  return h;
}

ObjectHandle StateStore::handle_locked(const std::string& handle_or_uri) const {
  std::optional<Stmt> s;
  if (starts_with(handle_or_uri, kScheme)) {
    std::pair<std::string, std::string> parts;
    try {
      parts = parse_object_uri(handle_or_uri);
    } catch (const Error&) {
      fail(ErrorCode::NotFound, "unknown object " + handle_or_uri);
    }
    s.emplace(db_->h, "SELECT handle_id, store_name, key, size_bytes, sha256 FROM objects "
                      "WHERE store_name = ?1 AND key = ?2");
    s->bind(1, parts.first).bind(2, parts.second);
  } else {
    s.emplace(db_->h, "SELECT handle_id, store_name, key, size_bytes, sha256 FROM objects "
                      "WHERE handle_id = ?1");
    s->bind(1, handle_or_uri);
  }
  if (!s->step()) fail(ErrorCode::NotFound, "unknown object " + handle_or_uri);
  ObjectHandle h;
  h.handle_id = s->text(0);
  h.store_name = s->text(1);
  h.key = s->text(2);
  h.size_bytes = s->i64(3);
  h.sha256 = s->text(4);
  h.uri = make_object_uri(h.store_name, h.key);
  return h;
}

ObjectHandle StateStore::get_handle(const std::string& handle_or_uri) const {
  std::lock_guard lock(mu_);
  return handle_locked(handle_or_uri);
}

std::string StateStore::get_object(const std::string& handle_or_uri) const {
  std::lock_guard lock(mu_);
  ObjectHandle h = handle_locked(handle_or_uri);
  std::ifstream in(opts_.dir / "objects" / h.store_name / sha256_hex(h.key), std::ios::binary);
  if (!in) fail(ErrorCode::NotFound, "object payload missing for " + h.uri);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// --- queue history ----------------------------------------------------------

void StateStore::add_snapshot(const QueueSnapshot& q) {
  std::lock_guard lock(mu_);
  db_->prepare("INSERT INTO snapshots(machine_id, polled_at, poll_ok, fallback, entries) "
               "VALUES(?1, ?2, ?3, ?4, ?5)")
      .bind(1, q.machine_id).bind(2, q.polled_at).bind(3, q.poll_ok ? 1 : 0)
      .bind(4, q.elapsed_fallback_used ? 1 : 0).bind(5, entries_to_json(q.entries).dump()).run();
}

std::optional<QueueSnapshot> StateStore::latest_snapshot(const std::string& machine_id,
                                                         bool ok_only) const {
  std::lock_guard lock(mu_);
  auto s = db_->prepare(std::string("SELECT machine_id, polled_at, poll_ok, fallback, entries "
                                    "FROM snapshots WHERE machine_id = ?1") +
                        (ok_only ? " AND poll_ok = 1" : "") + " ORDER BY id DESC LIMIT 1");
  s.bind(1, machine_id);
  if (!s.step()) return std::nullopt;
  return read_snapshot(s);
}

std::vector<QueueSnapshot> StateStore::recent_snapshots(const std::string& machine_id,
                                                        std::size_t limit) const {
  std::lock_guard lock(mu_);
  auto s = db_->prepare("SELECT machine_id, polled_at, poll_ok, fallback, entries FROM snapshots "
                        "WHERE machine_id = ?1 ORDER BY id DESC LIMIT ?2");
  s.bind(1, machine_id).bind(2, static_cast<std::int64_t>(limit));
  std::vector<QueueSnapshot> out;
  while (s.step()) out.push_back(read_snapshot(s));
  std::reverse(out.begin(), out.end());
  return out;
}

void StateStore::add_completions(const std::vector<CompletionSample>& samples) {
  if (samples.empty()) return;
  std::lock_guard lock(mu_);
  Tx tx(db_->h);
  for (const auto& c : samples)
    db_->prepare("INSERT INTO completions(machine_id, batch_id, ratio, observed_at) "
                 "VALUES(?1, ?2, ?3, ?4)")
        .bind(1, c.machine_id).bind(2, c.batch_id).bind(3, c.ratio).bind(4, c.observed_at).run();
  tx.commit();
}

std::vector<double> StateStore::recent_ratios(const std::string& machine_id,
                                              std::size_t limit) const {
  std::lock_guard lock(mu_);
  auto s = db_->prepare("SELECT ratio FROM completions WHERE machine_id = ?1 "
                        "ORDER BY id DESC LIMIT ?2");
  s.bind(1, machine_id).bind(2, static_cast<std::int64_t>(limit));
  std::vector<double> out;
  while (s.step()) out.push_back(s.real(0));
  return out;
}

// --- barriers and kv --------------------------------------------------------

std::optional<std::string> StateStore::get_barrier(const std::string& activity_id,
                                                   const std::string& stage) const {
  std::lock_guard lock(mu_);
  auto s = db_->prepare("SELECT state FROM barriers WHERE activity_id = ?1 AND stage = ?2");
  s.bind(1, activity_id).bind(2, stage);
  if (!s.step()) return std::nullopt;
  return s.text(0);
}

void StateStore::put_barrier(const std::string& activity_id, const std::string& stage,
                             const std::string& state_json) {
  std::lock_guard lock(mu_);
  db_->prepare("INSERT INTO barriers(activity_id, stage, state) VALUES(?1, ?2, ?3) "
               "ON CONFLICT(activity_id, stage) DO UPDATE SET state = excluded.state")
      .bind(1, activity_id).bind(2, stage).bind(3, state_json).run();
}

std::vector<std::pair<std::string, std::string>> StateStore::barriers(
    const std::string& activity_id) const {
  std::lock_guard lock(mu_);
  auto s = db_->prepare("SELECT stage, state FROM barriers WHERE activity_id = ?1 ORDER BY stage");
  s.bind(1, activity_id);
  std::vector<std::pair<std::string, std::string>> out;
  while (s.step()) out.emplace_back(s.text(0), s.text(1));
  return out;
}

std::optional<std::string> StateStore::get_kv(const std::string& key) const {
  std::lock_guard lock(mu_);
  auto s = db_->prepare("SELECT value FROM kv WHERE key = ?1");
  s.bind(1, key);
  if (!s.step()) return std::nullopt;
  return s.text(0);
}

void StateStore::put_kv(const std::string& key, const std::string& value) {
  std::lock_guard lock(mu_);
  db_->prepare("INSERT INTO kv(key, value) VALUES(?1, ?2) "
               "ON CONFLICT(key) DO UPDATE SET value = excluded.value")
      .bind(1, key).bind(2, value).run();
}

}  // namespace urgent
