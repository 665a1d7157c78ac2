#pragma once

// System of record: activities, jobs, machines, queue history, workflow
// definitions, join-barrier state and object handles. Relational data lives in
// one embedded SQLite database (WAL journal); object payloads live beside it as
// files addressed by `objstore://<store>/<key>` handles.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "urgent/batch.hpp"
#include "urgent/common.hpp"

struct sqlite3;

namespace urgent {

enum class ActivityStatus { PENDING, ACTIVE, COMPLETED, ERROR, CANCELLED };
enum class JobStatus { PENDING_SUBMIT, QUEUED, RUNNING, COMPLETED, ERROR, CANCELLED };

const char* to_string(ActivityStatus s);
const char* to_string(JobStatus s);
ActivityStatus parse_activity_status(std::string_view s);
JobStatus parse_job_status(std::string_view s);
bool is_terminal(ActivityStatus s);
bool is_terminal(JobStatus s);
bool legal_transition(ActivityStatus from, ActivityStatus to);
bool legal_transition(JobStatus from, JobStatus to);

struct ActivityRecord {
  std::string activity_id;
  std::string kind;
  ActivityStatus status = ActivityStatus::PENDING;
  std::string workflow_id;
  Timestamp created_at = 0;
  Timestamp updated_at = 0;
  StringMap metadata;

  bool operator==(const ActivityRecord&) const = default;
};

/// Where a job sits inside its activity's workflow.
struct JobLink {
  std::string stage;
  std::int64_t ensemble_index = 0;
  int attempt = 1;
};

struct JobRecord {
  std::string job_id;
  std::string activity_id;
  std::string machine_id;  // empty until placed
  std::string batch_id;    // empty until submitted
  JobStatus status = JobStatus::PENDING_SUBMIT;
  std::int64_t nodes = 1;
  std::int64_t walltime_req_s = 1;
  std::optional<Timestamp> submitted_at;
  std::optional<Timestamp> started_at;
  std::optional<Timestamp> ended_at;
  std::vector<std::string> result_handles;  // handle ids
  JobLink link;
  bool handled = false;  // terminal event consumed by the workflow engine
  std::int64_t seq = 0;  // creation order

  bool operator==(const JobRecord& o) const;
};

struct MachineRecord {
  std::string machine_id;
  std::string name;
  batch::Scheduler scheduler = batch::Scheduler::PBS;
  std::int64_t total_nodes = 1;
  std::int64_t cores_per_node = 1;
  bool available = true;
  double reliability = 1.0;

  bool operator==(const MachineRecord&) const = default;
};

struct ObjectHandle {
  std::string handle_id;
  std::string store_name;
  std::string key;
  std::string uri;
  std::int64_t size_bytes = 0;
  std::string sha256;

  bool operator==(const ObjectHandle&) const = default;
};

std::string make_object_uri(std::string_view store_name, std::string_view key);
/// Splits an objstore:// URI into (store_name, key); InvalidArgument otherwise.
std::pair<std::string, std::string> parse_object_uri(std::string_view uri);

/// One timestamped parse of a machine's whole queue.
struct QueueSnapshot {
  std::string machine_id;
  Timestamp polled_at = 0;
  std::vector<batch::QueueEntry> entries;
  bool poll_ok = true;
  bool elapsed_fallback_used = false;
};

/// A job inferred to have finished between two snapshots.
struct CompletionSample {
  std::string machine_id;
  std::string batch_id;
  double ratio = 1.0;  // observed runtime / requested walltime
  Timestamp observed_at = 0;
};

struct Transition {
  enum class Kind { ACTIVITY, JOB };
  Kind kind = Kind::JOB;
  std::string id;
  std::string from;  // empty for creation
  std::string to;
  Timestamp at = 0;
  std::string activity_id;
  std::string machine_id;
  std::string batch_id;
};

struct JobTimes {
  std::optional<Timestamp> started_at;
  std::optional<Timestamp> ended_at;
};

struct JobQuery {
  std::optional<std::string> activity_id;
  std::optional<std::string> machine_id;
  std::optional<JobStatus> status;
};

class StateStore {
 public:
  struct Options {
    std::filesystem::path dir;
    const Clock* clock = nullptr;  // SystemClock when null
    bool sync_full = false;        // fsync every commit (power-loss durability)
  };

  explicit StateStore(Options opts);
  ~StateStore();
  StateStore(const StateStore&) = delete;
  StateStore& operator=(const StateStore&) = delete;

  const Clock& clock() const { return *clock_; }

  // Called synchronously (outside the store lock) after each committed
  // status transition, including creations.
  using Observer = std::function<void(const Transition&)>;
  void subscribe(Observer obs);

  // --- workflows
  void put_workflow(const std::string& workflow_id, const std::string& definition_json);
  std::optional<std::string> get_workflow(const std::string& workflow_id) const;
  std::vector<std::pair<std::string, std::string>> list_workflows() const;

  // --- activities
  ActivityRecord create_activity(const std::string& kind, const std::string& workflow_id,
                                 const StringMap& metadata);
  ActivityRecord get_activity(const std::string& activity_id) const;
  std::vector<ActivityRecord> list_activities() const;
  ActivityRecord update_activity_status(const std::string& activity_id, ActivityStatus to);

  // --- machines
  /// Inserts or updates by name; machine_id stays stable across updates.
  MachineRecord upsert_machine(MachineRecord m);
  MachineRecord get_machine(const std::string& machine_id) const;
  std::optional<MachineRecord> find_machine_by_name(std::string_view name) const;
  std::vector<MachineRecord> list_machines() const;
  void set_machine_health(const std::string& machine_id, bool available, double reliability);

  // --- jobs
  JobRecord create_job(const std::string& activity_id, const std::string& machine_id,
                       std::int64_t nodes, std::int64_t walltime_req_s, JobLink link = {});
  JobRecord get_job(const std::string& job_id) const;
  std::vector<JobRecord> query_jobs(const JobQuery& q = {}) const;
  std::optional<JobRecord> find_job(const std::string& activity_id, const JobLink& link) const;
  JobRecord update_job_status(const std::string& job_id, JobStatus to, JobTimes times = {});
  /// Re-targets an unsubmitted job at another machine.
  JobRecord place_job(const std::string& job_id, const std::string& machine_id);
  /// Atomically stores the scheduler id and moves PENDING_SUBMIT -> QUEUED.
  JobRecord record_submission(const std::string& job_id, const std::string& batch_id);
  JobRecord set_job_results(const std::string& job_id, const std::vector<std::string>& handle_ids);
  void set_job_handled(const std::string& job_id, bool handled);
  std::vector<Transition> job_transitions(const std::string& job_id = {}) const;
  std::vector<Transition> activity_transitions(const std::string& activity_id = {}) const;

  // --- objects
  ObjectHandle put_object(const std::string& store_name, const std::string& key,
                          std::string_view bytes);
  /// Accepts a handle id or an objstore:// URI.
  ObjectHandle get_handle(const std::string& handle_or_uri) const;
  std::string get_object(const std::string& handle_or_uri) const;

  // --- queue history
  void add_snapshot(const QueueSnapshot& s);
  std::optional<QueueSnapshot> latest_snapshot(const std::string& machine_id,
                                               bool ok_only = false) const;
  /// Most recent `limit` snapshots, oldest first.
  std::vector<QueueSnapshot> recent_snapshots(const std::string& machine_id,
                                              std::size_t limit) const;
  void add_completions(const std::vector<CompletionSample>& samples);
  /// Ratios of the most recent `limit` completions, newest first.
  std::vector<double> recent_ratios(const std::string& machine_id, std::size_t limit) const;

  // --- workflow engine state
  std::optional<std::string> get_barrier(const std::string& activity_id,
                                         const std::string& stage) const;
  void put_barrier(const std::string& activity_id, const std::string& stage,
                   const std::string& state_json);
  std::vector<std::pair<std::string, std::string>> barriers(const std::string& activity_id) const;

  // --- small key/value area (sensor digests, counters)
  std::optional<std::string> get_kv(const std::string& key) const;
  void put_kv(const std::string& key, const std::string& value);

 private:
  class Db;
  void notify(const std::vector<Transition>& ts);
  ObjectHandle handle_locked(const std::string& handle_or_uri) const;

  Options opts_;
  SystemClock system_clock_;
  const Clock* clock_;
  std::unique_ptr<Db> db_;
  mutable std::mutex mu_;
  std::mutex obs_mu_;
  std::vector<Observer> observers_;
};

}  // namespace urgent
