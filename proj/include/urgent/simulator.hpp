#pragma once

// Deterministic discrete-event stand-in for batch-scheduled HPC machines.
// Each SimMachine speaks one scheduler dialect, keeps a virtual clock in whole
// seconds, runs a FIFO node scheduler and a tiny virtual filesystem.

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "urgent/batch.hpp"
#include "urgent/common.hpp"

namespace urgent::sim {

struct RuntimeFraction {
  enum class Kind { FIXED, UNIFORM };
  Kind kind = Kind::FIXED;
  double lo = 1.0;  // FIXED uses lo as the value
  double hi = 1.0;
};

struct OutageWindow {
  std::int64_t start_s = 0;  // inclusive
  std::int64_t end_s = 0;    // exclusive
};

struct SimMachineConfig {
  std::string name;
  batch::Scheduler scheduler = batch::Scheduler::PBS;
  std::int64_t nodes = 1;
  double clock_rate = 1.0;
  RuntimeFraction runtime_fraction;
  std::vector<OutageWindow> outage_windows;
  std::uint64_t seed = 0;
  bool backfill = false;
  std::string user = "ctl";
  std::string login_host = "login1";
  /// Where a visualization server for this machine's results listens.
  int viz_port = 11111;
  /// Accounts the scheduler accepts; empty accepts any.
  std::vector<std::string> accounts;
};

void validate(const SimMachineConfig& cfg);
SimMachineConfig sim_machine_from_json(const nlohmann::json& j);
std::vector<SimMachineConfig> load_sim_config(const std::string& path);

enum class SimJobState { QUEUED, RUNNING, COMPLETED, KILLED, CANCELLED };
const char* to_string(SimJobState s);

struct SimJob {
  std::string batch_id;
  std::uint64_t seq = 0;
  std::string name;
  std::string owner;
  std::string queue;
  std::int64_t nodes = 1;
  std::int64_t walltime_req_s = 1;
  std::int64_t actual_runtime_s = 0;
  SimJobState state = SimJobState::QUEUED;
  std::int64_t submit_t = 0;
  std::optional<std::int64_t> start_t;
  std::optional<std::int64_t> end_t;
  std::string script_path;
  std::string script;
};

struct SimEvent {
  std::int64_t t = 0;
  std::string batch_id;
  SimJobState from = SimJobState::QUEUED;
  SimJobState to = SimJobState::QUEUED;

  bool operator==(const SimEvent&) const = default;
};

using batch::CommandResult;

/// Direct submission used to populate background load from other users.
struct SimSubmit {
  std::string name = "job";
  std::string owner = "other";
  std::string queue = "standard";
  std::int64_t nodes = 1;
  std::int64_t walltime_req_s = 3600;
  std::string script_path;  // optional; no out.dat when empty
  /// Overrides the configured runtime-fraction draw when set.
  std::optional<std::int64_t> actual_runtime_s;
};

class SimMachine {
 public:
  explicit SimMachine(SimMachineConfig cfg);

  const SimMachineConfig& config() const { return cfg_; }

  /// Executes one dialect command line. Outage windows answer 255.
  CommandResult handle_command(std::string_view command);

  /// Moves the virtual clock forward by dt seconds, returning the state
  /// transitions that happened inside the step in timestamp order.
  std::vector<SimEvent> advance(std::int64_t dt);
  /// Advances to absolute virtual time `t`; a no-op when already there.
  std::vector<SimEvent> advance_to(std::int64_t t);

  /// Byte-exact dialect output for the current queue (qstat -f / squeue).
  std::string render_status() const;

  void stage_file(const std::string& path, std::string bytes);
  std::string read_file(const std::string& path) const;

  std::string submit(const SimSubmit& s);

  std::int64_t now() const;
  bool in_outage() const;
  std::int64_t nodes_in_use() const;
  std::optional<SimJob> job(std::string_view batch_id) const;
  std::vector<SimJob> jobs() const;
  /// Every transition since construction, including command-triggered starts.
  std::vector<SimEvent> event_log() const;

 private:
  bool in_outage_locked() const;
  std::vector<SimEvent> advance_locked(std::int64_t target);
  bool account_ok(const std::string& account) const;
  std::string submit_locked(SimSubmit s, std::string script);
  void schedule_locked(std::vector<SimEvent>* out);
  void finish_locked(SimJob& j, SimJobState to, std::vector<SimEvent>* out);
  void record_locked(SimEvent e, std::vector<SimEvent>* out);
  std::int64_t free_nodes_locked() const;
  std::string render_locked() const;
  CommandResult run_qsub(const std::vector<std::string>& argv);
  CommandResult run_sbatch(const std::vector<std::string>& argv);
  CommandResult run_cancel(const std::vector<std::string>& argv);

  SimMachineConfig cfg_;
  mutable std::mutex mu_;
  std::int64_t now_ = 0;
  std::uint64_t next_id_ = 1;
  std::mt19937_64 rng_;
  std::vector<SimJob> jobs_;  // submission order
  std::map<std::string, std::string> files_;
  std::vector<SimEvent> log_;
};

/// A set of machines kept in step with a shared Clock. Before any command or
/// file access the target machine is advanced to the clock's current time
/// (virtual time 0 is the clock reading at construction).
class SimCluster {
 public:
  SimCluster(std::vector<SimMachineConfig> configs, const Clock* clock);

  bool has(std::string_view name) const;
  SimMachine& machine(std::string_view name);
  std::vector<std::string> names() const;

  /// Advances `name` to the clock's current time; returns the events.
  std::vector<SimEvent> sync(std::string_view name);
  void sync_all();

  CommandResult run(std::string_view name, std::string_view command);
  void stage_file(std::string_view name, const std::string& path, std::string bytes);
  std::string read_file(std::string_view name, const std::string& path);

 private:
  const Clock* clock_;
  Timestamp origin_;
  std::map<std::string, std::unique_ptr<SimMachine>, std::less<>> machines_;
};

/// Splits a shell-like command on whitespace, honouring double quotes.
std::vector<std::string> tokenize_command(std::string_view command);

}  // namespace urgent::sim
