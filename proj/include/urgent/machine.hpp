#pragma once

// Job lifecycle and file movement against batch machines, independent of how
// commands reach them. Transports are pluggable; the shipped one drives the
// simulator in-process.

#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "urgent/batch.hpp"
#include "urgent/common.hpp"
#include "urgent/state_store.hpp"

namespace urgent {

namespace sim {
class SimCluster;
}

namespace machine {

/// Wall-clock bound on a single transport call.
inline constexpr double kDefaultTransportTimeoutS = 30;

struct MachineConfig {
  std::string name;
  batch::Scheduler scheduler = batch::Scheduler::PBS;
  std::string transport = "sim";  // "sim" | "ssh"
  std::string endpoint;
  std::string account;
  /// Identity all transport calls run under; defaults to `account`.
  std::string identity;
  std::string queue = "standard";
  std::int64_t nodes = 1;
  std::int64_t cores_per_node = 1;
};

MachineConfig machine_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const MachineConfig& m);

/// Addressing for one transport call.
struct Target {
  std::string machine;
  std::string endpoint;
  std::string identity;
};

using batch::CommandResult;

class Transport {
 public:
  virtual ~Transport() = default;
  /// Exit 255 means the machine could not be reached.
  virtual CommandResult run_command(const Target& t, const std::string& command) = 0;
  /// Throws MachineUnreachable when the machine is down.
  virtual void put_file(const Target& t, const std::string& remote_path, const std::string& bytes) = 0;
  /// Throws NotFound for a missing file, MachineUnreachable when down.
  virtual std::string get_file(const Target& t, const std::string& remote_path) = 0;
};

/// Loopback to simulated machines; Target::machine names the SimMachine.
class SimTransport final : public Transport {
 public:
  explicit SimTransport(sim::SimCluster& cluster) : cluster_(cluster) {}
  CommandResult run_command(const Target& t, const std::string& command) override;
  void put_file(const Target& t, const std::string& remote_path, const std::string& bytes) override;
  std::string get_file(const Target& t, const std::string& remote_path) override;

 private:
  sim::SimCluster& cluster_;
};

/// Bounds every call of an inner transport in wall time. A call that overruns
/// is abandoned and reported as MachineUnreachable.
class TimedTransport final : public Transport {
 public:
  TimedTransport(std::shared_ptr<Transport> inner, double timeout_s);
  CommandResult run_command(const Target& t, const std::string& command) override;
  void put_file(const Target& t, const std::string& remote_path, const std::string& bytes) override;
  std::string get_file(const Target& t, const std::string& remote_path) override;

 private:
  std::shared_ptr<Transport> inner_;
  double timeout_s_;
};

struct AuditEntry {
  Timestamp at = 0;
  std::string machine;
  std::string identity;
  std::string op;  // run | put | get
  std::string detail;
  bool ok = true;
};

/// Thrown by fetch_results when some remote files were missing. Handles for
/// the fetched ones are already persisted.
class PartialFetch : public Error {
 public:
  PartialFetch(std::vector<std::string> ok, std::vector<std::string> missing);
  const std::vector<std::string>& ok() const { return ok_; }
  const std::vector<std::string>& missing() const { return missing_; }

 private:
  std::vector<std::string> ok_;
  std::vector<std::string> missing_;
};

/// `/work/<activity_id>/<job_id>/`
std::string job_dir(const JobRecord& job);

class MachineInterface {
 public:
  struct Options {
    std::size_t audit_capacity = 100000;
  };

  /// Registers (upserts) every configured machine in the store.
  MachineInterface(StateStore& store, std::shared_ptr<Transport> transport,
                   std::vector<MachineConfig> machines, Options opts);
  MachineInterface(StateStore& store, std::shared_ptr<Transport> transport,
                   std::vector<MachineConfig> machines)
      : MachineInterface(store, std::move(transport), std::move(machines), Options{}) {}

  StateStore& store() { return store_; }
  std::vector<MachineConfig> machines() const { return configs_; }
  const MachineConfig& config(const std::string& machine_id) const;
  std::string machine_id(const std::string& name) const;
  std::vector<std::string> machine_ids() const;

  /// Stages `script` into the job directory, submits it and records the
  /// batch id. Returns the batch id.
  std::string submit_job(const std::string& job_id, const std::string& script,
                         const std::string& job_name = {});
  void cancel_job(const std::string& job_id);
  std::vector<ObjectHandle> fetch_results(const std::string& job_id,
                                          const std::vector<std::string>& remote_paths);
  void transfer_between(const std::string& handle_or_uri, const std::string& dest_machine_id,
                        const std::string& remote_path);

  /// Runs the machine's full-queue status command. MachineUnreachable on
  /// transport failure or a nonzero exit.
  batch::QueueParse query_queue(const std::string& machine_id);

  std::vector<AuditEntry> audit() const;

 private:
  struct Slot {
    MachineConfig cfg;
    std::string machine_id;
    Target target;
    std::mutex mu;  // serializes command sequences per machine
  };

  Slot& slot(const std::string& machine_id);
  const Slot& slot(const std::string& machine_id) const;
  CommandResult run(Slot& s, const std::string& command);
  void put(Slot& s, const std::string& path, const std::string& bytes);
  std::string get(Slot& s, const std::string& path);
  void record(const Slot& s, const char* op, const std::string& detail, bool ok);

  StateStore& store_;
  std::shared_ptr<Transport> transport_;
  std::vector<MachineConfig> configs_;
  std::map<std::string, std::unique_ptr<Slot>> slots_;  // by machine_id
  Options opts_;
  mutable std::mutex audit_mu_;
  std::deque<AuditEntry> audit_;
};

}  // namespace machine
}  // namespace urgent
