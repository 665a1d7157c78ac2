#pragma once

// Queue polling, snapshot history, walltime correction, wait estimation by
// FIFO queue drain, reliability tracking and machine selection.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "urgent/batch.hpp"
#include "urgent/common.hpp"
#include "urgent/machine.hpp"
#include "urgent/state_store.hpp"

namespace urgent::status {

struct StatusConfig {
  double poll_interval_s = 600;
  std::size_t ratio_window = 500;
  std::size_t ratio_min_samples = 10;
  double reliability_threshold = 0.5;
  std::size_t reliability_window = 144;
  double stale_factor = 3;  // snapshots older than stale_factor * poll interval are stale
};

StatusConfig status_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const StatusConfig& c);

struct WaitEstimate {
  std::string machine_id;
  std::int64_t nodes = 1;
  std::int64_t walltime_req_s = 0;
  std::int64_t wait_s = 0;
  double ratio_used = 1.0;
  std::size_t sample_size = 0;
  /// Our QUEUED jobs submitted after the snapshot, added behind its queue.
  std::size_t unpolled_submissions = 0;
};

struct RatioEstimate {
  double ratio = 1.0;
  std::size_t sample_size = 0;
};

struct ReliabilityReport {
  std::string machine_id;
  std::size_t window_polls = 0;
  std::size_t ok_polls = 0;
  double reliability = 1.0;
};

/// Median; the mean of the middle pair for even sizes. Requires non-empty.
double median(std::vector<double> v);

/// Scaled runtime used by the drain model.
std::int64_t scaled_runtime(double ratio, std::int64_t walltime_req_s);

/// FIFO queue drain over one snapshot: the start offset of a candidate job
/// appended behind every QUEUED entry. HELD, EXITING and UNKNOWN entries are
/// ignored; queued jobs larger than the machine never start and are skipped.
std::int64_t drain_wait(std::int64_t total_nodes, const std::vector<batch::QueueEntry>& entries,
                        double ratio, std::int64_t nodes);

/// Jobs RUNNING in `prev` that are absent or EXITING in `cur`.
std::vector<CompletionSample> infer_completions(const QueueSnapshot& prev,
                                                const QueueSnapshot& cur);

struct Candidate {
  std::string machine_id;
  std::string name;
  bool available = true;
  double reliability = 1.0;
  std::int64_t total_nodes = 1;
  std::optional<std::int64_t> wait_s;  // empty when no valid estimate
};

/// Eligible = available, reliability >= threshold, big enough, has an
/// estimate. Returns the argmin of wait_s, ties by ascending name.
std::optional<Candidate> pick_best(const std::vector<Candidate>& cands, std::int64_t nodes,
                                   double reliability_threshold);

class MachineStatus {
 public:
  using PollListener = std::function<void(const QueueSnapshot&)>;

  MachineStatus(StateStore& store, machine::MachineInterface& machines, StatusConfig cfg);
  ~MachineStatus();
  MachineStatus(const MachineStatus&) = delete;
  MachineStatus& operator=(const MachineStatus&) = delete;

  const StatusConfig& config() const { return cfg_; }

  /// Never throws for transport trouble: failures become poll_ok=false
  /// snapshots. Also infers completions, updates health and reconciles the
  /// job records of this machine, then tells the listeners.
  QueueSnapshot poll_machine(const std::string& machine_id);
  void poll_all();

  RatioEstimate walltime_ratio(const std::string& machine_id) const;
  WaitEstimate estimate_wait(const std::string& machine_id, std::int64_t nodes,
                             std::int64_t walltime_req_s) const;
  ReliabilityReport reliability(const std::string& machine_id) const;

  /// Considers `machine_ids` (every registered machine when empty) minus
  /// `exclude`. NoEligibleMachine when nothing qualifies.
  std::string select_machine(std::int64_t nodes, std::int64_t walltime_req_s,
                             std::vector<std::string> machine_ids = {},
                             const std::set<std::string>& exclude = {}) const;
  std::vector<Candidate> candidates(std::int64_t nodes, std::int64_t walltime_req_s,
                                    const std::vector<std::string>& machine_ids) const;

  void add_listener(PollListener fn);

  /// One poller thread per machine, sleeping poll_interval_s of `clock` time.
  void start();
  void stop();

 private:
  void reconcile(const QueueSnapshot& snap, const std::vector<JobRecord>& tracked);
  void poller(std::string machine_id);

  StateStore& store_;
  machine::MachineInterface& machines_;
  StatusConfig cfg_;
  std::mutex listeners_mu_;
  std::vector<PollListener> listeners_;
  std::map<std::string, std::unique_ptr<std::mutex>> poll_mu_;  // per machine
  std::mutex run_mu_;
  std::condition_variable run_cv_;
  bool running_ = false;
  std::vector<std::thread> threads_;
};

}  // namespace urgent::status
