#pragma once

// Progresses activities through their workflow by consuming and producing
// broker messages. Every stage has a durable queue `wf.<workflow>.<stage>`
// with one consumer; join state per (activity, stage) lives in the store.
//
// Stage messages are JSON:
//   {"activity_id", "stage", "type": ARRIVAL|SKIP|INSTANCE|CONTINUATION,
//    "from", "index", "job_id", "context"}
// ARRIVAL/SKIP come from a predecessor (from == "" for the entry stage).
// INSTANCE is one member of a SUBMIT_JOB stage's fan-out. CONTINUATION
// follows a job reaching a terminal status.
//
// A stage fires once every predecessor has arrived; when every predecessor
// skipped, the stage is skipped and SKIP propagates. An activity completes
// when every stage is done (fired and finished, or skipped).

#include <atomic>
#include <condition_variable>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "urgent/broker.hpp"
#include "urgent/machine.hpp"
#include "urgent/machine_status.hpp"
#include "urgent/state_store.hpp"
#include "urgent/workflow.hpp"

namespace urgent::wf {

struct StageMessage {
  enum class Type { ARRIVAL, SKIP, INSTANCE, CONTINUATION };
  std::string activity_id;
  std::string stage;
  Type type = Type::ARRIVAL;
  std::string from;
  std::int64_t index = 0;
  std::string job_id;
  nlohmann::json context = nlohmann::json::object();

  bool operator==(const StageMessage&) const = default;
};

const char* to_string(StageMessage::Type t);
nlohmann::json to_json(const StageMessage& m);
StageMessage stage_message_from_json(const nlohmann::json& j);

class WorkflowEngine {
 public:
  struct Options {
    /// Deliveries before the broker dead-letters; the last failing delivery
    /// also fails the activity so it does not hang.
    std::uint32_t max_deliveries = 5;
    /// Test hook called at named points inside message handling. Crash
    /// tests kill the broker and throw from here.
    std::function<void(const std::string& point)> fault;
  };

  WorkflowEngine(StateStore& store, mq::Broker& broker, machine::MachineInterface& machines,
                 status::MachineStatus& status, Options opts);
  WorkflowEngine(StateStore& store, mq::Broker& broker, machine::MachineInterface& machines,
                 status::MachineStatus& status)
      : WorkflowEngine(store, broker, machines, status, Options{}) {}
  ~WorkflowEngine();
  WorkflowEngine(const WorkflowEngine&) = delete;
  WorkflowEngine& operator=(const WorkflowEngine&) = delete;

  /// Declares the stage queues, installs consumers and persists the
  /// definition. Re-registering an identical definition is a no-op;
  /// a different one under the same id is AlreadyRegistered.
  std::string register_workflow(const WorkflowDefinition& def);
  std::vector<WorkflowDefinition> workflows() const;
  std::optional<WorkflowDefinition> workflow(const std::string& workflow_id) const;

  std::string start_activity(const std::string& workflow_id, const nlohmann::json& context,
                             Origin origin = Origin::MANUAL);
  /// Starts every workflow with a SENSOR trigger for `sensor_type`, once per
  /// (envelope, workflow). Returns the new activity ids.
  std::vector<std::string> on_trigger(const std::string& sensor_type,
                                      const std::string& envelope_id,
                                      const nlohmann::json& context);
  void cancel_activity(const std::string& activity_id);

  /// Handles one stage message and returns what it published.
  std::vector<StageMessage> advance(const StageMessage& msg);
  /// Publishes a CONTINUATION for a terminal job. Unknown jobs are logged
  /// and dropped.
  void on_job_event(const std::string& job_id, JobStatus status);

  /// Re-places and submits PENDING_SUBMIT jobs and re-emits events for
  /// terminal jobs the engine has not handled yet. Runs after every poll.
  void after_poll();
  /// Reloads persisted workflows and restarts interrupted work.
  void resume();

  /// The stage barrier as stored, or null.
  nlohmann::json barrier(const std::string& activity_id, const std::string& stage) const;

 private:
  struct Installed {
    WorkflowDefinition def;
    std::vector<std::string> consumers;
  };

  void install(const WorkflowDefinition& def);
  void handle_delivery(const mq::Message& m);
  std::mutex& activity_mutex(const std::string& activity_id);
  WorkflowDefinition def_for(const std::string& workflow_id) const;
  void fault(const std::string& point);

  std::vector<StageMessage> on_arrival(const WorkflowDefinition& def, const StageMessage& msg);
  std::vector<StageMessage> fire(const WorkflowDefinition& def, const Stage& stage,
                                 const std::string& activity_id, nlohmann::json& barrier);
  std::vector<StageMessage> on_instance(const WorkflowDefinition& def, const StageMessage& msg);
  std::vector<StageMessage> on_continuation(const WorkflowDefinition& def,
                                            const StageMessage& msg);
  std::vector<StageMessage> finish_stage(const WorkflowDefinition& def, const Stage& stage,
                                         const std::string& activity_id, nlohmann::json& barrier,
                                         nlohmann::json context);
  std::vector<StageMessage> skip_stage(const WorkflowDefinition& def, const Stage& stage,
                                       const std::string& activity_id, nlohmann::json& barrier);
  void retry_or_fail(const WorkflowDefinition& def, const JobRecord& job, const std::string& why);
  void try_submit(const WorkflowDefinition& def, const std::string& job_id);
  void publish(const WorkflowDefinition& def, const StageMessage& m);
  void save_barrier(const std::string& activity_id, const std::string& stage,
                    const nlohmann::json& barrier);
  void check_complete(const WorkflowDefinition& def, const std::string& activity_id);
  void fail_activity(const WorkflowDefinition& def, const std::string& activity_id,
                     const std::string& stage, const std::string& reason,
                     const nlohmann::json& context);
  void cancel_outstanding(const std::string& activity_id);
  void kick(const WorkflowDefinition& def, const ActivityRecord& a);
  bool live(const std::string& activity_id) const;

  StateStore& store_;
  mq::Broker& broker_;
  machine::MachineInterface& machines_;
  status::MachineStatus& status_;
  Options opts_;

  mutable std::mutex mu_;  // guards installed_ and activity_mu_
  std::map<std::string, Installed> installed_;
  std::map<std::string, std::unique_ptr<std::mutex>> activity_mu_;

  // Store observers, poll listeners and consumers outlive the engine; they
  // reach it through this and the destructor waits for calls in flight.
  struct Hook {
    class Guard {
     public:
      explicit Guard(Hook& h);
      ~Guard();
      explicit operator bool() const { return e_ != nullptr; }
      WorkflowEngine* operator->() const { return e_; }

     private:
      Hook& h_;
      WorkflowEngine* e_ = nullptr;
    };
    void close();

    std::mutex mu;
    std::condition_variable cv;
    int active = 0;
    WorkflowEngine* engine = nullptr;
  };
  std::shared_ptr<Hook> hook_;
};

}  // namespace urgent::wf
