#pragma once

// Activity workflow definitions: a DAG of stages joined by optionally
// conditional edges, stored and exchanged as JSON.
//
// {
//   "workflow_id": "wf-fire",
//   "entry_stage": "preprocess",
//   "triggers": [{"kind": "MANUAL"}, {"kind": "SENSOR", "sensor_type": "hotspot"}],
//   "stages": [
//     {"name": "preprocess", "kind": "SUBMIT_JOB",
//      "params": {"nodes": 1, "walltime_req_s": 600, "script": "...", "outputs": ["out.dat"]}},
//     {"name": "ensemble", "kind": "SUBMIT_JOB", "fan_out": 5, "params": {...}},
//     {"name": "done", "kind": "TERMINAL"}
//   ],
//   "edges": [{"from": "preprocess", "to": "ensemble"},
//             {"from": "ensemble", "to": "done", "condition": "state == \"COMPLETED\""}]
// }
//
// SUBMIT_JOB params: nodes, walltime_req_s (integers or "${var}" strings),
// script (template), outputs (file names in the job directory, default
// ["out.dat"]), job_name, machines (optional list of allowed machine names).
// TRANSFER params: source (context key holding an objstore URI or a list of
// them), machine, remote_dir. PROCESS params: set (object of key -> template).

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "urgent/common.hpp"

namespace urgent::wf {

enum class StageKind { SUBMIT_JOB, TRANSFER, PROCESS, DECISION, TERMINAL };
enum class TriggerKind { MANUAL, SENSOR };
enum class Origin { MANUAL, SENSOR };

const char* to_string(StageKind k);
const char* to_string(TriggerKind k);
const char* to_string(Origin o);
StageKind parse_stage_kind(std::string_view s);

struct Stage {
  std::string name;
  StageKind kind = StageKind::DECISION;
  nlohmann::json params = nlohmann::json::object();
  std::optional<std::int64_t> fan_out;
};

struct Edge {
  std::string from;
  std::string to;
  std::optional<std::string> condition;
};

struct Trigger {
  TriggerKind kind = TriggerKind::MANUAL;
  std::string sensor_type;
};

struct WorkflowDefinition {
  std::string workflow_id;
  std::vector<Stage> stages;
  std::vector<Edge> edges;
  std::vector<Trigger> triggers;
  std::string entry_stage;

  const Stage& stage(const std::string& name) const;
  const Stage* find_stage(const std::string& name) const;
  std::vector<const Edge*> outgoing(const std::string& stage) const;
  /// Distinct source stages of incoming edges, sorted.
  std::vector<std::string> incoming(const std::string& stage) const;
};

/// Throws InvalidArgument, CyclicWorkflow or PredicateSyntax.
void validate(const WorkflowDefinition& def);
WorkflowDefinition definition_from_json(const nlohmann::json& j);
nlohmann::json to_json(const WorkflowDefinition& def);

std::string stage_queue(const std::string& workflow_id, const std::string& stage);
std::string error_queue(const std::string& workflow_id);

/// Replaces every `${name}` using `vars` first and then `context` (a JSON
/// object with dotted keys). Strings are inserted verbatim, other values as
/// JSON. MissingField for an unknown name.
std::string substitute(const std::string& tmpl, const nlohmann::json& context,
                       const StringMap& vars = {});

/// Either a JSON integer or a template expanding to one.
std::int64_t int_param(const nlohmann::json& v, const nlohmann::json& context,
                       const StringMap& vars, const std::string& what);

}  // namespace urgent::wf
