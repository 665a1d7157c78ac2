#include "urgent/workflow.hpp"

#include <algorithm>
#include <cctype>
#include <functional>
#include <map>
#include <set>

#include "urgent/broker.hpp"
#include "urgent/predicate.hpp"

namespace urgent::wf {

using nlohmann::json;

const char* to_string(StageKind k) {
  switch (k) {
    case StageKind::SUBMIT_JOB: return "SUBMIT_JOB";
    case StageKind::TRANSFER: return "TRANSFER";
    case StageKind::PROCESS: return "PROCESS";
    case StageKind::DECISION: return "DECISION";
    case StageKind::TERMINAL: return "TERMINAL";
  }
  return "?";
}

const char* to_string(TriggerKind k) { return k == TriggerKind::MANUAL ? "MANUAL" : "SENSOR"; }
const char* to_string(Origin o) { return o == Origin::MANUAL ? "MANUAL" : "SENSOR"; }

StageKind parse_stage_kind(std::string_view s) {
  for (auto k : {StageKind::SUBMIT_JOB, StageKind::TRANSFER, StageKind::PROCESS,
                 StageKind::DECISION, StageKind::TERMINAL})
    if (s == to_string(k)) return k;
  fail(ErrorCode::InvalidArgument, "unknown stage kind " + std::string(s));
}

const Stage* WorkflowDefinition::find_stage(const std::string& name) const {
  for (const auto& s : stages)
    if (s.name == name) return &s;
  return nullptr;
}

const Stage& WorkflowDefinition::stage(const std::string& name) const {
  if (auto* s = find_stage(name)) return *s;
  fail(ErrorCode::NotFound, workflow_id + " has no stage " + name);
}

std::vector<const Edge*> WorkflowDefinition::outgoing(const std::string& stage) const {
  std::vector<const Edge*> out;
  for (const auto& e : edges)
    if (e.from == stage) out.push_back(&e);
  return out;
}

std::vector<std::string> WorkflowDefinition::incoming(const std::string& stage) const {
  std::set<std::string> in;
  for (const auto& e : edges)
    if (e.to == stage) in.insert(e.from);
  return {in.begin(), in.end()};
}

namespace {

bool simple_name(const std::string& s) {
  if (s.empty() || s.size() > 100) return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
  });
}

}  // namespace

void validate(const WorkflowDefinition& def) {
  if (!simple_name(def.workflow_id))
    fail(ErrorCode::InvalidArgument, "workflow_id must be 1-100 of [A-Za-z0-9_-]");
  if (def.stages.empty()) fail(ErrorCode::InvalidArgument, def.workflow_id + ": no stages");
  std::set<std::string> names;
  for (const auto& s : def.stages) {
    if (!simple_name(s.name))
      fail(ErrorCode::InvalidArgument, "stage name '" + s.name + "' must be 1-100 of [A-Za-z0-9_-]");
    if (!names.insert(s.name).second) fail(ErrorCode::InvalidArgument, "duplicate stage " + s.name);
    if (s.fan_out && s.kind != StageKind::SUBMIT_JOB)
      fail(ErrorCode::InvalidArgument, s.name + ": fan_out is only allowed on SUBMIT_JOB stages");
    if (s.fan_out && *s.fan_out < 1)
      fail(ErrorCode::InvalidArgument, s.name + ": fan_out must be positive");
    if (!s.params.is_object()) fail(ErrorCode::InvalidArgument, s.name + ": params must be an object");
    if (s.kind == StageKind::SUBMIT_JOB && !s.params.contains("script"))
      fail(ErrorCode::InvalidArgument, s.name + ": SUBMIT_JOB needs params.script");
    if (s.kind == StageKind::TRANSFER &&
        !(s.params.contains("source") && s.params.contains("machine") && s.params.contains("remote_dir")))
      fail(ErrorCode::InvalidArgument, s.name + ": TRANSFER needs source, machine and remote_dir");
  }
  if (!names.count(def.entry_stage))
    fail(ErrorCode::InvalidArgument, "entry_stage '" + def.entry_stage + "' is not a stage");

  std::set<std::pair<std::string, std::string>> seen;
  std::map<std::string, std::vector<std::string>> adj;
  for (const auto& e : def.edges) {
    if (!names.count(e.from) || !names.count(e.to))
      fail(ErrorCode::InvalidArgument, "edge " + e.from + " -> " + e.to + " names a missing stage");
    if (!seen.insert({e.from, e.to}).second)
      fail(ErrorCode::InvalidArgument, "duplicate edge " + e.from + " -> " + e.to);
    if (def.stage(e.from).kind == StageKind::TERMINAL)
      fail(ErrorCode::InvalidArgument, "TERMINAL stage " + e.from + " has an outgoing edge");
    if (e.condition) pred::parse(*e.condition);
    adj[e.from].push_back(e.to);
  }

  // Depth-first colouring finds cycles, including self loops.
  std::map<std::string, int> colour;
  std::function<void(const std::string&)> visit = [&](const std::string& n) {
    colour[n] = 1;
    for (const auto& m : adj[n]) {
      if (colour[m] == 1) fail(ErrorCode::CyclicWorkflow, def.workflow_id + ": cycle through " + m);
      if (colour[m] == 0) visit(m);
    }
    colour[n] = 2;
  };
  for (const auto& s : def.stages)
    if (colour[s.name] == 0) visit(s.name);

  std::set<std::string> reach{def.entry_stage};
  std::vector<std::string> todo{def.entry_stage};
  while (!todo.empty()) {
    auto n = todo.back();
    todo.pop_back();
    for (const auto& m : adj[n])
      if (reach.insert(m).second) todo.push_back(m);
  }
  for (const auto& s : def.stages)
    if (!reach.count(s.name))
      fail(ErrorCode::InvalidArgument, "stage " + s.name + " is unreachable from " + def.entry_stage);

  for (const auto& t : def.triggers)
    if (t.kind == TriggerKind::SENSOR && t.sensor_type.empty())
      fail(ErrorCode::InvalidArgument, "SENSOR trigger needs sensor_type");
  if (!mq::valid_queue_name(error_queue(def.workflow_id)))
    fail(ErrorCode::InvalidArgument, "workflow_id does not make a valid queue name");
}

WorkflowDefinition definition_from_json(const json& j) {
  if (!j.is_object()) fail(ErrorCode::InvalidArgument, "workflow definition must be an object");
  WorkflowDefinition d;
  try {
    d.workflow_id = j.at("workflow_id").get<std::string>();
    d.entry_stage = j.at("entry_stage").get<std::string>();
    for (const auto& s : j.at("stages")) {
      Stage st;
      st.name = s.at("name").get<std::string>();
      st.kind = parse_stage_kind(s.at("kind").get<std::string>());
      st.params = s.value("params", json::object());
      if (s.contains("fan_out")) st.fan_out = s["fan_out"].get<std::int64_t>();
      else if (st.params.is_object() && st.params.contains("fan_out"))
        st.fan_out = st.params["fan_out"].get<std::int64_t>();
      d.stages.push_back(std::move(st));
    }
    for (const auto& e : j.value("edges", json::array())) {
      Edge ed;
      ed.from = e.at("from").get<std::string>();
      ed.to = e.at("to").get<std::string>();
      if (e.contains("condition") && !e["condition"].is_null())
        ed.condition = e["condition"].get<std::string>();
      d.edges.push_back(std::move(ed));
    }
    for (const auto& t : j.value("triggers", json::array({{{"kind", "MANUAL"}}}))) {
      Trigger tr;
      const auto kind = t.at("kind").get<std::string>();
      if (kind == "MANUAL") tr.kind = TriggerKind::MANUAL;
      else if (kind == "SENSOR") tr.kind = TriggerKind::SENSOR;
      else fail(ErrorCode::InvalidArgument, "unknown trigger kind " + kind);
      tr.sensor_type = t.value("sensor_type", std::string());
      d.triggers.push_back(std::move(tr));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("workflow definition: ") + e.what());
  }
  validate(d);
  return d;
}

json to_json(const WorkflowDefinition& d) {
  json stages = json::array();
  for (const auto& s : d.stages) {
    json js{{"name", s.name}, {"kind", to_string(s.kind)}, {"params", s.params}};
    if (s.fan_out) js["fan_out"] = *s.fan_out;
    stages.push_back(std::move(js));
  }
  json edges = json::array();
  for (const auto& e : d.edges) {
    json je{{"from", e.from}, {"to", e.to}};
    if (e.condition) je["condition"] = *e.condition;
    edges.push_back(std::move(je));
  }
  json triggers = json::array();
  for (const auto& t : d.triggers) {
    json jt{{"kind", to_string(t.kind)}};
    if (t.kind == TriggerKind::SENSOR) jt["sensor_type"] = t.sensor_type;
    triggers.push_back(std::move(jt));
  }
  return json{{"workflow_id", d.workflow_id}, {"entry_stage", d.entry_stage}, {"stages", stages},
              {"edges", edges}, {"triggers", triggers}};
}

std::string stage_queue(const std::string& workflow_id, const std::string& stage) {
  return "wf." + workflow_id + "." + stage;
}

std::string error_queue(const std::string& workflow_id) { return "wf." + workflow_id + ".error"; }

std::string substitute(const std::string& tmpl, const json& context, const StringMap& vars) {
  std::string out;
  std::size_t pos = 0;
  while (true) {
    auto open = tmpl.find("${", pos);
    if (open == std::string::npos) {
      out.append(tmpl, pos, std::string::npos);
      return out;
    }
    auto close = tmpl.find('}', open + 2);
    if (close == std::string::npos)
      fail(ErrorCode::InvalidArgument, "unterminated ${ in template at offset " + std::to_string(open));
    out.append(tmpl, pos, open - pos);
    const auto name = tmpl.substr(open + 2, close - open - 2);
    if (auto it = vars.find(name); it != vars.end()) {
      out += it->second;
    } else if (const json* v = pred::lookup(context, name)) {
      out += v->is_string() ? v->get<std::string>() : v->dump();
    } else {
      fail(ErrorCode::MissingField, name);
    }
    pos = close + 1;
  }
}

std::int64_t int_param(const json& v, const json& context, const StringMap& vars,
                       const std::string& what) {
  if (v.is_number_integer()) return v.get<std::int64_t>();
  if (v.is_string()) {
    auto text = substitute(v.get<std::string>(), context, vars);
    try {
      std::size_t used = 0;
      auto n = std::stoll(text, &used);
      if (used == text.size()) return n;
    } catch (const std::exception&) {
    }
    fail(ErrorCode::TypeMismatch, what + " expanded to '" + text + "', not an integer");
  }
  fail(ErrorCode::TypeMismatch, what + " must be an integer or a template");
}

}  // namespace urgent::wf
