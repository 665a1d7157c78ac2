#include <algorithm>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "checks.hpp"
#include "rig.hpp"

namespace urgent::testkit {

using nlohmann::json;
using wf::StageMessage;

namespace {

Rig::Options pair_of_machines(std::int64_t nodes, double fraction) {
  Rig::Options o;
  o.machines = {sim_machine("archer", batch::Scheduler::PBS, nodes, fraction),
                sim_machine("cirrus", batch::Scheduler::SLURM, nodes, fraction)};
  return o;
}

std::vector<JobRecord> jobs_of(StateStore& s, const std::string& activity) {
  return s.query_jobs(JobQuery{activity, std::nullopt, std::nullopt});
}

struct RandomDag {
  wf::WorkflowDefinition def;
  json context;
  std::vector<bool> fires;  // reference outcome per stage index
};

RandomDag random_dag(std::mt19937_64& rng, const std::string& id) {
  RandomDag d;
  const int n = std::uniform_int_distribution<int>(2, 8)(rng);
  const int flags = 4;
  d.context = json::object();
  std::vector<int> flag(flags);
  for (int f = 0; f < flags; ++f) {
    flag[f] = std::uniform_int_distribution<int>(0, 1)(rng);
    d.context["flag.f" + std::to_string(f)] = flag[f];
  }
  d.def.workflow_id = id;
  d.def.entry_stage = "s0";
  for (int i = 0; i < n; ++i) {
    wf::Stage s;
    s.name = "s" + std::to_string(i);
    s.kind = std::uniform_int_distribution<int>(0, 1)(rng) ? wf::StageKind::PROCESS
                                                           : wf::StageKind::DECISION;
    if (s.kind == wf::StageKind::PROCESS) s.params = {{"set", {{"seen." + s.name, 1}}}};
    d.def.stages.push_back(std::move(s));
  }
  std::map<std::pair<int, int>, std::optional<int>> edges;  // -> flag index tested == 1
  auto add = [&](int i, int j) {
    if (edges.count({i, j})) return;
    std::optional<int> cond;
    if (std::bernoulli_distribution(0.4)(rng)) cond = std::uniform_int_distribution<int>(0, flags - 1)(rng);
    edges[{i, j}] = cond;
  };
  for (int j = 1; j < n; ++j) add(std::uniform_int_distribution<int>(0, j - 1)(rng), j);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (std::bernoulli_distribution(0.25)(rng)) add(i, j);
  // Sinks may be TERMINAL.
  std::set<int> has_out;
  for (const auto& [e, c] : edges) has_out.insert(e.first);
  for (int i = 0; i < n; ++i)
    if (!has_out.count(i) && std::bernoulli_distribution(0.5)(rng))
      d.def.stages[i].kind = wf::StageKind::TERMINAL, d.def.stages[i].params = json::object();
  for (const auto& [e, c] : edges) {
    wf::Edge ed{"s" + std::to_string(e.first), "s" + std::to_string(e.second), std::nullopt};
    if (c) ed.condition = "flag.f" + std::to_string(*c) + " == 1";
    d.def.edges.push_back(std::move(ed));
  }
  // Reference: a stage fires when some fired predecessor's edge holds.
  d.fires.assign(n, false);
  d.fires[0] = true;
  for (int j = 1; j < n; ++j)
    for (const auto& [e, c] : edges)
      if (e.second == j && d.fires[e.first] && (!c || flag[*c] == 1)) d.fires[j] = true;
  return d;
}

}  // namespace

CheckResult check_join_random_dags(int trials, std::uint64_t seed) {
  CheckResult res;
  std::mt19937_64 rng(seed);
  Rig rig(pair_of_machines(4, 0.5));
  auto& engine = rig.engine();
  auto& store = rig.store();
  for (int t = 0; t < trials; ++t) {
    auto dag = random_dag(rng, "wf-dag" + std::to_string(t));
    engine.register_workflow(dag.def);
    auto act = store.create_activity("workflow", dag.def.workflow_id, {}).activity_id;
    ++res.cases;
    auto fail_with = [&](const std::string& why) {
      res.ok = false;
      res.detail = "trial " + std::to_string(t) + ": " + why + "; definition " +
                   wf::to_json(dag.def).dump();
    };

    // Deliver outstanding messages in random order.
    StageMessage entry;
    entry.activity_id = act;
    entry.stage = "s0";
    entry.context = dag.context;
    std::vector<StageMessage> pool{entry};
    std::map<std::string, int> consumed;                          // stage -> messages taken
    std::map<std::pair<std::string, std::string>, int> sent;      // (from, to) -> count
    std::map<std::string, int> consumed_when_done;
    while (!pool.empty()) {
      auto k = std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng);
      auto msg = pool[k];
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(k));
      ++consumed[msg.stage];
      for (auto& o : engine.advance(msg)) {
        ++sent[{o.from, o.stage}];
        pool.push_back(std::move(o));
      }
      auto b = engine.barrier(act, msg.stage);
      if (!b.is_null() && b["done"].get<bool>() && !consumed_when_done.count(msg.stage))
        consumed_when_done[msg.stage] = consumed[msg.stage];
    }
    rig.drain();

    if (store.get_activity(act).status != ActivityStatus::COMPLETED) {
      fail_with("activity not COMPLETED");
      return res;
    }
    for (std::size_t i = 0; i < dag.def.stages.size(); ++i) {
      const auto& name = dag.def.stages[i].name;
      auto b = engine.barrier(act, name);
      const auto in = name == "s0" ? std::vector<std::string>{""} : dag.def.incoming(name);
      if (b.is_null() || !b["done"].get<bool>()) return fail_with(name + " never finished"), res;
      if (b["fired"].get<bool>() != dag.fires[i])
        return fail_with(name + " fired=" + b["fired"].dump() + " but reference says " +
                         (dag.fires[i] ? "fire" : "skip")),
               res;
      if (b["arrivals"].size() != in.size())
        return fail_with(name + " finished with " + std::to_string(b["arrivals"].size()) + " of " +
                         std::to_string(in.size()) + " arrivals"),
               res;
      if (consumed_when_done[name] != static_cast<int>(in.size()))
        return fail_with(name + " finished after " + std::to_string(consumed_when_done[name]) +
                         " messages, expected " + std::to_string(in.size())),
               res;
      for (const auto* e : dag.def.outgoing(name))
        if (sent[{name, e->to}] != 1)
          return fail_with("edge " + name + " -> " + e->to + " carried " +
                           std::to_string(sent[{name, e->to}]) + " messages"),
                 res;
      if (dag.fires[i] && dag.def.stages[i].kind == wf::StageKind::TERMINAL) {
        // A fired sink saw every live predecessor's marks.
        for (const auto& p : in) {
          if (p.empty()) continue;
          const auto& pa = b["arrivals"][p];
          if (pa["skip"].get<bool>()) continue;
          for (const auto& [k, v] : pa["context"].items())
            if (k.rfind("seen.", 0) == 0 && !b["input"].contains(k))
              return fail_with(name + " input lost " + k), res;
        }
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------

namespace {

struct CrashPlan {
  int crash_at = -1;  // fault call index that kills the broker; -1 never
  int calls = 0;
  Rig* rig = nullptr;
  std::vector<std::string> points;
};

wf::WorkflowEngine::Options crashing(CrashPlan& plan) {
  wf::WorkflowEngine::Options o;
  o.fault = [&plan](const std::string& point) {
    plan.points.push_back(point);
    if (plan.calls++ == plan.crash_at) {
      plan.rig->broker().kill();
      throw Error(ErrorCode::Internal, "injected crash at " + point);
    }
  };
  return o;
}

}  // namespace

CheckResult check_engine_crash_sweep(std::uint64_t seed) {
  (void)seed;
  CheckResult res;
  const auto def = shipped_workflow("wf-fire.json");
  auto fan_out = [&](const std::string& stage) { return def.stage(stage).fan_out.value_or(1); };

  // Reference run counts the crash points on the way.
  int total = 0;
  {
    CrashPlan plan;
    auto opts = pair_of_machines(4, 0.5);
    opts.engine = crashing(plan);
    Rig rig(opts);
    plan.rig = &rig;
    rig.engine().register_workflow(def);
    auto act = rig.engine().start_activity("wf-fire", json::object());
    auto st = rig.run(act);
    if (!st || *st != ActivityStatus::COMPLETED) {
      res.ok = false;
      res.detail = "reference run did not complete";
      return res;
    }
    total = plan.calls;
  }

  for (int k = 0; k < total; ++k) {
    CrashPlan plan;
    plan.crash_at = k;
    auto opts = pair_of_machines(4, 0.5);
    opts.engine = crashing(plan);
    Rig rig(opts);
    plan.rig = &rig;
    rig.engine().register_workflow(def);
    ++res.cases;
    std::string act;
    try {
      act = rig.engine().start_activity("wf-fire", json::object());
    } catch (const Error&) {
      act = rig.store().list_activities().at(0).activity_id;
    }
    auto st = rig.run(act);
    const auto where = plan.points.empty() ? std::string("?") : plan.points.back();
    if (!st) {
      if (!rig.broker().killed()) {
        res.ok = false;
        res.detail = "crash point " + std::to_string(k) + ": stalled without crashing";
        return res;
      }
      rig.restart();
      st = rig.run(act);
    }
    std::ostringstream why;
    if (!st || *st != ActivityStatus::COMPLETED) {
      why << "activity " << (st ? to_string(*st) : "not terminal") << " after restart";
    } else {
      std::map<std::pair<std::string, std::int64_t>, int> per_instance;
      std::map<std::string, int> per_stage;
      for (const auto& j : jobs_of(rig.store(), act)) {
        ++per_instance[{j.link.stage, j.link.ensemble_index}];
        ++per_stage[j.link.stage];
        if (j.link.attempt == 1 && j.status != JobStatus::COMPLETED && j.status != JobStatus::ERROR)
          why << j.job_id << " left " << to_string(j.status) << "; ";
      }
      for (const auto& [stage, n] : per_stage)
        if (n > 2 * fan_out(stage)) why << stage << " created " << n << " jobs; ";
      for (const auto& [key, n] : per_instance)
        if (n > 2) why << key.first << "[" << key.second << "] has " << n << " attempts; ";
      for (const auto& s : def.stages)
        if (s.kind == wf::StageKind::SUBMIT_JOB && per_stage[s.name] < fan_out(s.name))
          why << s.name << " created only " << per_stage[s.name] << " jobs; ";
    }
    if (!why.str().empty()) {
      res.ok = false;
      res.detail = "crash point " + std::to_string(k) + " (" + where + "): " + why.str();
      return res;
    }
  }
  res.detail = std::to_string(total) + " crash points";
  return res;
}

// ---------------------------------------------------------------------------

namespace {

using JobShape = std::tuple<std::string, std::int64_t, int, std::string, std::int64_t, std::int64_t>;

std::multiset<JobShape> shapes(StateStore& s, const std::string& act) {
  std::multiset<JobShape> out;
  for (const auto& j : jobs_of(s, act))
    out.insert({j.link.stage, j.link.ensemble_index, j.link.attempt, to_string(j.status), j.nodes,
                j.walltime_req_s});
  return out;
}

}  // namespace

CheckResult check_engine_independence(std::uint64_t seed) {
  CheckResult res;
  std::mt19937_64 rng(seed);
  const auto fire = shipped_workflow("wf-fire.json");
  const auto flood = shipped_workflow("wf-flood.json");
  for (int level : {3, 8}) {
    const json flood_ctx{{"level", level}};
    std::multiset<JobShape> alone_fire, alone_flood;
    {
      Rig rig(pair_of_machines(16, 0.5));
      rig.engine().register_workflow(fire);
      auto a = rig.engine().start_activity("wf-fire", json::object());
      rig.run(a);
      alone_fire = shapes(rig.store(), a);
    }
    {
      Rig rig(pair_of_machines(16, 0.5));
      rig.engine().register_workflow(flood);
      auto a = rig.engine().start_activity("wf-flood", flood_ctx);
      rig.run(a);
      alone_flood = shapes(rig.store(), a);
    }
    // Together, with a random start offset between them.
    Rig rig(pair_of_machines(16, 0.5));
    rig.engine().register_workflow(fire);
    rig.engine().register_workflow(flood);
    auto a = rig.engine().start_activity("wf-fire", json::object());
    const int lag = std::uniform_int_distribution<int>(0, 10)(rng);
    for (int i = 0; i < lag; ++i) rig.step(60);
    auto b = rig.engine().start_activity("wf-flood", flood_ctx);
    auto sa = rig.run(a);
    auto sb = rig.run(b);
    ++res.cases;
    if (!sa || !sb || *sa != ActivityStatus::COMPLETED || *sb != ActivityStatus::COMPLETED) {
      res.ok = false;
      res.detail = "level " + std::to_string(level) + ": interleaved activities did not both complete";
      return res;
    }
    if (shapes(rig.store(), a) != alone_fire || shapes(rig.store(), b) != alone_flood) {
      res.ok = false;
      res.detail = "level " + std::to_string(level) + ": job sets differ from the solo runs";
      return res;
    }
    const auto model = rig.engine().barrier(b, "model");
    if (model["fired"].get<bool>() != (level > 5)) {
      res.ok = false;
      res.detail = "flood branch taken wrongly at level " + std::to_string(level);
      return res;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------

OutageReport run_outage_failover() {
  OutageReport rep;
  auto opts = pair_of_machines(4, 0.5);
  opts.poll_offsets = {{"archer", 0}, {"cirrus", 300}};
  const auto interval = static_cast<std::int64_t>(opts.status.poll_interval_s);
  const int window = static_cast<int>(opts.status.reliability_window);
  // Virtual time 0 is construction; warm-up fills the reliability window,
  // then the outage opens between archer's polls while the preprocess job
  // runs on cirrus, so the ensemble is placed from a stale view of archer.
  const std::int64_t t0 = interval * window;
  opts.machines[0].outage_windows = {{t0 + 240, t0 + 2400}};
  Rig rig(opts);
  rig.warm_up(window);

  auto def = shipped_workflow("wf-fire.json");
  for (auto& s : def.stages)
    if (s.name == "preprocess") s.params["machines"] = json::array({"cirrus"});
  rig.engine().register_workflow(def);

  const auto archer = rig.machines().machine_id("archer");
  const auto cirrus = rig.machines().machine_id("cirrus");
  rep.reliability_before = rig.status().reliability(archer).reliability;
  auto act = rig.engine().start_activity("wf-fire", json::object());
  auto st = rig.run_ticks(act, 200, 60);
  rep.activity = st ? to_string(*st) : "not terminal";

  const auto after = rig.status().reliability(archer);
  rep.reliability_after = after.reliability;
  rep.window_polls = after.window_polls;
  rep.ok_polls = after.ok_polls;
  for (const auto& s : rig.store().recent_snapshots(archer, window))
    if (!s.poll_ok) ++rep.failed_polls;

  const auto audit = rig.machines().audit();
  for (const auto& j : jobs_of(rig.store(), act)) {
    ++rep.jobs;
    if (j.status == JobStatus::COMPLETED) ++rep.completed;
    bool tried_archer = false;
    for (const auto& e : audit)
      if (e.machine == "archer" && !e.ok && e.detail.find(j.job_id) != std::string::npos)
        tried_archer = true;
    if (tried_archer) {
      ++rep.replaced_tried;
      if (j.machine_id == cirrus && j.status == JobStatus::COMPLETED) ++rep.replaced_completed;
    }
  }
  return rep;
}

}  // namespace urgent::testkit
