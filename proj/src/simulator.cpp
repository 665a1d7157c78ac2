#include "urgent/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace urgent::sim {

using batch::Scheduler;
using nlohmann::json;

const char* to_string(SimJobState s) {
  switch (s) {
    case SimJobState::QUEUED: return "QUEUED";
    case SimJobState::RUNNING: return "RUNNING";
    case SimJobState::COMPLETED: return "COMPLETED";
    case SimJobState::KILLED: return "KILLED";
    case SimJobState::CANCELLED: return "CANCELLED";
  }
  return "?";
}

void validate(const SimMachineConfig& cfg) {
  if (cfg.name.empty()) fail(ErrorCode::InvalidArgument, "simulated machine needs a name");
  if (cfg.nodes < 1) fail(ErrorCode::InvalidArgument, cfg.name + ": nodes must be >= 1");
  if (!(cfg.clock_rate > 0)) fail(ErrorCode::InvalidArgument, cfg.name + ": clock_rate must be > 0");
  const auto& rf = cfg.runtime_fraction;
  if (rf.kind == RuntimeFraction::Kind::FIXED) {
    if (!(rf.lo > 0)) fail(ErrorCode::InvalidArgument, cfg.name + ": FIXED fraction must be > 0");
  } else if (!(rf.lo > 0 && rf.lo <= rf.hi && rf.hi <= 1.0)) {
    fail(ErrorCode::InvalidArgument, cfg.name + ": UNIFORM fraction needs 0 < lo <= hi <= 1");
  }
  for (const auto& w : cfg.outage_windows)
    if (w.end_s < w.start_s) fail(ErrorCode::InvalidArgument, cfg.name + ": outage end < start");
  if (cfg.viz_port < 1 || cfg.viz_port > 65535) fail(ErrorCode::InvalidArgument, cfg.name + ": bad viz_port");
}

SimMachineConfig sim_machine_from_json(const json& j) {
  SimMachineConfig c;
  c.name = j.at("name").get<std::string>();
  c.scheduler = batch::parse_scheduler(j.at("scheduler").get<std::string>());
  c.nodes = j.at("nodes").get<std::int64_t>();
  c.clock_rate = j.value("clock_rate", 1.0);
  if (j.contains("runtime_fraction")) {
    const auto& rf = j["runtime_fraction"];
    auto kind = rf.value("kind", std::string("FIXED"));
    if (kind == "FIXED") {
      c.runtime_fraction = {RuntimeFraction::Kind::FIXED, rf.at("value").get<double>(), 0};
      c.runtime_fraction.hi = c.runtime_fraction.lo;
    } else if (kind == "UNIFORM") {
      c.runtime_fraction = {RuntimeFraction::Kind::UNIFORM, rf.at("lo").get<double>(),
                            rf.at("hi").get<double>()};
    } else {
      fail(ErrorCode::InvalidArgument, "runtime_fraction.kind must be FIXED or UNIFORM");
    }
  }
  for (const auto& w : j.value("outage_windows", json::array()))
    c.outage_windows.push_back({w.at(0).get<std::int64_t>(), w.at(1).get<std::int64_t>()});
  c.seed = j.value("seed", std::uint64_t{0});
  c.backfill = j.value("backfill", false);
  c.user = j.value("user", std::string("ctl"));
  c.login_host = j.value("login_host", std::string("login1"));
  c.viz_port = j.value("viz_port", 11111);
  c.accounts = j.value("accounts", std::vector<std::string>{});
  validate(c);
  return c;
}

std::vector<SimMachineConfig> load_sim_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::NotFound, "cannot open simulator config " + path);
  json j = json::parse(in);
  const json& list = j.is_array() ? j : j.at("machines");
  std::vector<SimMachineConfig> out;
  for (const auto& m : list) out.push_back(sim_machine_from_json(m));
  return out;
}

std::vector<std::string> tokenize_command(std::string_view command) {
  std::vector<std::string> out;
  std::string cur;
  bool in_quotes = false, have = false;
  for (char c : command) {
    if (c == '"') {
      in_quotes = !in_quotes;
      have = true;
    } else if (!in_quotes && (c == ' ' || c == '\t' || c == '\n')) {
      if (have) out.push_back(std::move(cur));
      cur.clear();
      have = false;
    } else {
      cur += c;
      have = true;
    }
  }
  if (have) out.push_back(std::move(cur));
  return out;
}

namespace {

std::string dirname(const std::string& path) {
  auto slash = path.rfind('/');
  if (slash == std::string::npos) return ".";
  if (slash == 0) return "/";
  return path.substr(0, slash);
}

std::int64_t ensemble_index(const std::string& script) {
  auto pos = script.find("ENSEMBLE_INDEX=");
  if (pos == std::string::npos) return 0;
  pos += 15;
  std::int64_t v = 0;
  while (pos < script.size() && std::isdigit(static_cast<unsigned char>(script[pos])))
    v = v * 10 + (script[pos++] - '0');
  return v;
}

CommandResult err(int code, std::string text) { return {code, "", std::move(text)}; }

std::optional<std::int64_t> parse_count(std::string_view s) {
  if (s.empty() || s.size() > 9) return std::nullopt;
  std::int64_t v = 0;
  for (char c : s) {
    if (!std::isdigit(static_cast<unsigned char>(c))) return std::nullopt;
    v = v * 10 + (c - '0');
  }
  return v >= 1 ? std::optional(v) : std::nullopt;
}

}  // namespace

SimMachine::SimMachine(SimMachineConfig cfg) : cfg_(std::move(cfg)), rng_(cfg_.seed) {
  validate(cfg_);
}

std::int64_t SimMachine::now() const {
  std::lock_guard lock(mu_);
  return now_;
}

bool SimMachine::in_outage() const {
  std::lock_guard lock(mu_);
  return in_outage_locked();
}

bool SimMachine::in_outage_locked() const {
  return std::any_of(cfg_.outage_windows.begin(), cfg_.outage_windows.end(),
                     [&](const OutageWindow& w) { return now_ >= w.start_s && now_ < w.end_s; });
}

std::int64_t SimMachine::nodes_in_use() const {
  std::lock_guard lock(mu_);
  return cfg_.nodes - free_nodes_locked();
}

std::int64_t SimMachine::free_nodes_locked() const {
  std::int64_t used = 0;
  for (const auto& j : jobs_)
    if (j.state == SimJobState::RUNNING) used += j.nodes;
  return cfg_.nodes - used;
}

std::optional<SimJob> SimMachine::job(std::string_view batch_id) const {
  std::lock_guard lock(mu_);
  for (const auto& j : jobs_)
    if (j.batch_id == batch_id) return j;
  return std::nullopt;
}

std::vector<SimJob> SimMachine::jobs() const {
  std::lock_guard lock(mu_);
  return jobs_;
}

std::vector<SimEvent> SimMachine::event_log() const {
  std::lock_guard lock(mu_);
  return log_;
}

void SimMachine::record_locked(SimEvent e, std::vector<SimEvent>* out) {
  if (out) out->push_back(e);
  log_.push_back(std::move(e));
}

std::string SimMachine::submit(const SimSubmit& s) {
  std::lock_guard lock(mu_);
  if (s.nodes < 1 || s.nodes > cfg_.nodes || s.walltime_req_s < 1)
    fail(ErrorCode::InvalidArgument, "job does not fit machine " + cfg_.name);
  std::string script;
  if (!s.script_path.empty()) {
    auto it = files_.find(s.script_path);
    if (it == files_.end()) fail(ErrorCode::NotFound, "no staged script " + s.script_path);
    script = it->second;
  }
  auto id = submit_locked(s, std::move(script));
  schedule_locked(nullptr);
  return id;
}

std::string SimMachine::submit_locked(SimSubmit s, std::string script) {
  SimJob j;
  j.seq = next_id_++;
  j.batch_id = cfg_.scheduler == Scheduler::PBS ? std::to_string(j.seq) + ".sim"
                                                : std::to_string(j.seq);
  j.name = s.name;
  j.owner = s.owner;
  j.queue = s.queue;
  j.nodes = s.nodes;
  j.walltime_req_s = s.walltime_req_s;
  j.submit_t = now_;
  j.script_path = s.script_path;
  j.script = std::move(script);

  double fraction = cfg_.runtime_fraction.lo;
  if (cfg_.runtime_fraction.kind == RuntimeFraction::Kind::UNIFORM) {
    std::uniform_real_distribution<double> dist(cfg_.runtime_fraction.lo, cfg_.runtime_fraction.hi);
    fraction = dist(rng_);
  }
  j.actual_runtime_s = s.actual_runtime_s.value_or(
      static_cast<std::int64_t>(std::llround(fraction * static_cast<double>(s.walltime_req_s))));
  jobs_.push_back(std::move(j));
  return jobs_.back().batch_id;
}

void SimMachine::schedule_locked(std::vector<SimEvent>* out) {
  std::int64_t free = free_nodes_locked();
  for (auto& j : jobs_) {
    if (j.state != SimJobState::QUEUED) continue;
    if (j.nodes > free) {
      if (cfg_.backfill) continue;
      break;  // strict FIFO: the head blocks everyone behind it
    }
    j.state = SimJobState::RUNNING;
    j.start_t = now_;
    j.end_t = now_ + std::min(j.actual_runtime_s, j.walltime_req_s);
    free -= j.nodes;
    record_locked({now_, j.batch_id, SimJobState::QUEUED, SimJobState::RUNNING}, out);
  }
}

void SimMachine::finish_locked(SimJob& j, SimJobState to, std::vector<SimEvent>* out) {
  SimJobState from = j.state;
  j.state = to;
  j.end_t = now_;
  if (to == SimJobState::COMPLETED && !j.script_path.empty()) {
    files_[dirname(j.script_path) + "/out.dat"] =
        sha256_hex(j.script) + " " + std::to_string(ensemble_index(j.script)) + "\n";
  }
  record_locked({now_, j.batch_id, from, to}, out);
}

std::vector<SimEvent> SimMachine::advance(std::int64_t dt) {
  if (dt < 0) fail(ErrorCode::InvalidArgument, "advance needs dt >= 0");
  std::lock_guard lock(mu_);
  return advance_locked(now_ + dt);
}

std::vector<SimEvent> SimMachine::advance_to(std::int64_t t) {
  std::lock_guard lock(mu_);
  if (t <= now_) return {};
  return advance_locked(t);
}

std::vector<SimEvent> SimMachine::advance_locked(std::int64_t target) {
  std::vector<SimEvent> events;
  while (true) {
    std::optional<std::int64_t> next;
    for (const auto& j : jobs_)
      if (j.state == SimJobState::RUNNING && *j.end_t <= target && (!next || *j.end_t < *next))
        next = *j.end_t;
    if (!next) break;
    now_ = std::max(now_, *next);
    for (auto& j : jobs_) {
      if (j.state != SimJobState::RUNNING || *j.end_t != *next) continue;
      finish_locked(j, j.actual_runtime_s > j.walltime_req_s ? SimJobState::KILLED
                                                             : SimJobState::COMPLETED,
                    &events);
    }
    schedule_locked(&events);
  }
  now_ = target;
  return events;
}

std::string SimMachine::render_status() const {
  std::lock_guard lock(mu_);
  return render_locked();
}

std::string SimMachine::render_locked() const {
  std::string out;
  for (const auto& j : jobs_) {
    const bool running = j.state == SimJobState::RUNNING;
    if (j.state != SimJobState::QUEUED && !running) continue;
    const std::int64_t elapsed = running ? now_ - *j.start_t : 0;
    if (cfg_.scheduler == Scheduler::PBS) {
      out += "Job Id: " + j.batch_id + "\n";
      out += "    Job_Name = " + j.name + "\n";
      out += "    Job_Owner = " + j.owner + "@" + cfg_.login_host + "\n";
      if (running) out += "    resources_used.walltime = " + batch::seconds_to_hms(elapsed) + "\n";
      out += std::string("    job_state = ") + (running ? "R" : "Q") + "\n";
      out += "    queue = " + j.queue + "\n";
      out += "    Resource_List.nodect = " + std::to_string(j.nodes) + "\n";
      out += "    Resource_List.walltime = " + batch::seconds_to_hms(j.walltime_req_s) + "\n";
      out += "\n";
    } else {
      out += j.batch_id + "|" + j.name + "|" + j.owner + "|" + (running ? "RUNNING" : "PENDING") +
             "|" + batch::slurm_duration(elapsed) + "|" + batch::slurm_duration(j.walltime_req_s) +
             "|" + std::to_string(j.nodes) + "|" + j.queue + "\n";
    }
  }
  return out;
}

void SimMachine::stage_file(const std::string& path, std::string bytes) {
  std::lock_guard lock(mu_);
  if (in_outage_locked()) fail(ErrorCode::MachineUnreachable, cfg_.name + " is unreachable");
  files_[path] = std::move(bytes);
}

std::string SimMachine::read_file(const std::string& path) const {
  std::lock_guard lock(mu_);
  if (in_outage_locked()) fail(ErrorCode::MachineUnreachable, cfg_.name + " is unreachable");
  auto it = files_.find(path);
  if (it == files_.end()) fail(ErrorCode::NotFound, cfg_.name + ": no such file " + path);
  return it->second;
}

CommandResult SimMachine::handle_command(std::string_view command) {
  std::lock_guard lock(mu_);
  if (in_outage_locked())
    return err(255, "ssh: connect to host " + cfg_.name + " port 22: Connection refused\n");
  auto argv = tokenize_command(command);
  if (argv.empty()) return err(1, "empty command\n");
  const std::string& prog = argv[0];
  const bool pbs = cfg_.scheduler == Scheduler::PBS;

  if (pbs && prog == "qsub") return run_qsub(argv);
  if (!pbs && prog == "sbatch") return run_sbatch(argv);
  if ((pbs && prog == "qdel") || (!pbs && prog == "scancel")) return run_cancel(argv);
  if (pbs && prog == "qstat") {
    if (std::find(argv.begin(), argv.end(), "-f") == argv.end())
      return err(1, "qstat: only full format (-f) is supported\n");
    return {0, render_locked(), ""};
  }
  if (!pbs && prog == "squeue") {
    auto fmt = std::find(argv.begin(), argv.end(), "-o");
    if (fmt == argv.end() || std::next(fmt) == argv.end() || *std::next(fmt) != batch::kSlurmFormat)
      return err(1, "squeue: error: unsupported output format\n");
    return {0, render_locked(), ""};
  }
  return err(127, "bash: " + prog + ": command not found\n");
}

bool SimMachine::account_ok(const std::string& account) const {
  return cfg_.accounts.empty() ||
         std::find(cfg_.accounts.begin(), cfg_.accounts.end(), account) != cfg_.accounts.end();
}

CommandResult SimMachine::run_qsub(const std::vector<std::string>& argv) {
  SimSubmit s;
  s.owner = cfg_.user;
  bool have_select = false, have_wall = false;
  for (std::size_t i = 1; i < argv.size(); ++i) {
    const std::string& a = argv[i];
    auto value = [&]() -> const std::string* {
      return i + 1 < argv.size() ? &argv[++i] : nullptr;
    };
    if (a == "-N" || a == "-q" || a == "-A") {
      const std::string* v = value();
      if (!v) return err(2, "qsub: option requires an argument -- '" + a.substr(1) + "'\n");
      if (a == "-N") s.name = *v;
      else if (a == "-q") s.queue = *v;
      else if (!account_ok(*v)) return err(1, "qsub: error: invalid account\n");
    } else if (a == "-l") {
      const std::string* v = value();
      if (!v) return err(2, "qsub: option requires an argument -- 'l'\n");
      for (auto item : split(*v, ',')) {
        auto eq = item.find('=');
        if (eq == std::string_view::npos) return err(2, "qsub: illegal -l value\n");
        auto key = item.substr(0, eq), val = item.substr(eq + 1);
        if (key == "select") {
          auto n = parse_count(val);
          if (!n) return err(2, "qsub: illegal -l value\n");
          s.nodes = *n;
          have_select = true;
        } else if (key == "walltime") {
          auto w = batch::try_parse_duration(val);
          if (!w || *w < 1) return err(2, "qsub: illegal -l value\n");
          s.walltime_req_s = *w;
          have_wall = true;
        }
      }
    } else if (!a.empty() && a[0] == '-') {
      return err(2, "qsub: invalid option -- '" + a.substr(1) + "'\n");
    } else {
      s.script_path = a;
    }
  }
  if (!have_select || !have_wall) return err(2, "qsub: select and walltime are required\n");
  if (s.script_path.empty()) return err(2, "qsub: no script file given\n");
  auto it = files_.find(s.script_path);
  if (it == files_.end()) return err(1, "qsub: script file:: No such file or directory\n");
  if (s.nodes > cfg_.nodes) return err(188, "qsub: Job exceeds queue resource limits\n");
  auto id = submit_locked(s, it->second);
  schedule_locked(nullptr);
  return {0, id + "\n", ""};
}

CommandResult SimMachine::run_sbatch(const std::vector<std::string>& argv) {
  SimSubmit s;
  s.owner = cfg_.user;
  bool have_nodes = false, have_time = false;
  for (std::size_t i = 1; i < argv.size(); ++i) {
    const std::string& a = argv[i];
    if (!starts_with(a, "--")) {
      if (!a.empty() && a[0] == '-') return err(1, "sbatch: error: unrecognized option '" + a + "'\n");
      s.script_path = a;
      continue;
    }
    auto eq = a.find('=');
    if (eq == std::string::npos) return err(1, "sbatch: error: option '" + a + "' requires an argument\n");
    std::string key = a.substr(2, eq - 2), val = a.substr(eq + 1);
    if (key == "job-name") s.name = val;
    else if (key == "partition") s.queue = val;
    else if (key == "account") {
      if (!account_ok(val)) return err(1, "sbatch: error: invalid account\n");
    }
    else if (key == "nodes") {
      auto n = parse_count(val);
      if (!n) return err(1, "sbatch: error: Invalid node count specification\n");
      s.nodes = *n;
      have_nodes = true;
    } else if (key == "time") {
      auto w = batch::try_parse_duration(val);
      if (!w || *w < 1) return err(1, "sbatch: error: Invalid time limit specification\n");
      s.walltime_req_s = *w;
      have_time = true;
    } else {
      return err(1, "sbatch: error: unrecognized option '" + a + "'\n");
    }
  }
  if (!have_nodes || !have_time) return err(1, "sbatch: error: --nodes and --time are required\n");
  if (s.script_path.empty()) return err(1, "sbatch: error: Batch script is empty!\n");
  auto it = files_.find(s.script_path);
  if (it == files_.end())
    return err(1, "sbatch: error: Unable to open file " + s.script_path + "\n");
  if (s.nodes > cfg_.nodes)
    return err(1, "sbatch: error: Batch job submission failed: Requested node configuration is not available\n");
  auto id = submit_locked(s, it->second);
  schedule_locked(nullptr);
  return {0, "Submitted batch job " + id + "\n", ""};
}

CommandResult SimMachine::run_cancel(const std::vector<std::string>& argv) {
  const bool pbs = cfg_.scheduler == Scheduler::PBS;
  if (argv.size() != 2) return err(1, std::string(pbs ? "qdel" : "scancel") + ": exactly one job id expected\n");
  for (auto& j : jobs_) {
    if (j.batch_id != argv[1]) continue;
    if (j.state == SimJobState::QUEUED || j.state == SimJobState::RUNNING) {
      finish_locked(j, SimJobState::CANCELLED, nullptr);
      schedule_locked(nullptr);
    }
    return {0, "", ""};  // finished jobs: idempotent no-op
  }
  if (pbs) return err(153, "qdel: Unknown Job Id " + argv[1] + "\n");
  return err(1, "scancel: error: Invalid job id specified\n");
}

// --- cluster ------------------------------------------------------------------

SimCluster::SimCluster(std::vector<SimMachineConfig> configs, const Clock* clock)
    : clock_(clock), origin_(clock ? clock->now() : 0) {
  for (auto& c : configs) {
    auto name = c.name;
    if (machines_.count(name)) fail(ErrorCode::InvalidArgument, "duplicate machine " + name);
    machines_.emplace(name, std::make_unique<SimMachine>(std::move(c)));
  }
}

bool SimCluster::has(std::string_view name) const { return machines_.find(name) != machines_.end(); }

SimMachine& SimCluster::machine(std::string_view name) {
  auto it = machines_.find(name);
  if (it == machines_.end()) fail(ErrorCode::NotFound, "unknown simulated machine " + std::string(name));
  return *it->second;
}

std::vector<std::string> SimCluster::names() const {
  std::vector<std::string> out;
  for (const auto& [n, _] : machines_) out.push_back(n);
  return out;
}

std::vector<SimEvent> SimCluster::sync(std::string_view name) {
  auto& m = machine(name);
  if (!clock_) return {};
  return m.advance_to(clock_->now() - origin_);
}

void SimCluster::sync_all() {
  for (const auto& [n, _] : machines_) sync(n);
}

CommandResult SimCluster::run(std::string_view name, std::string_view command) {
  sync(name);
  return machine(name).handle_command(command);
}

void SimCluster::stage_file(std::string_view name, const std::string& path, std::string bytes) {
  sync(name);
  machine(name).stage_file(path, std::move(bytes));
}

std::string SimCluster::read_file(std::string_view name, const std::string& path) {
  sync(name);
  return machine(name).read_file(path);
}

}  // namespace urgent::sim
