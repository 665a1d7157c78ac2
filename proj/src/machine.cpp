#include "urgent/machine.hpp"

#include <algorithm>
#include <chrono>
#include <future>
#include <set>
#include <thread>

#include <nlohmann/json.hpp>

#include "urgent/simulator.hpp"

namespace urgent::machine {

using nlohmann::json;

MachineConfig machine_config_from_json(const json& j) {
  MachineConfig m;
  m.name = j.at("name").get<std::string>();
  m.scheduler = batch::parse_scheduler(j.at("scheduler").get<std::string>());
  m.transport = j.value("transport", std::string("sim"));
  m.endpoint = j.value("endpoint", std::string());
  m.account = j.value("account", std::string());
  m.identity = j.value("identity", m.account);
  m.queue = j.value("queue", std::string("standard"));
  m.nodes = j.value("nodes", std::int64_t{1});
  m.cores_per_node = j.value("cores_per_node", std::int64_t{1});
  if (m.name.empty()) fail(ErrorCode::InvalidArgument, "machine name is empty");
  if (m.transport != "sim" && m.transport != "ssh")
    fail(ErrorCode::InvalidArgument, m.name + ": transport must be sim or ssh");
  if (m.nodes < 1 || m.cores_per_node < 1)
    fail(ErrorCode::InvalidArgument, m.name + ": node counts must be positive");
  return m;
}

json to_json(const MachineConfig& m) {
  return json{{"name", m.name},         {"scheduler", batch::to_string(m.scheduler)},
              {"transport", m.transport}, {"endpoint", m.endpoint},
              {"account", m.account},   {"identity", m.identity},
              {"queue", m.queue},       {"nodes", m.nodes},
              {"cores_per_node", m.cores_per_node}};
}

// --- SimTransport ----------------------------------------------------------

namespace {

std::string sim_name(const Target& t) {
  constexpr std::string_view scheme = "sim://";
  if (starts_with(t.endpoint, scheme)) return t.endpoint.substr(scheme.size());
  return t.endpoint.empty() ? t.machine : t.endpoint;
}

}  // namespace

CommandResult SimTransport::run_command(const Target& t, const std::string& command) {
  return cluster_.run(sim_name(t), command);
}

void SimTransport::put_file(const Target& t, const std::string& remote_path,
                            const std::string& bytes) {
  cluster_.stage_file(sim_name(t), remote_path, bytes);
}

std::string SimTransport::get_file(const Target& t, const std::string& remote_path) {
  return cluster_.read_file(sim_name(t), remote_path);
}

// --- TimedTransport --------------------------------------------------------

TimedTransport::TimedTransport(std::shared_ptr<Transport> inner, double timeout_s)
    : inner_(std::move(inner)), timeout_s_(timeout_s) {
  if (!inner_) fail(ErrorCode::InvalidArgument, "TimedTransport needs an inner transport");
  if (!(timeout_s_ > 0)) fail(ErrorCode::InvalidArgument, "transport timeout must be positive");
}

namespace {

// The worker owns copies of everything it touches so an abandoned call can
// finish on its own after the caller has given up.
template <typename R, typename F>
R bounded(double timeout_s, const std::string& machine, F fn) {
  auto task = std::make_shared<std::packaged_task<R()>>(std::move(fn));
  auto fut = task->get_future();
  std::thread([task] { (*task)(); }).detach();
  if (fut.wait_for(std::chrono::duration<double>(timeout_s)) != std::future_status::ready)
    fail(ErrorCode::MachineUnreachable, machine + ": transport call timed out");
  return fut.get();
}

}  // namespace

CommandResult TimedTransport::run_command(const Target& t, const std::string& command) {
  auto inner = inner_;
  return bounded<CommandResult>(timeout_s_, t.machine,
                                [inner, t, command] { return inner->run_command(t, command); });
}

void TimedTransport::put_file(const Target& t, const std::string& remote_path,
                              const std::string& bytes) {
  auto inner = inner_;
  bounded<void>(timeout_s_, t.machine,
                [inner, t, remote_path, bytes] { inner->put_file(t, remote_path, bytes); });
}

std::string TimedTransport::get_file(const Target& t, const std::string& remote_path) {
  auto inner = inner_;
  return bounded<std::string>(timeout_s_, t.machine,
                              [inner, t, remote_path] { return inner->get_file(t, remote_path); });
}

// --- MachineInterface ------------------------------------------------------

PartialFetch::PartialFetch(std::vector<std::string> ok, std::vector<std::string> missing)
    : Error(ErrorCode::PartialFetch,
            std::to_string(missing.size()) + " of " + std::to_string(ok.size() + missing.size()) +
                " remote files missing"),
      ok_(std::move(ok)),
      missing_(std::move(missing)) {}

std::string job_dir(const JobRecord& job) {
  return "/work/" + job.activity_id + "/" + job.job_id + "/";
}

namespace {

std::string basename_of(const std::string& path) {
  auto pos = path.find_last_of('/');
  return pos == std::string::npos ? path : path.substr(pos + 1);
}

std::string first_line(std::string_view s) {
  s = trim(s);
  auto nl = s.find('\n');
  return std::string(trim(s.substr(0, nl)));
}

}  // namespace

MachineInterface::MachineInterface(StateStore& store, std::shared_ptr<Transport> transport,
                                   std::vector<MachineConfig> machines, Options opts)
    : store_(store), transport_(std::move(transport)), configs_(std::move(machines)),
      opts_(opts) {
  if (!transport_) fail(ErrorCode::InvalidArgument, "MachineInterface needs a transport");
  std::set<std::string> names;
  for (auto& cfg : configs_) {
    if (!names.insert(cfg.name).second)
      fail(ErrorCode::InvalidArgument, "duplicate machine " + cfg.name);
    if (cfg.transport == "ssh")
      fail(ErrorCode::Unsupported, cfg.name + ": the ssh transport is not built in");
    if (cfg.identity.empty()) cfg.identity = cfg.account;
    MachineRecord rec;
    rec.name = cfg.name;
    rec.scheduler = cfg.scheduler;
    rec.total_nodes = cfg.nodes;
    rec.cores_per_node = cfg.cores_per_node;
    rec = store_.upsert_machine(rec);
    auto s = std::make_unique<Slot>();
    s->cfg = cfg;
    s->machine_id = rec.machine_id;
    s->target = {cfg.name, cfg.endpoint, cfg.identity};
    slots_.emplace(rec.machine_id, std::move(s));
  }
}

MachineInterface::Slot& MachineInterface::slot(const std::string& machine_id) {
  auto it = slots_.find(machine_id);
  if (it == slots_.end()) fail(ErrorCode::NotFound, "unknown machine " + machine_id);
  return *it->second;
}

const MachineInterface::Slot& MachineInterface::slot(const std::string& machine_id) const {
  auto it = slots_.find(machine_id);
  if (it == slots_.end()) fail(ErrorCode::NotFound, "unknown machine " + machine_id);
  return *it->second;
}

const MachineConfig& MachineInterface::config(const std::string& machine_id) const {
  return slot(machine_id).cfg;
}

std::string MachineInterface::machine_id(const std::string& name) const {
  for (const auto& [id, s] : slots_)
    if (s->cfg.name == name) return id;
  fail(ErrorCode::NotFound, "unknown machine " + name);
}

std::vector<std::string> MachineInterface::machine_ids() const {
  std::vector<std::string> out;
  for (const auto& cfg : configs_) out.push_back(machine_id(cfg.name));
  return out;
}

void MachineInterface::record(const Slot& s, const char* op, const std::string& detail, bool ok) {
  std::lock_guard lock(audit_mu_);
  audit_.push_back({store_.clock().now(), s.cfg.name, s.target.identity, op, detail, ok});
  while (audit_.size() > opts_.audit_capacity) audit_.pop_front();
}

std::vector<AuditEntry> MachineInterface::audit() const {
  std::lock_guard lock(audit_mu_);
  return {audit_.begin(), audit_.end()};
}

CommandResult MachineInterface::run(Slot& s, const std::string& command) {
  CommandResult r;
  try {
    r = transport_->run_command(s.target, command);
  } catch (const Error& e) {
    record(s, "run", command, false);
    if (e.code() == ErrorCode::MachineUnreachable) throw;
    fail(ErrorCode::MachineUnreachable, s.cfg.name + ": " + e.what());
  }
  record(s, "run", command, r.exit_code == 0);
  if (r.exit_code == 255)
    fail(ErrorCode::MachineUnreachable, s.cfg.name + ": " + first_line(r.err));
  return r;
}

void MachineInterface::put(Slot& s, const std::string& path, const std::string& bytes) {
  for (int attempt = 1;; ++attempt) {
    try {
      transport_->put_file(s.target, path, bytes);
      record(s, "put", path, true);
      return;
    } catch (const Error& e) {
      record(s, "put", path, false);
      if (e.code() != ErrorCode::MachineUnreachable || attempt == 2) throw;
    }
  }
}

std::string MachineInterface::get(Slot& s, const std::string& path) {
  for (int attempt = 1;; ++attempt) {
    try {
      auto bytes = transport_->get_file(s.target, path);
      record(s, "get", path, true);
      return bytes;
    } catch (const Error& e) {
      record(s, "get", path, false);
      if (e.code() != ErrorCode::MachineUnreachable || attempt == 2) throw;
    }
  }
}

std::string MachineInterface::submit_job(const std::string& job_id, const std::string& script,
                                         const std::string& job_name) {
  auto job = store_.get_job(job_id);
  if (job.status != JobStatus::PENDING_SUBMIT)
    fail(ErrorCode::InvalidState, job_id + " is " + to_string(job.status) + ", not PENDING_SUBMIT");
  if (job.machine_id.empty()) fail(ErrorCode::InvalidState, job_id + " is not placed on a machine");
  auto& s = slot(job.machine_id);

  batch::SubmitSpec spec;
  spec.nodes = job.nodes;
  spec.walltime_req_s = job.walltime_req_s;
  spec.account = s.cfg.account;
  spec.queue = s.cfg.queue;
  spec.script_path = job_dir(job) + "job.sh";
  spec.job_name = job_name.empty() ? job.link.stage.empty() ? std::string("job") : job.link.stage
                                   : job_name;
  batch::validate(spec);

  std::lock_guard lock(s.mu);
  put(s, spec.script_path, script);
  auto r = run(s, batch::render_submit(s.cfg.scheduler, spec));
  if (r.exit_code != 0) {
    auto msg = first_line(r.err.empty() ? r.out : r.err);
    fail(ErrorCode::SubmitRejected, msg.empty() ? "exit " + std::to_string(r.exit_code) : msg);
  }
  std::string batch_id;
  try {
    batch_id = batch::parse_submit_reply(s.cfg.scheduler, r.out);
  } catch (const Error& e) {
    fail(ErrorCode::SubmitRejected, std::string("unreadable submit reply: ") + e.what());
  }
  store_.record_submission(job_id, batch_id);
  return batch_id;
}

void MachineInterface::cancel_job(const std::string& job_id) {
  auto job = store_.get_job(job_id);
  if (job.status == JobStatus::CANCELLED) return;
  if (is_terminal(job.status))
    fail(ErrorCode::InvalidState, job_id + " already " + to_string(job.status));
  if (!job.batch_id.empty()) {
    auto& s = slot(job.machine_id);
    std::lock_guard lock(s.mu);
    // Any other nonzero exit means the scheduler no longer knows the job.
    run(s, batch::render_cancel(s.cfg.scheduler, job.batch_id));
  }
  job = store_.get_job(job_id);
  if (!is_terminal(job.status)) store_.update_job_status(job_id, JobStatus::CANCELLED);
}

std::vector<ObjectHandle> MachineInterface::fetch_results(
    const std::string& job_id, const std::vector<std::string>& remote_paths) {
  auto job = store_.get_job(job_id);
  if (job.status != JobStatus::COMPLETED)
    fail(ErrorCode::InvalidState, job_id + " is " + to_string(job.status) + ", not COMPLETED");
  auto& s = slot(job.machine_id);

  std::vector<ObjectHandle> handles;
  std::vector<std::string> ok, missing;
  {
    std::lock_guard lock(s.mu);
    for (const auto& path : remote_paths) {
      std::string bytes;
      try {
        bytes = get(s, path);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::NotFound) throw;
        missing.push_back(path);
        continue;
      }
      auto key = job.activity_id + "/" + job.job_id + "/" + basename_of(path);
      handles.push_back(store_.put_object("results", key, bytes));
      ok.push_back(path);
    }
  }

  auto ids = job.result_handles;
  for (const auto& h : handles)
    if (std::find(ids.begin(), ids.end(), h.handle_id) == ids.end()) ids.push_back(h.handle_id);
  if (ids != job.result_handles) store_.set_job_results(job_id, ids);
  if (!missing.empty()) throw PartialFetch(std::move(ok), std::move(missing));
  return handles;
}

void MachineInterface::transfer_between(const std::string& handle_or_uri,
                                        const std::string& dest_machine_id,
                                        const std::string& remote_path) {
  auto handle = store_.get_handle(handle_or_uri);
  auto bytes = store_.get_object(handle_or_uri);
  auto& s = slot(dest_machine_id);
  std::lock_guard lock(s.mu);
  for (int attempt = 1; attempt <= 2; ++attempt) {
    put(s, remote_path, bytes);
    if (sha256_hex(get(s, remote_path)) == handle.sha256) return;
    record(s, "verify", remote_path, false);
  }
  fail(ErrorCode::TransferCorrupt, remote_path + " on " + s.cfg.name + " failed digest check twice");
}

batch::QueueParse MachineInterface::query_queue(const std::string& machine_id) {
  auto& s = slot(machine_id);
  std::lock_guard lock(s.mu);
  auto r = run(s, batch::render_status(s.cfg.scheduler));
  if (r.exit_code != 0)
    fail(ErrorCode::MachineUnreachable, s.cfg.name + ": status command exit " +
                                            std::to_string(r.exit_code) + " " + first_line(r.err));
  return batch::parse_queue_status(s.cfg.scheduler, r.out);
}

}  // namespace urgent::machine
