#include "urgent/machine_status.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <queue>
#include <tuple>

#include <nlohmann/json.hpp>

namespace urgent::status {

using batch::QueueEntry;
using batch::QueueState;
using nlohmann::json;

StatusConfig status_config_from_json(const json& j) {
  StatusConfig c;
  c.poll_interval_s = j.value("poll_interval_s", c.poll_interval_s);
  c.ratio_window = j.value("ratio_window", c.ratio_window);
  c.ratio_min_samples = j.value("ratio_min_samples", c.ratio_min_samples);
  c.reliability_threshold = j.value("reliability_threshold", c.reliability_threshold);
  c.reliability_window = j.value("reliability_window", c.reliability_window);
  c.stale_factor = j.value("stale_factor", c.stale_factor);
  if (!(c.poll_interval_s > 0)) fail(ErrorCode::InvalidArgument, "poll_interval_s must be > 0");
  if (c.ratio_window == 0) fail(ErrorCode::InvalidArgument, "ratio_window must be > 0");
  if (c.reliability_window == 0) fail(ErrorCode::InvalidArgument, "reliability_window must be > 0");
  if (!(c.reliability_threshold >= 0 && c.reliability_threshold <= 1))
    fail(ErrorCode::InvalidArgument, "reliability_threshold must lie in [0,1]");
  if (!(c.stale_factor > 0)) fail(ErrorCode::InvalidArgument, "stale_factor must be > 0");
  return c;
}

json to_json(const StatusConfig& c) {
  return json{{"poll_interval_s", c.poll_interval_s},
              {"ratio_window", c.ratio_window},
              {"ratio_min_samples", c.ratio_min_samples},
              {"reliability_threshold", c.reliability_threshold},
              {"reliability_window", c.reliability_window},
              {"stale_factor", c.stale_factor}};
}

double median(std::vector<double> v) {
  if (v.empty()) fail(ErrorCode::InvalidArgument, "median of nothing");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

std::int64_t scaled_runtime(double ratio, std::int64_t walltime_req_s) {
  return std::llround(ratio * static_cast<double>(walltime_req_s));
}

std::int64_t drain_wait(std::int64_t total_nodes, const std::vector<QueueEntry>& entries,
                        double ratio, std::int64_t nodes) {
  if (nodes < 1 || nodes > total_nodes)
    fail(ErrorCode::InvalidArgument, "candidate needs 1.." + std::to_string(total_nodes) + " nodes");
  using Release = std::pair<std::int64_t, std::int64_t>;  // (time, nodes)
  std::priority_queue<Release, std::vector<Release>, std::greater<>> releases;
  std::int64_t free = total_nodes;
  for (const auto& e : entries) {
    if (e.state != QueueState::RUNNING) continue;
    const auto remaining =
        std::max<std::int64_t>(0, scaled_runtime(ratio, e.walltime_req_s) - e.elapsed_s.value_or(0));
    releases.push({remaining, e.nodes});
    free -= e.nodes;
  }
  std::int64_t t = 0;
  auto start = [&](std::int64_t need) {
    while (free < need) {
      auto [at, n] = releases.top();
      releases.pop();
      t = std::max(t, at);
      free += n;
    }
    free -= need;
    return t;
  };
  for (const auto& e : entries) {
    if (e.state != QueueState::QUEUED || e.nodes > total_nodes || e.nodes < 1) continue;
    const auto s = start(e.nodes);
    releases.push({s + scaled_runtime(ratio, e.walltime_req_s), e.nodes});
  }
  return start(nodes);
}

std::vector<CompletionSample> infer_completions(const QueueSnapshot& prev,
                                                const QueueSnapshot& cur) {
  std::vector<CompletionSample> out;
  if (!prev.poll_ok || !cur.poll_ok) return out;
  std::map<std::string, QueueState> now;
  for (const auto& e : cur.entries) now[e.batch_id] = e.state;
  for (const auto& e : prev.entries) {
    if (e.state != QueueState::RUNNING || e.walltime_req_s <= 0 || !e.elapsed_s) continue;
    if (prev.elapsed_fallback_used && *e.elapsed_s == 0) continue;
    auto it = now.find(e.batch_id);
    if (it != now.end() && it->second != QueueState::EXITING) continue;
    out.push_back({cur.machine_id, e.batch_id,
                   static_cast<double>(*e.elapsed_s) / static_cast<double>(e.walltime_req_s),
                   cur.polled_at});
  }
  return out;
}

std::optional<Candidate> pick_best(const std::vector<Candidate>& cands, std::int64_t nodes,
                                   double reliability_threshold) {
  std::optional<Candidate> best;
  for (const auto& c : cands) {
    if (!c.available || c.reliability < reliability_threshold || c.total_nodes < nodes || !c.wait_s)
      continue;
    if (!best || *c.wait_s < *best->wait_s || (*c.wait_s == *best->wait_s && c.name < best->name))
      best = c;
  }
  return best;
}

// --- MachineStatus ---------------------------------------------------------

MachineStatus::MachineStatus(StateStore& store, machine::MachineInterface& machines,
                             StatusConfig cfg)
    : store_(store), machines_(machines), cfg_(cfg) {
  for (const auto& id : machines_.machine_ids()) poll_mu_[id] = std::make_unique<std::mutex>();
}

MachineStatus::~MachineStatus() { stop(); }

void MachineStatus::add_listener(PollListener fn) {
  std::lock_guard lock(listeners_mu_);
  listeners_.push_back(std::move(fn));
}

QueueSnapshot MachineStatus::poll_machine(const std::string& machine_id) {
  auto it = poll_mu_.find(machine_id);
  if (it == poll_mu_.end()) fail(ErrorCode::NotFound, "unknown machine " + machine_id);
  QueueSnapshot snap;
  {
    std::lock_guard lock(*it->second);
    // Jobs submitted before the status command ran; later ones are left for
    // the next round so a fresh submission is never mistaken for a finished one.
    std::vector<JobRecord> tracked;
    for (auto st : {JobStatus::QUEUED, JobStatus::RUNNING}) {
      JobQuery q;
      q.machine_id = machine_id;
      q.status = st;
      for (auto& j : store_.query_jobs(q)) tracked.push_back(std::move(j));
    }
    auto prev = store_.latest_snapshot(machine_id, true);

    snap.machine_id = machine_id;
    try {
      auto parsed = machines_.query_queue(machine_id);
      snap.entries = std::move(parsed.entries);
      snap.elapsed_fallback_used = parsed.elapsed_fallback_used;
      snap.poll_ok = true;
    } catch (const Error&) {
      snap.poll_ok = false;
    }
    snap.polled_at = store_.clock().now();
    store_.add_snapshot(snap);
    if (snap.poll_ok && prev) store_.add_completions(infer_completions(*prev, snap));
    store_.set_machine_health(machine_id, snap.poll_ok, reliability(machine_id).reliability);
    if (snap.poll_ok) reconcile(snap, tracked);
  }
  std::vector<PollListener> ls;
  {
    std::lock_guard lock(listeners_mu_);
    ls = listeners_;
  }
  for (auto& fn : ls) fn(snap);
  return snap;
}

void MachineStatus::poll_all() {
  for (const auto& id : machines_.machine_ids()) poll_machine(id);
}

void MachineStatus::reconcile(const QueueSnapshot& snap, const std::vector<JobRecord>& tracked) {
  std::map<std::string, const QueueEntry*> by_id;
  for (const auto& e : snap.entries) by_id[e.batch_id] = &e;
  for (const auto& job : tracked) {
    auto it = by_id.find(job.batch_id);
    const QueueEntry* e = it == by_id.end() ? nullptr : it->second;
    try {
      if (e && e->state == QueueState::RUNNING) {
        if (job.status == JobStatus::QUEUED)
          store_.update_job_status(job.job_id, JobStatus::RUNNING,
                                   {snap.polled_at - e->elapsed_s.value_or(0), std::nullopt});
      } else if (!e || e->state == QueueState::EXITING) {
        if (job.status == JobStatus::QUEUED)
          store_.update_job_status(job.job_id, JobStatus::RUNNING, {snap.polled_at, std::nullopt});
        store_.update_job_status(job.job_id, JobStatus::COMPLETED, {std::nullopt, snap.polled_at});
      }
    } catch (const Error& err) {
      // Someone else (a cancel) moved the job meanwhile.
      if (err.code() != ErrorCode::InvalidTransition) throw;
    }
  }
}

RatioEstimate MachineStatus::walltime_ratio(const std::string& machine_id) const {
  auto ratios = store_.recent_ratios(machine_id, cfg_.ratio_window);
  if (ratios.empty() || ratios.size() < cfg_.ratio_min_samples) return {1.0, 0};
  const auto n = ratios.size();
  return {median(std::move(ratios)), n};
}

WaitEstimate MachineStatus::estimate_wait(const std::string& machine_id, std::int64_t nodes,
                                          std::int64_t walltime_req_s) const {
  const auto m = store_.get_machine(machine_id);
  auto snap = store_.latest_snapshot(machine_id);
  if (!snap) fail(ErrorCode::NoData, m.name + " has never been polled");
  if (!snap->poll_ok) fail(ErrorCode::NoData, m.name + ": latest poll failed");
  const auto age = store_.clock().now() - snap->polled_at;
  if (static_cast<double>(age) > cfg_.stale_factor * cfg_.poll_interval_s)
    fail(ErrorCode::StaleData, m.name + ": snapshot is " + std::to_string(age) + " s old");
  if (walltime_req_s < 0) fail(ErrorCode::InvalidArgument, "walltime must be >= 0");
  const auto r = walltime_ratio(machine_id);
  WaitEstimate w;
  w.machine_id = machine_id;
  w.nodes = nodes;
  w.walltime_req_s = walltime_req_s;
  w.ratio_used = r.ratio;
  w.sample_size = r.sample_size;
  // Our own submissions since the poll are queued behind everything it saw.
  auto entries = snap->entries;
  std::set<std::string> seen;
  for (const auto& e : entries) seen.insert(e.batch_id);
  auto mine = store_.query_jobs(JobQuery{std::nullopt, machine_id, JobStatus::QUEUED});
  std::sort(mine.begin(), mine.end(), [](const JobRecord& a, const JobRecord& b) {
    return std::tie(a.submitted_at, a.seq) < std::tie(b.submitted_at, b.seq);
  });
  for (const auto& j : mine) {
    if (j.batch_id.empty() || seen.count(j.batch_id)) continue;
    batch::QueueEntry e;
    e.batch_id = j.batch_id;
    e.state = batch::QueueState::QUEUED;
    e.nodes = j.nodes;
    e.walltime_req_s = j.walltime_req_s;
    entries.push_back(std::move(e));
    ++w.unpolled_submissions;
  }
  w.wait_s = drain_wait(m.total_nodes, entries, r.ratio, nodes);
  return w;
}

ReliabilityReport MachineStatus::reliability(const std::string& machine_id) const {
  ReliabilityReport r;
  r.machine_id = machine_id;
  for (const auto& s : store_.recent_snapshots(machine_id, cfg_.reliability_window)) {
    ++r.window_polls;
    if (s.poll_ok) ++r.ok_polls;
  }
  r.reliability = r.window_polls ? static_cast<double>(r.ok_polls) / r.window_polls : 1.0;
  return r;
}

std::vector<Candidate> MachineStatus::candidates(std::int64_t nodes, std::int64_t walltime_req_s,
                                                 const std::vector<std::string>& ids) const {
  std::vector<Candidate> out;
  for (const auto& id : ids) {
    const auto m = store_.get_machine(id);
    Candidate c{m.machine_id, m.name, m.available, m.reliability, m.total_nodes, std::nullopt};
    if (nodes <= m.total_nodes) {
      try {
        c.wait_s = estimate_wait(id, nodes, walltime_req_s).wait_s;
      } catch (const Error&) {
      }
    }
    out.push_back(std::move(c));
  }
  return out;
}

std::string MachineStatus::select_machine(std::int64_t nodes, std::int64_t walltime_req_s,
                                          std::vector<std::string> ids,
                                          const std::set<std::string>& exclude) const {
  if (ids.empty()) ids = machines_.machine_ids();
  if (ids.empty()) fail(ErrorCode::NoEligibleMachine, "no machines registered");
  std::erase_if(ids, [&](const std::string& id) { return exclude.count(id) > 0; });
  auto best = pick_best(candidates(nodes, walltime_req_s, ids), nodes, cfg_.reliability_threshold);
  if (!best)
    fail(ErrorCode::NoEligibleMachine,
         "no eligible machine for " + std::to_string(nodes) + " nodes");
  return best->machine_id;
}

void MachineStatus::start() {
  std::lock_guard lock(run_mu_);
  if (running_) return;
  running_ = true;
  for (const auto& id : machines_.machine_ids()) threads_.emplace_back(&MachineStatus::poller, this, id);
}

void MachineStatus::stop() {
  std::vector<std::thread> ts;
  {
    std::lock_guard lock(run_mu_);
    running_ = false;
    ts.swap(threads_);
  }
  run_cv_.notify_all();
  for (auto& t : ts) t.join();
}

void MachineStatus::poller(std::string machine_id) {
  const auto period = store_.clock().to_wall(cfg_.poll_interval_s);
  while (true) {
    {
      std::lock_guard lock(run_mu_);
      if (!running_) return;
    }
    try {
      poll_machine(machine_id);
    } catch (const std::exception&) {
      // A listener failed; the next round tries again.
    }
    std::unique_lock lock(run_mu_);
    run_cv_.wait_for(lock, period, [&] { return !running_; });
    if (!running_) return;
  }
}

}  // namespace urgent::status
