#include "urgent/batch.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <regex>

namespace urgent::batch {

namespace {

bool all_digits(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(),
                                   [](unsigned char c) { return std::isdigit(c); });
}

std::optional<std::int64_t> to_int(std::string_view s) {
  if (!all_digits(s)) return std::nullopt;
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

/// Leading run of digits, e.g. "4:ncpus=36" -> 4.
std::optional<std::int64_t> leading_int(std::string_view s) {
  std::size_t n = 0;
  while (n < s.size() && std::isdigit(static_cast<unsigned char>(s[n]))) ++n;
  return to_int(s.substr(0, n));
}

bool matches_token(std::string_view s, std::size_t max_len) {
  if (s.empty() || s.size() > max_len) return false;
  return std::all_of(s.begin(), s.end(), [](unsigned char c) {
    return std::isalnum(c) || c == '_' || c == '.' || c == '-';
  });
}

std::string two(std::int64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%02lld", static_cast<long long>(v));
  return buf;
}

QueueState map_pbs_state(std::string_view code) {
  if (code == "Q" || code == "W" || code == "T") return QueueState::QUEUED;
  if (code == "R" || code == "B") return QueueState::RUNNING;
  if (code == "H" || code == "S" || code == "U") return QueueState::HELD;
  if (code == "E" || code == "X" || code == "F") return QueueState::EXITING;
  return QueueState::UNKNOWN;
}

QueueState map_slurm_state(std::string_view s) {
  if (s == "PENDING" || s == "REQUEUED" || s == "REQUEUE_FED" || s == "RESIZING")
    return QueueState::QUEUED;
  if (s == "RUNNING" || s == "CONFIGURING" || s == "SIGNALING" || s == "STAGE_OUT")
    return QueueState::RUNNING;
  if (s == "SUSPENDED" || s == "STOPPED" || s == "REQUEUE_HOLD" || s == "RESV_DEL_HOLD" ||
      s == "SPECIAL_EXIT")
    return QueueState::HELD;
  if (s == "COMPLETING" || s == "COMPLETED" || s == "CANCELLED" || s == "FAILED" ||
      s == "TIMEOUT" || s == "NODE_FAIL" || s == "PREEMPTED" || s == "BOOT_FAIL" ||
      s == "DEADLINE" || s == "OUT_OF_MEMORY" || s == "REVOKED")
    return QueueState::EXITING;
  return QueueState::UNKNOWN;
}

}  // namespace

const char* to_string(Scheduler s) {
  switch (s) {
    case Scheduler::PBS: return "PBS";
    case Scheduler::SLURM: return "SLURM";
  }
  return "?";
}

Scheduler parse_scheduler(std::string_view s) {
  if (s == "PBS" || s == "pbs") return Scheduler::PBS;
  if (s == "SLURM" || s == "slurm") return Scheduler::SLURM;
  fail(ErrorCode::Unsupported, "unsupported scheduler: " + std::string(s));
}

const char* to_string(QueueState s) {
  switch (s) {
    case QueueState::QUEUED: return "QUEUED";
    case QueueState::RUNNING: return "RUNNING";
    case QueueState::HELD: return "HELD";
    case QueueState::EXITING: return "EXITING";
    case QueueState::UNKNOWN: return "UNKNOWN";
  }
  return "UNKNOWN";
}

QueueState parse_queue_state(std::string_view s) {
  if (s == "QUEUED") return QueueState::QUEUED;
  if (s == "RUNNING") return QueueState::RUNNING;
  if (s == "HELD") return QueueState::HELD;
  if (s == "EXITING") return QueueState::EXITING;
  return QueueState::UNKNOWN;
}

void validate(const SubmitSpec& spec) {
  if (spec.nodes < 1) fail(ErrorCode::InvalidArgument, "nodes must be >= 1");
  if (spec.walltime_req_s < 1) fail(ErrorCode::InvalidArgument, "walltime must be >= 1 s");
  if (!matches_token(spec.job_name, 64))
    fail(ErrorCode::InvalidArgument, "job_name must match [A-Za-z0-9_.-]{1,64}");
  if (!matches_token(spec.account, 128))
    fail(ErrorCode::InvalidArgument, "account must match [A-Za-z0-9_.-]+");
  if (!matches_token(spec.queue, 128))
    fail(ErrorCode::InvalidArgument, "queue must match [A-Za-z0-9_.-]+");
  if (spec.script_path.empty() ||
      spec.script_path.find_first_of(" \t\r\n\"'") != std::string::npos)
    fail(ErrorCode::InvalidArgument, "script_path must be non-empty without whitespace");
}

// --- durations -------------------------------------------------------------

std::string seconds_to_hms(std::int64_t seconds) {
  if (seconds < 0) fail(ErrorCode::InvalidArgument, "negative duration");
  return two(seconds / 3600) + ":" + two(seconds / 60 % 60) + ":" + two(seconds % 60);
}

std::optional<std::int64_t> try_parse_duration(std::string_view text) {
  text = trim(text);
  if (text.empty()) return std::nullopt;
  std::int64_t days = 0;
  bool has_days = false;
  if (auto dash = text.find('-'); dash != std::string_view::npos) {
    auto d = to_int(text.substr(0, dash));
    if (!d) return std::nullopt;
    days = *d;
    has_days = true;
    text = text.substr(dash + 1);
  }
  auto parts = split(text, ':');
  if (parts.size() > 3) return std::nullopt;
  std::vector<std::int64_t> v;
  for (auto p : parts) {
    auto n = to_int(p);
    if (!n) return std::nullopt;
    v.push_back(*n);
  }
  std::int64_t h = 0, m = 0, s = 0;
  if (has_days) {
    // D-HH, D-HH:MM, D-HH:MM:SS
    h = v[0];
    if (v.size() > 1) m = v[1];
    if (v.size() > 2) s = v[2];
  } else if (v.size() == 1) {
    s = v[0];
  } else if (v.size() == 2) {
    m = v[0];
    s = v[1];
  } else {
    h = v[0];
    m = v[1];
    s = v[2];
  }
  if ((has_days || v.size() > 1) && (m > 59 || s > 59)) return std::nullopt;
  return ((days * 24 + h) * 60 + m) * 60 + s;
}

std::int64_t hms_to_seconds(std::string_view text) {
  auto v = try_parse_duration(text);
  if (!v) fail(ErrorCode::InvalidArgument, "bad duration: " + std::string(text));
  return *v;
}

std::string slurm_duration(std::int64_t seconds) {
  if (seconds < 0) fail(ErrorCode::InvalidArgument, "negative duration");
  std::int64_t days = seconds / 86400;
  std::int64_t hours = seconds / 3600 % 24;
  std::int64_t minutes = seconds / 60 % 60;
  std::int64_t secs = seconds % 60;
  if (days > 0)
    return std::to_string(days) + "-" + two(hours) + ":" + two(minutes) + ":" + two(secs);
  if (hours > 0) return std::to_string(hours) + ":" + two(minutes) + ":" + two(secs);
  return std::to_string(minutes) + ":" + two(secs);
}

// --- commands ---------------------------------------------------------------

std::string render_submit(Scheduler scheduler, const SubmitSpec& spec) {
  validate(spec);
  const std::string wall = seconds_to_hms(spec.walltime_req_s);
  switch (scheduler) {
    case Scheduler::PBS:
      return "qsub -N " + spec.job_name + " -q " + spec.queue + " -A " + spec.account +
             " -l select=" + std::to_string(spec.nodes) + ",walltime=" + wall + " " +
             spec.script_path;
    case Scheduler::SLURM:
      return "sbatch --job-name=" + spec.job_name + " --partition=" + spec.queue +
             " --account=" + spec.account + " --nodes=" + std::to_string(spec.nodes) +
             " --time=" + wall + " " + spec.script_path;
  }
  fail(ErrorCode::Unsupported, "unsupported scheduler");
}

std::string render_cancel(Scheduler scheduler, std::string_view batch_id) {
  switch (scheduler) {
    case Scheduler::PBS: return "qdel " + std::string(batch_id);
    case Scheduler::SLURM: return "scancel " + std::string(batch_id);
  }
  fail(ErrorCode::Unsupported, "unsupported scheduler");
}

std::string render_status(Scheduler scheduler) {
  switch (scheduler) {
    case Scheduler::PBS: return "qstat -f";
    case Scheduler::SLURM: return "squeue -a -h -o \"" + std::string(kSlurmFormat) + "\"";
  }
  fail(ErrorCode::Unsupported, "unsupported scheduler");
}

std::string parse_submit_reply(Scheduler scheduler, std::string_view stdout_text) {
  switch (scheduler) {
    case Scheduler::PBS: {
      for (auto line : split(stdout_text, '\n')) {
        line = trim(line);
        if (line.empty()) continue;
        auto token = line.substr(0, line.find_first_of(" \t"));
        if (!token.empty() && std::isdigit(static_cast<unsigned char>(token[0])))
          return std::string(token);
        break;
      }
      throw ParseError("unrecognized qsub reply", std::string(stdout_text));
    }
    case Scheduler::SLURM: {
      static const std::regex re(R"(Submitted batch job (\d+))");
      std::smatch m;
      std::string text(stdout_text);
      if (std::regex_search(text, m, re)) return m[1].str();
      throw ParseError("unrecognized sbatch reply", text);
    }
  }
  fail(ErrorCode::Unsupported, "unsupported scheduler");
}

QueueParse parse_queue_status(Scheduler scheduler, std::string_view stdout_text) {
  switch (scheduler) {
    case Scheduler::PBS: return parse_pbs_status(stdout_text);
    case Scheduler::SLURM: return parse_slurm_status(stdout_text);
  }
  fail(ErrorCode::Unsupported, "unsupported scheduler");
}

// --- PBS qstat -f -----------------------------------------------------------

namespace {

struct PbsBlock {
  std::string header;  // full "Job Id: ..." line
  std::string raw;
  std::vector<std::pair<std::string, std::string>> attrs;
};

const std::string* find_attr(const PbsBlock& b, std::string_view key) {
  for (const auto& [k, v] : b.attrs)
    if (k == key) return &v;
  return nullptr;
}

}  // namespace

QueueParse parse_pbs_status(std::string_view text) {
  QueueParse out;
  std::vector<PbsBlock> blocks;
  std::optional<ParseError> structural;

  for (auto line : split(text, '\n')) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (trim(line).empty()) continue;
    auto t = trim(line);
    if (starts_with(t, "Job Id:")) {
      blocks.push_back({std::string(t), std::string(line) + "\n", {}});
      continue;
    }
    if (blocks.empty()) {
      structural = ParseError("PBS output does not start with a 'Job Id:' line",
                              std::string(line));
      break;
    }
    auto& b = blocks.back();
    b.raw += std::string(line) + "\n";
    if (line.front() == '\t' && !b.attrs.empty()) {
      b.attrs.back().second += std::string(t);  // wrapped continuation
      continue;
    }
    auto eq = t.find(" = ");
    if (eq == std::string_view::npos) {
      b.attrs.emplace_back("", "");  // poison marker, reported below
      b.attrs.back().second = std::string(t);
      continue;
    }
    b.attrs.emplace_back(std::string(trim(t.substr(0, eq))), std::string(trim(t.substr(eq + 3))));
  }

  for (const auto& b : blocks) {
    auto bad = [&](const std::string& why) {
      out.error = ParseError(b.header + ": " + why, b.raw);
    };
    std::string id(trim(std::string_view(b.header).substr(7)));
    if (id.empty()) { bad("empty job id"); break; }
    if (find_attr(b, "")) { bad("line without 'key = value'"); break; }

    QueueEntry e;
    e.batch_id = id;
    const auto* state = find_attr(b, "job_state");
    const auto* queue = find_attr(b, "queue");
    const auto* wall = find_attr(b, "Resource_List.walltime");
    const auto* owner = find_attr(b, "Job_Owner");
    if (!state) { bad("missing job_state"); break; }
    if (!queue) { bad("missing queue"); break; }
    if (!wall) { bad("missing Resource_List.walltime"); break; }
    if (!owner) { bad("missing Job_Owner"); break; }

    std::optional<std::int64_t> nodes;
    if (const auto* v = find_attr(b, "Resource_List.nodect")) nodes = to_int(*v);
    else if (const auto* v = find_attr(b, "Resource_List.select")) nodes = leading_int(*v);
    else if (const auto* v = find_attr(b, "Resource_List.nodes")) nodes = leading_int(*v);
    if (!nodes || *nodes < 1) { bad("missing or invalid node count"); break; }

    auto wall_s = try_parse_duration(*wall);
    if (!wall_s) { bad("invalid Resource_List.walltime"); break; }

    e.state = map_pbs_state(*state);
    e.queue = *queue;
    e.nodes = *nodes;
    e.walltime_req_s = *wall_s;
    e.owner = owner->substr(0, owner->find('@'));
    if (const auto* n = find_attr(b, "Job_Name")) e.name = *n;

    if (e.state == QueueState::RUNNING) {
      const auto* used = find_attr(b, "resources_used.walltime");
      std::optional<std::int64_t> el = used ? try_parse_duration(*used) : std::nullopt;
      if (used && !el) { bad("invalid resources_used.walltime"); break; }
      if (!el) out.elapsed_fallback_used = true;
      e.elapsed_s = el.value_or(0);
    }
    out.entries.push_back(std::move(e));
  }
  if (!out.error && structural) out.error = structural;
  return out;
}

// --- Slurm squeue -------------------------------------------------------------

QueueParse parse_slurm_status(std::string_view text) {
  QueueParse out;
  for (auto line : split(text, '\n')) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (trim(line).empty()) continue;
    auto f = split(line, '|');
    if (!f.empty() && trim(f[0]) == "JOBID") continue;
    auto bad = [&](const std::string& why) {
      out.error = ParseError("squeue line '" + std::string(line) + "': " + why, std::string(line));
    };
    if (f.size() != 8) { bad("expected 8 '|' separated fields"); break; }
    for (auto& x : f) x = trim(x);

    QueueEntry e;
    e.batch_id = std::string(f[0]);
    e.name = std::string(f[1]);
    e.owner = std::string(f[2].substr(0, f[2].find('@')));
    e.state = map_slurm_state(f[3]);
    e.queue = std::string(f[7]);
    if (e.batch_id.empty()) { bad("empty job id"); break; }

    auto nodes = leading_int(f[6]);
    if (!nodes || *nodes < 1) { bad("invalid node count"); break; }
    e.nodes = *nodes;

    if (f[5] == "UNLIMITED" || f[5] == "NOT_SET" || f[5] == "INVALID") {
      e.walltime_req_s = 0;
    } else if (auto w = try_parse_duration(f[5])) {
      e.walltime_req_s = *w;
    } else {
      bad("invalid time limit");
      break;
    }

    if (e.state == QueueState::RUNNING) {
      auto el = try_parse_duration(f[4]);
      if (!el) out.elapsed_fallback_used = true;
      e.elapsed_s = el.value_or(0);
    }
    out.entries.push_back(std::move(e));
  }
  return out;
}

}  // namespace urgent::batch
