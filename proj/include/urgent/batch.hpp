#pragma once

// Scheduler dialect handling: PBS and Slurm submit rendering, submit-reply
// parsing and full-queue status parsing into normalized records.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "urgent/common.hpp"

namespace urgent::batch {

enum class Scheduler { PBS, SLURM };

const char* to_string(Scheduler s);
/// Accepts "PBS"/"pbs" and "SLURM"/"slurm"; anything else is Unsupported.
Scheduler parse_scheduler(std::string_view s);

struct SubmitSpec {
  std::int64_t nodes = 1;
  std::int64_t walltime_req_s = 1;
  std::string account;
  std::string queue;
  std::string script_path;
  std::string job_name;

  bool operator==(const SubmitSpec&) const = default;
};

/// Throws InvalidArgument naming the first violated field.
void validate(const SubmitSpec& spec);

enum class QueueState { QUEUED, RUNNING, HELD, EXITING, UNKNOWN };

const char* to_string(QueueState s);
QueueState parse_queue_state(std::string_view s);

struct QueueEntry {
  std::string batch_id;
  std::string name;
  std::string queue;
  QueueState state = QueueState::UNKNOWN;
  std::int64_t nodes = 1;
  std::int64_t walltime_req_s = 0;
  std::optional<std::int64_t> elapsed_s;  // RUNNING only
  std::string owner;

  bool operator==(const QueueEntry&) const = default;
};

/// ParseError that keeps the offending text.
class ParseError : public Error {
 public:
  ParseError(const std::string& message, std::string raw)
      : Error(ErrorCode::ParseError, message), raw_(std::move(raw)) {}
  const std::string& raw() const { return raw_; }

 private:
  std::string raw_;
};

struct QueueParse {
  std::vector<QueueEntry> entries;
  /// Set when a block or line was malformed; `entries` then holds everything
  /// parsed before it.
  std::optional<ParseError> error;
  /// True when a RUNNING job lacked an elapsed-time field and 0 was assumed.
  bool elapsed_fallback_used = false;
};

// --- durations -------------------------------------------------------------

/// HH:MM:SS with at least two hour digits (hours may exceed 99).
std::string seconds_to_hms(std::int64_t seconds);
/// Accepts SS, MM:SS, H+:MM:SS, D-HH, D-HH:MM and D-HH:MM:SS.
/// Throws InvalidArgument on anything else.
std::int64_t hms_to_seconds(std::string_view text);
std::optional<std::int64_t> try_parse_duration(std::string_view text);
/// Slurm's compact form: M:SS, H:MM:SS or D-HH:MM:SS.
std::string slurm_duration(std::int64_t seconds);

// --- commands ---------------------------------------------------------------

/// Outcome of one scheduler command line.
struct CommandResult {
  int exit_code = 0;
  std::string out;
  std::string err;
};

std::string render_submit(Scheduler scheduler, const SubmitSpec& spec);
std::string render_cancel(Scheduler scheduler, std::string_view batch_id);
std::string render_status(Scheduler scheduler);

/// Slurm status format string handed to squeue.
inline constexpr std::string_view kSlurmFormat = "%i|%j|%u|%T|%M|%l|%D|%P";

std::string parse_submit_reply(Scheduler scheduler, std::string_view stdout_text);
QueueParse parse_queue_status(Scheduler scheduler, std::string_view stdout_text);

QueueParse parse_pbs_status(std::string_view text);
QueueParse parse_slurm_status(std::string_view text);

}  // namespace urgent::batch
