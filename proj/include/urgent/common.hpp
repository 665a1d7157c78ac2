#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <mutex>
#include <condition_variable>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace urgent {

/// Error categories shared by every module. Each maps to one failure named in
/// the operation contracts; HTTP handlers translate them to status codes.
enum class ErrorCode {
  NotFound,
  InvalidArgument,
  InvalidState,
  InvalidTransition,
  DeclMismatch,
  InvalidAck,
  Timeout,
  RecoveryError,
  Unsupported,
  ParseError,
  MachineUnreachable,
  SubmitRejected,
  PartialFetch,
  TransferCorrupt,
  StaleData,
  NoData,
  NoEligibleMachine,
  UnknownSensorType,
  AlreadyRegistered,
  CyclicWorkflow,
  PredicateSyntax,
  MissingField,
  TypeMismatch,
  Internal,
};

const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Throws Error(code, message). Keeps call sites on one line.
[[noreturn]] void fail(ErrorCode code, const std::string& message);

// ---------------------------------------------------------------------------
// Time. All timestamps are UTC epoch seconds.

using Timestamp = std::int64_t;

std::string format_utc(Timestamp t);
Timestamp parse_utc(std::string_view iso);

/// Source of "now" for every component. The simulator-backed deployments run
/// the whole control plane on an accelerated or manually driven clock.
class Clock {
 public:
  virtual ~Clock() = default;
  virtual Timestamp now() const = 0;
  /// Blocks the caller for `seconds` of this clock's time.
  virtual void sleep_for(double seconds) const;
  /// Wall-time duration corresponding to `seconds` of clock time.
  virtual std::chrono::duration<double> to_wall(double seconds) const = 0;
};

class SystemClock final : public Clock {
 public:
  Timestamp now() const override;
  std::chrono::duration<double> to_wall(double seconds) const override {
    return std::chrono::duration<double>(seconds);
  }
};

/// Virtual time = base + rate * (wall time since construction).
class ScaledClock final : public Clock {
 public:
  ScaledClock(Timestamp base, double rate);
  Timestamp now() const override;
  std::chrono::duration<double> to_wall(double seconds) const override {
    return std::chrono::duration<double>(seconds / rate_);
  }
  double rate() const { return rate_; }

 private:
  Timestamp base_;
  double rate_;
  std::chrono::steady_clock::time_point start_;
};

/// Test and stepping clock; only moves when told to.
class ManualClock final : public Clock {
 public:
  explicit ManualClock(Timestamp start = 1'600'000'000) : now_(start) {}
  Timestamp now() const override;
  void set(Timestamp t);
  void advance(std::int64_t seconds);
  void sleep_for(double) const override {}
  std::chrono::duration<double> to_wall(double) const override {
    return std::chrono::duration<double>(0);
  }

 private:
  mutable std::mutex mu_;
  Timestamp now_;
};

// ---------------------------------------------------------------------------
// Identifiers and digests.

/// Random 128-bit identifier rendered as `<prefix>-<32 hex>`.
std::string make_id(std::string_view prefix);

std::string sha256_hex(std::string_view bytes);
std::uint32_t crc32(std::string_view bytes);

// ---------------------------------------------------------------------------
// Small string helpers used across parsers.

std::string_view trim(std::string_view s);
std::vector<std::string_view> split(std::string_view s, char sep);
bool starts_with(std::string_view s, std::string_view prefix);

using StringMap = std::map<std::string, std::string>;

// ---------------------------------------------------------------------------
// Diagnostics. One line per call on stderr: `<utc> <level> <message>`.

enum class LogLevel { Debug, Info, Warn, Error, Off };
void set_log_level(LogLevel level);
LogLevel log_level();
void log(LogLevel level, std::string_view message);
inline void log_info(std::string_view m) { log(LogLevel::Info, m); }
inline void log_warn(std::string_view m) { log(LogLevel::Warn, m); }

}  // namespace urgent
