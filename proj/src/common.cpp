#include "urgent/common.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <array>
#include <atomic>
#include <cstdlib>
#include <cstdio>
#include <ctime>
#include <random>
#include <thread>

namespace urgent {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::InvalidState: return "InvalidState";
    case ErrorCode::InvalidTransition: return "InvalidTransition";
    case ErrorCode::DeclMismatch: return "DeclMismatch";
    case ErrorCode::InvalidAck: return "InvalidAck";
    case ErrorCode::Timeout: return "Timeout";
    case ErrorCode::RecoveryError: return "RecoveryError";
    case ErrorCode::Unsupported: return "Unsupported";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::MachineUnreachable: return "MachineUnreachable";
    case ErrorCode::SubmitRejected: return "SubmitRejected";
    case ErrorCode::PartialFetch: return "PartialFetch";
    case ErrorCode::TransferCorrupt: return "TransferCorrupt";
    case ErrorCode::StaleData: return "StaleData";
    case ErrorCode::NoData: return "NoData";
    case ErrorCode::NoEligibleMachine: return "NoEligibleMachine";
    case ErrorCode::UnknownSensorType: return "UnknownSensorType";
    case ErrorCode::AlreadyRegistered: return "AlreadyRegistered";
    case ErrorCode::CyclicWorkflow: return "CyclicWorkflow";
    case ErrorCode::PredicateSyntax: return "PredicateSyntax";
    case ErrorCode::MissingField: return "MissingField";
    case ErrorCode::TypeMismatch: return "TypeMismatch";
    case ErrorCode::Internal: return "Internal";
  }
  return "Unknown";
}

void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

std::string format_utc(Timestamp t) {
  std::time_t tt = static_cast<std::time_t>(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Timestamp parse_utc(std::string_view iso) {
  std::tm tm{};
  std::string s(iso);
  if (std::sscanf(s.c_str(), "%d-%d-%dT%d:%d:%d", &tm.tm_year, &tm.tm_mon, &tm.tm_mday,
                  &tm.tm_hour, &tm.tm_min, &tm.tm_sec) != 6) {
    fail(ErrorCode::InvalidArgument, "bad UTC timestamp: " + s);
  }
  tm.tm_year -= 1900;
  tm.tm_mon -= 1;
  return static_cast<Timestamp>(timegm(&tm));
}

void Clock::sleep_for(double seconds) const {
  std::this_thread::sleep_for(to_wall(seconds));
}

Timestamp SystemClock::now() const {
  return std::chrono::duration_cast<std::chrono::seconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

ScaledClock::ScaledClock(Timestamp base, double rate)
    : base_(base), rate_(rate), start_(std::chrono::steady_clock::now()) {
  if (!(rate > 0)) fail(ErrorCode::InvalidArgument, "clock rate must be positive");
}

Timestamp ScaledClock::now() const {
  std::chrono::duration<double> wall = std::chrono::steady_clock::now() - start_;
  return base_ + static_cast<Timestamp>(wall.count() * rate_);
}

Timestamp ManualClock::now() const {
  std::lock_guard lock(mu_);
  return now_;
}

void ManualClock::set(Timestamp t) {
  std::lock_guard lock(mu_);
  now_ = t;
}

void ManualClock::advance(std::int64_t seconds) {
  std::lock_guard lock(mu_);
  now_ += seconds;
}

std::string make_id(std::string_view prefix) {
  thread_local std::mt19937_64 rng{std::random_device{}()};
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(prefix);
  out += '-';
  for (int word = 0; word < 2; ++word) {
    std::uint64_t v = rng();
    for (int i = 0; i < 16; ++i) {
      out += kHex[v & 0xf];
      v >>= 4;
    }
  }
  return out;
}

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, 32> digest{};
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(64);
  for (unsigned char c : digest) {
    out += kHex[c >> 4];
    out += kHex[c & 0xf];
  }
  return out;
}

std::uint32_t crc32(std::string_view bytes) {
  return static_cast<std::uint32_t>(::crc32(
      0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

std::string_view trim(std::string_view s) {
  const char* ws = " \t\r\n";
  auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

bool starts_with(std::string_view s, std::string_view prefix) {
  return s.substr(0, prefix.size()) == prefix;
}

// ---------------------------------------------------------------------------

namespace {

std::atomic<LogLevel> g_log_level{[] {
  const char* env = std::getenv("URGENT_LOG");
  if (!env) return LogLevel::Warn;
  const std::string v = env;
  if (v == "debug") return LogLevel::Debug;
  if (v == "info") return LogLevel::Info;
  if (v == "error") return LogLevel::Error;
  if (v == "off") return LogLevel::Off;
  return LogLevel::Warn;
}()};
std::mutex g_log_mu;

}  // namespace

void set_log_level(LogLevel level) { g_log_level = level; }
LogLevel log_level() { return g_log_level; }

void log(LogLevel level, std::string_view message) {
  if (level < g_log_level.load() || level == LogLevel::Off) return;
  static const char* names[] = {"DEBUG", "INFO", "WARN", "ERROR"};
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::lock_guard lock(g_log_mu);
  std::fprintf(stderr, "%s %s %.*s\n", format_utc(now).c_str(), names[static_cast<int>(level)],
               static_cast<int>(message.size()), message.data());
}

}  // namespace urgent
