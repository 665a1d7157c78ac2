#pragma once

// Independent reference implementations used only by tests.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "urgent/batch.hpp"

namespace urgent::testkit {

struct FixtureCase {
  std::string name;
  std::string text;
  nlohmann::json expected;  // {entries: [...], error: bool, elapsed_fallback_used: bool}
};

/// Every `<name>.txt` in fixtures/<kind>/ paired with `<name>.expected.json`.
std::vector<FixtureCase> load_fixtures(const std::string& kind);

/// Empty when `got` matches the expectation field by field; otherwise a
/// description of the first difference.
std::string compare_parse(const batch::QueueParse& got, const nlohmann::json& expected);

/// Pulls nodes, walltime, account, queue, script and name back out of a
/// rendered submit command with regular expressions.
std::optional<batch::SubmitSpec> reextract_submit(batch::Scheduler s, const std::string& cmd);

/// Start offset of a candidate job behind the queue, found by stepping a
/// FIFO node scheduler one second at a time. RUNNING jobs finish at
/// round(ratio * walltime) - elapsed (not before 0); QUEUED jobs start in
/// order once enough nodes are free; other states are ignored.
std::int64_t oracle_wait(std::int64_t total_nodes, const std::vector<batch::QueueEntry>& entries,
                         double ratio, std::int64_t nodes);

}  // namespace urgent::testkit
