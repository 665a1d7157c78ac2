#include "support.hpp"

#include <fstream>
#include <sstream>

#include "urgent/common.hpp"

namespace urgent::testkit {

namespace fs = std::filesystem;

TempDir::TempDir() : path_(fs::temp_directory_path() / make_id("urgent-test")) {
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
}

fs::path source_dir() {
#ifdef URGENT_SOURCE_DIR
  return URGENT_SOURCE_DIR;
#else
  return fs::current_path();
#endif
}

}  // namespace urgent::testkit
