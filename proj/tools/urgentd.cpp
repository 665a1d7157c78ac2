// The control-plane daemon: loads a configuration, runs until SIGINT/SIGTERM.

#include <csignal>
#include <iostream>

#include <CLI11.hpp>

#include "urgent/control_plane.hpp"

namespace {

volatile std::sig_atomic_t g_stop = 0;
void on_signal(int) { g_stop = 1; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"urgent computing control plane"};
  std::string config_path = "config/urgent.json";
  std::string data_dir;
  int port = -1;
  std::string log_level;
  app.add_option("-c,--config", config_path, "configuration file")->check(CLI::ExistingFile);
  app.add_option("--data-dir", data_dir, "overrides data_dir");
  app.add_option("-p,--port", port, "overrides api.port")->check(CLI::Range(0, 65535));
  app.add_option("--log", log_level, "debug, info, warn, error or off")
      ->check(CLI::IsMember({"debug", "info", "warn", "error", "off"}));
  CLI11_PARSE(app, argc, argv);

  using urgent::LogLevel;
  if (log_level == "debug") urgent::set_log_level(LogLevel::Debug);
  else if (log_level == "info") urgent::set_log_level(LogLevel::Info);
  else if (log_level == "warn") urgent::set_log_level(LogLevel::Warn);
  else if (log_level == "error") urgent::set_log_level(LogLevel::Error);
  else if (log_level == "off") urgent::set_log_level(LogLevel::Off);

  try {
    auto cfg = urgent::load_config(config_path);
    if (!data_dir.empty()) cfg.data_dir = data_dir;
    if (port >= 0) cfg.api.port = port;
    urgent::ControlPlane cp(std::move(cfg));
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    cp.start();
    std::cout << "listening on " << cp.config().api.host << ":" << cp.gateway().port() << std::endl;
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(200));
    cp.stop();
  } catch (const urgent::Error& e) {
    std::cerr << "urgentd: " << urgent::to_string(e.code()) << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}
