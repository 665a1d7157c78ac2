// Interactive driver for the batch simulator. Reads one command per line:
//
//   <machine> <scheduler command...>   e.g.  archer qsub -N x -l select=2,walltime=00:10:00 /w/run.pbs
//   stage <machine> <path> <text...>
//   cat <machine> <path>
//   advance <seconds>
//   status <machine>
//   time | machines | quit

#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "urgent/simulator.hpp"

namespace {

void print(const urgent::sim::CommandResult& r) {
  std::cout << r.out;
  if (!r.err.empty()) std::cerr << r.err;
  if (r.exit_code != 0) std::cout << "[exit " << r.exit_code << "]\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"batch simulator console"};
  std::string config_path;
  app.add_option("config", config_path, "simulator configuration (list of machines)")
      ->required()
      ->check(CLI::ExistingFile);
  CLI11_PARSE(app, argc, argv);

  try {
    urgent::ManualClock clock(0);
    urgent::sim::SimCluster cluster(urgent::sim::load_sim_config(config_path), &clock);
    std::string line;
    while (std::cout << "> " << std::flush, std::getline(std::cin, line)) {
      std::istringstream in(line);
      std::string head;
      if (!(in >> head)) continue;
      try {
        if (head == "quit" || head == "exit") break;
        if (head == "time") {
          std::cout << clock.now() << "\n";
        } else if (head == "machines") {
          for (const auto& n : cluster.names()) std::cout << n << "\n";
        } else if (head == "advance") {
          std::int64_t dt = 0;
          if (!(in >> dt) || dt < 0) throw std::invalid_argument("advance needs seconds >= 0");
          clock.advance(dt);
          for (const auto& n : cluster.names())
            for (const auto& e : cluster.sync(n))
              std::cout << n << " t=" << e.t << " " << e.batch_id << " " << urgent::sim::to_string(e.from)
                        << " -> " << urgent::sim::to_string(e.to) << "\n";
        } else if (head == "status") {
          std::string m;
          in >> m;
          cluster.sync(m);
          std::cout << cluster.machine(m).render_status();
        } else if (head == "stage") {
          std::string m, path, text;
          in >> m >> path;
          std::getline(in, text);
          cluster.stage_file(m, path, std::string(urgent::trim(text)) + "\n");
        } else if (head == "cat") {
          std::string m, path;
          in >> m >> path;
          std::cout << cluster.read_file(m, path);
        } else if (cluster.has(head)) {
          std::string rest;
          std::getline(in, rest);
          print(cluster.run(head, urgent::trim(rest)));
        } else {
          std::cerr << "unknown command or machine '" << head << "'\n";
        }
      } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
      }
    }
  } catch (const urgent::Error& e) {
    std::cerr << "simctl: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
