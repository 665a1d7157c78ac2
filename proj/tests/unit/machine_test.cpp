#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <set>
#include <thread>

#include <nlohmann/json.hpp>

#include "support.hpp"
#include "urgent/machine.hpp"
#include "urgent/simulator.hpp"

using namespace urgent;
using namespace urgent::machine;
using batch::Scheduler;
using urgent::testkit::TempDir;

namespace {

sim::SimMachineConfig sim_cfg(const std::string& name, Scheduler s, std::int64_t nodes) {
  sim::SimMachineConfig c;
  c.name = name;
  c.scheduler = s;
  c.nodes = nodes;
  c.accounts = {"acct"};
  return c;
}

MachineConfig mcfg(const std::string& name, Scheduler s, std::int64_t nodes,
                   const std::string& account = "acct") {
  MachineConfig m;
  m.name = name;
  m.scheduler = s;
  m.endpoint = "sim://" + name;
  m.account = account;
  m.nodes = nodes;
  return m;
}

void expect_code(ErrorCode code, const std::function<void()>& f) {
  try {
    f();
    ADD_FAILURE() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

struct MachineFixture : ::testing::Test {
  TempDir dir;
  ManualClock clock;
  std::vector<sim::SimMachineConfig> sims = [] {
    auto p = sim_cfg("pbs1", Scheduler::PBS, 4);
    p.outage_windows = {{1000, 2000}};
    return std::vector{p, sim_cfg("slurm1", Scheduler::SLURM, 8)};
  }();
  sim::SimCluster cluster{sims, &clock};
  StateStore store{{dir.path(), &clock}};
  std::shared_ptr<Transport> transport = std::make_shared<SimTransport>(cluster);
  std::unique_ptr<MachineInterface> mi = make({mcfg("pbs1", Scheduler::PBS, 4),
                                               mcfg("slurm1", Scheduler::SLURM, 8)});
  ActivityRecord act = [&] {
    store.put_workflow("wf", "{}");
    return store.create_activity("fire", "wf", {});
  }();

  std::unique_ptr<MachineInterface> make(std::vector<MachineConfig> cfgs) {
    return std::make_unique<MachineInterface>(store, transport, std::move(cfgs));
  }
  std::string id(const std::string& name) { return mi->machine_id(name); }
  JobRecord job(const std::string& machine = "pbs1", std::int64_t nodes = 2,
                std::int64_t wall = 600) {
    return store.create_job(act.activity_id, id(machine), nodes, wall, {"stage", 0, 1});
  }
  JobRecord completed_job() {
    auto j = job();
    store.update_job_status(j.job_id, JobStatus::QUEUED);
    store.update_job_status(j.job_id, JobStatus::RUNNING);
    return store.update_job_status(j.job_id, JobStatus::COMPLETED);
  }
};

}  // namespace

TEST_F(MachineFixture, SubmitOnReachablePbs) {
  auto j = job();
  auto bid = mi->submit_job(j.job_id, "#!/bin/sh\necho hi\n");
  EXPECT_EQ(bid, "1.sim");
  auto got = store.get_job(j.job_id);
  EXPECT_EQ(got.batch_id, bid);
  EXPECT_EQ(got.status, JobStatus::QUEUED);
  EXPECT_EQ(cluster.read_file("pbs1", job_dir(j) + "job.sh"), "#!/bin/sh\necho hi\n");
  auto sj = cluster.machine("pbs1").job(bid);
  ASSERT_TRUE(sj);
  EXPECT_EQ(sj->nodes, 2);
  EXPECT_EQ(sj->walltime_req_s, 600);
  EXPECT_EQ(sj->name, "stage");
}

TEST_F(MachineFixture, SubmitOnSlurm) {
  auto j = job("slurm1", 8, 90061);
  EXPECT_EQ(mi->submit_job(j.job_id, "x", "ens"), "1");
  EXPECT_EQ(cluster.machine("slurm1").job("1")->walltime_req_s, 90061);
  EXPECT_EQ(cluster.machine("slurm1").job("1")->name, "ens");
}

TEST_F(MachineFixture, SubmitWhileOfflineLeavesJobPending) {
  auto j = job();
  clock.advance(1500);
  expect_code(ErrorCode::MachineUnreachable, [&] { mi->submit_job(j.job_id, "x"); });
  auto got = store.get_job(j.job_id);
  EXPECT_EQ(got.status, JobStatus::PENDING_SUBMIT);
  EXPECT_EQ(got.batch_id, "");
  clock.advance(1000);
  EXPECT_EQ(mi->submit_job(j.job_id, "x"), "1.sim");
}

TEST_F(MachineFixture, InvalidAccountIsRejected) {
  mi = make({mcfg("pbs1", Scheduler::PBS, 4, "nope"), mcfg("slurm1", Scheduler::SLURM, 8, "nope")});
  for (const char* m : {"pbs1", "slurm1"}) {
    auto j = job(m);
    try {
      mi->submit_job(j.job_id, "x");
      ADD_FAILURE() << "accepted";
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::SubmitRejected);
      EXPECT_NE(std::string(e.what()).find("invalid account"), std::string::npos) << e.what();
    }
    EXPECT_EQ(store.get_job(j.job_id).status, JobStatus::PENDING_SUBMIT);
  }
}

TEST_F(MachineFixture, SubmitPreconditions) {
  auto j = job();
  mi->submit_job(j.job_id, "x");
  expect_code(ErrorCode::InvalidState, [&] { mi->submit_job(j.job_id, "x"); });
  auto unplaced = store.create_job(act.activity_id, "", 1, 60);
  expect_code(ErrorCode::InvalidState, [&] { mi->submit_job(unplaced.job_id, "x"); });
}

TEST_F(MachineFixture, BatchIdSurvivesReopen) {
  auto j = job();
  auto bid = mi->submit_job(j.job_id, "x");
  mi.reset();
  StateStore again({dir.path(), &clock});
  EXPECT_EQ(again.get_job(j.job_id).batch_id, bid);
  EXPECT_EQ(again.get_job(j.job_id).status, JobStatus::QUEUED);
}

TEST_F(MachineFixture, CancelRunningFreesNodes) {
  auto j = job("pbs1", 4, 600);
  auto bid = mi->submit_job(j.job_id, "x");
  cluster.sync("pbs1");
  EXPECT_EQ(cluster.machine("pbs1").nodes_in_use(), 4);
  store.update_job_status(j.job_id, JobStatus::RUNNING);
  mi->cancel_job(j.job_id);
  EXPECT_EQ(store.get_job(j.job_id).status, JobStatus::CANCELLED);
  EXPECT_EQ(cluster.machine("pbs1").nodes_in_use(), 0);
  EXPECT_EQ(cluster.machine("pbs1").job(bid)->state, sim::SimJobState::CANCELLED);
}

TEST_F(MachineFixture, CancelTwiceIsNoOp) {
  auto blocker = job("pbs1", 4, 600);
  mi->submit_job(blocker.job_id, "x");
  auto j = job("pbs1", 4, 600);
  mi->submit_job(j.job_id, "x");
  mi->cancel_job(j.job_id);
  auto runs = mi->audit().size();
  mi->cancel_job(j.job_id);
  EXPECT_EQ(store.get_job(j.job_id).status, JobStatus::CANCELLED);
  EXPECT_EQ(mi->audit().size(), runs);
}

TEST_F(MachineFixture, CancelFinishedOnMachineIsSuccess) {
  auto j = job("pbs1", 1, 60);
  mi->submit_job(j.job_id, "x");
  clock.advance(100);
  cluster.sync("pbs1");
  mi->cancel_job(j.job_id);  // scheduler no longer knows it
  EXPECT_EQ(store.get_job(j.job_id).status, JobStatus::CANCELLED);
}

TEST_F(MachineFixture, CancelCompletedIsInvalidState) {
  auto j = completed_job();
  expect_code(ErrorCode::InvalidState, [&] { mi->cancel_job(j.job_id); });
  auto p = job();
  mi->cancel_job(p.job_id);
  EXPECT_EQ(store.get_job(p.job_id).status, JobStatus::CANCELLED);
}

TEST_F(MachineFixture, FetchTwoFiles) {
  auto j = completed_job();
  const auto d = job_dir(j);
  cluster.stage_file("pbs1", d + "out.dat", "alpha");
  cluster.stage_file("pbs1", d + "log.txt", std::string(5000, 'z'));
  auto hs = mi->fetch_results(j.job_id, {d + "out.dat", d + "log.txt"});
  ASSERT_EQ(hs.size(), 2u);
  EXPECT_EQ(hs[0].sha256, sha256_hex("alpha"));
  EXPECT_EQ(hs[1].sha256, sha256_hex(std::string(5000, 'z')));
  EXPECT_EQ(hs[0].store_name, "results");
  EXPECT_EQ(hs[0].key, j.activity_id + "/" + j.job_id + "/out.dat");
  EXPECT_EQ(store.get_object(hs[0].uri), "alpha");
  EXPECT_EQ(store.get_job(j.job_id).result_handles,
            (std::vector<std::string>{hs[0].handle_id, hs[1].handle_id}));
}

TEST_F(MachineFixture, FetchIsIdempotent) {
  auto j = completed_job();
  const auto d = job_dir(j);
  cluster.stage_file("pbs1", d + "a", "1");
  cluster.stage_file("pbs1", d + "b", "2");
  auto first = mi->fetch_results(j.job_id, {d + "a", d + "b"});
  cluster.stage_file("pbs1", d + "a", "1 again");
  auto second = mi->fetch_results(j.job_id, {d + "a", d + "b"});
  EXPECT_EQ(first[0].handle_id, second[0].handle_id);
  EXPECT_EQ(second[0].sha256, sha256_hex("1 again"));
  EXPECT_EQ(store.get_job(j.job_id).result_handles.size(), 2u);
}

TEST_F(MachineFixture, FetchPartial) {
  auto j = completed_job();
  const auto d = job_dir(j);
  cluster.stage_file("pbs1", d + "p1", "1");
  cluster.stage_file("pbs1", d + "p2", "2");
  try {
    mi->fetch_results(j.job_id, {d + "p1", d + "p2", d + "p3"});
    ADD_FAILURE() << "no PartialFetch";
  } catch (const PartialFetch& e) {
    EXPECT_EQ(e.code(), ErrorCode::PartialFetch);
    EXPECT_EQ(e.ok(), (std::vector<std::string>{d + "p1", d + "p2"}));
    EXPECT_EQ(e.missing(), (std::vector<std::string>{d + "p3"}));
  }
  EXPECT_EQ(store.get_job(j.job_id).result_handles.size(), 2u);
}

TEST_F(MachineFixture, FetchEmptyAndPreconditions) {
  auto j = completed_job();
  EXPECT_TRUE(mi->fetch_results(j.job_id, {}).empty());
  auto q = job();
  expect_code(ErrorCode::InvalidState, [&] { mi->fetch_results(q.job_id, {}); });
}

TEST_F(MachineFixture, TransferOneMiB) {
  std::string payload(1 << 20, '\0');
  for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<char>(i * 31 + 7);
  auto h = store.put_object("inputs", "fire/dem.bin", payload);
  mi->transfer_between(h.uri, id("slurm1"), "/work/in/dem.bin");
  EXPECT_EQ(sha256_hex(cluster.read_file("slurm1", "/work/in/dem.bin")), h.sha256);
  clock.advance(1500);
  expect_code(ErrorCode::MachineUnreachable,
              [&] { mi->transfer_between(h.handle_id, id("pbs1"), "/work/in/dem.bin"); });
}

namespace {

/// Flips a byte on every upload and counts attempts.
class CorruptingTransport final : public Transport {
 public:
  explicit CorruptingTransport(std::shared_ptr<Transport> inner) : inner_(std::move(inner)) {}
  CommandResult run_command(const Target& t, const std::string& c) override {
    return inner_->run_command(t, c);
  }
  void put_file(const Target& t, const std::string& p, const std::string& b) override {
    ++puts;
    auto bad = b;
    if (!bad.empty()) bad[0] = static_cast<char>(bad[0] ^ 1);
    inner_->put_file(t, p, bad);
  }
  std::string get_file(const Target& t, const std::string& p) override {
    return inner_->get_file(t, p);
  }
  std::atomic<int> puts{0};

 private:
  std::shared_ptr<Transport> inner_;
};

/// Sleeps before every call and records overlapping calls per machine.
class SlowTransport final : public Transport {
 public:
  SlowTransport(std::shared_ptr<Transport> inner, std::chrono::milliseconds delay)
      : inner_(std::move(inner)), delay_(delay) {}
  CommandResult run_command(const Target& t, const std::string& c) override {
    Guard g(*this, t.machine);
    return inner_->run_command(t, c);
  }
  void put_file(const Target& t, const std::string& p, const std::string& b) override {
    Guard g(*this, t.machine);
    inner_->put_file(t, p, b);
  }
  std::string get_file(const Target& t, const std::string& p) override {
    Guard g(*this, t.machine);
    return inner_->get_file(t, p);
  }
  std::atomic<int> overlaps{0};

 private:
  struct Guard {
    Guard(SlowTransport& s, const std::string& m) : s(s), m(m) {
      {
        std::lock_guard lock(s.mu_);
        if (s.busy_[m]++ > 0) ++s.overlaps;
      }
      std::this_thread::sleep_for(s.delay_);
    }
    ~Guard() {
      std::lock_guard lock(s.mu_);
      --s.busy_[m];
    }
    SlowTransport& s;
    std::string m;
  };
  std::shared_ptr<Transport> inner_;
  std::chrono::milliseconds delay_;
  std::mutex mu_;
  std::map<std::string, int> busy_;
};

}  // namespace

TEST_F(MachineFixture, CorruptTransferFailsAfterOneRetry) {
  auto bad = std::make_shared<CorruptingTransport>(transport);
  transport = bad;
  mi = make({mcfg("pbs1", Scheduler::PBS, 4), mcfg("slurm1", Scheduler::SLURM, 8)});
  auto h = store.put_object("inputs", "x", "payload");
  expect_code(ErrorCode::TransferCorrupt,
              [&] { mi->transfer_between(h.uri, id("slurm1"), "/work/x"); });
  EXPECT_EQ(bad->puts.load(), 2);
}

TEST_F(MachineFixture, TimedTransportGivesUp) {
  auto slow = std::make_shared<SlowTransport>(transport, std::chrono::milliseconds(1500));
  TimedTransport timed(slow, 0.1);
  Target t{"slurm1", "sim://slurm1", "acct"};
  auto t0 = std::chrono::steady_clock::now();
  expect_code(ErrorCode::MachineUnreachable, [&] { timed.run_command(t, "squeue"); });
  EXPECT_LT(std::chrono::steady_clock::now() - t0, std::chrono::milliseconds(1000));
  EXPECT_EQ(kDefaultTransportTimeoutS, 30);
  TimedTransport quick(transport, kDefaultTransportTimeoutS);
  quick.put_file(t, "/a", "b");
  EXPECT_EQ(quick.get_file(t, "/a"), "b");
  expect_code(ErrorCode::NotFound, [&] { quick.get_file(t, "/missing"); });
  expect_code(ErrorCode::InvalidArgument, [&] { TimedTransport(transport, 0); });
}

TEST_F(MachineFixture, PerMachineCommandsDoNotInterleave) {
  auto slow = std::make_shared<SlowTransport>(transport, std::chrono::milliseconds(2));
  transport = slow;
  mi = make({mcfg("pbs1", Scheduler::PBS, 4), mcfg("slurm1", Scheduler::SLURM, 8)});
  std::vector<std::string> ids;
  for (int i = 0; i < 16; ++i) ids.push_back(job(i % 2 ? "pbs1" : "slurm1", 1, 60).job_id);
  std::vector<std::thread> ts;
  std::mutex mu;
  std::set<std::string> batch_ids;
  for (const auto& jid : ids)
    ts.emplace_back([&, jid] {
      auto b = mi->submit_job(jid, "x");
      std::lock_guard lock(mu);
      batch_ids.insert(store.get_job(jid).machine_id + b);
    });
  for (auto& t : ts) t.join();
  EXPECT_EQ(batch_ids.size(), 16u);
  EXPECT_EQ(slow->overlaps.load(), 0);
}

TEST_F(MachineFixture, AuditUsesOneIdentityPerMachine) {
  auto cfgs = std::vector{mcfg("pbs1", Scheduler::PBS, 4), mcfg("slurm1", Scheduler::SLURM, 8)};
  cfgs[1].identity = "svc-slurm";
  mi = make(cfgs);
  auto a = job("pbs1");
  auto b = job("slurm1");
  mi->submit_job(a.job_id, "x");
  mi->submit_job(b.job_id, "x");
  mi->query_queue(id("pbs1"));
  mi->cancel_job(b.job_id);
  std::map<std::string, std::set<std::string>> ids;
  for (const auto& e : mi->audit()) ids[e.machine].insert(e.identity);
  EXPECT_EQ(ids["pbs1"], (std::set<std::string>{"acct"}));
  EXPECT_EQ(ids["slurm1"], (std::set<std::string>{"svc-slurm"}));
  EXPECT_EQ(mi->audit().size(), 6u);
}

TEST_F(MachineFixture, QueryQueue) {
  mi->submit_job(job().job_id, "x");
  mi->submit_job(job("pbs1", 4).job_id, "x");
  auto q = mi->query_queue(id("pbs1"));
  ASSERT_EQ(q.entries.size(), 2u);
  EXPECT_EQ(q.entries[0].state, batch::QueueState::RUNNING);
  EXPECT_EQ(q.entries[1].state, batch::QueueState::QUEUED);
  clock.advance(1200);
  expect_code(ErrorCode::MachineUnreachable, [&] { mi->query_queue(id("pbs1")); });
}

TEST(MachineConfigTest, FromJson) {
  auto m = machine_config_from_json(nlohmann::json::parse(R"({
    "name": "archer", "scheduler": "pbs", "transport": "sim", "endpoint": "sim://archer",
    "account": "z19", "nodes": 64, "cores_per_node": 36})"));
  EXPECT_EQ(m.scheduler, Scheduler::PBS);
  EXPECT_EQ(m.identity, "z19");
  EXPECT_EQ(m.queue, "standard");
  EXPECT_EQ(machine_config_from_json(to_json(m)).endpoint, "sim://archer");
  EXPECT_THROW(machine_config_from_json(nlohmann::json::parse(
                   R"({"name":"x","scheduler":"lsf"})")),
               Error);
  EXPECT_THROW(machine_config_from_json(nlohmann::json::parse(
                   R"({"name":"x","scheduler":"pbs","transport":"ftp"})")),
               Error);
}

TEST(MachineConfigTest, SshTransportIsUnsupported) {
  TempDir dir;
  ManualClock clock;
  StateStore store({dir.path(), &clock});
  sim::SimCluster cluster({}, &clock);
  MachineConfig m;
  m.name = "remote";
  m.transport = "ssh";
  expect_code(ErrorCode::Unsupported, [&] {
    MachineInterface(store, std::make_shared<SimTransport>(cluster), {m});
  });
}
