// Echo-latency benchmark over the shared-memory transport and the socket baseline.
//
//   bench run --transport shm --encoding reference --payload-bytes 4096 --iters 10000
//   bench compare --all-arms --preset small --iters 10000 --warmup 1000 --csv out.csv
//   bench replay --csv out.csv

#include <cstdio>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "shmrpc/bench.hpp"

namespace {

using shmrpc::bench::BenchConfig;

struct Flags {
  BenchConfig cfg;
  std::string preset;
  int spin = -1;
};

void add_workload_options(CLI::App* cmd, Flags& f) {
  auto& c = f.cfg;
  cmd->add_option("--preset", f.preset, "Workload preset applied before other flags")
      ->check(CLI::IsMember({"small", "large"}));
  cmd->add_option("--payload-bytes", c.payload_bytes, "Request body length");
  cmd->add_option("--attrs", c.attr_count, "Number of string attrs per message")
      ->check(CLI::Range(0, 255));
  cmd->add_option("--repeat", c.repeat, "Attr encode/decode passes on the copy path")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--iters", c.iterations, "Timed calls per client")->check(CLI::PositiveNumber);
  cmd->add_option("--warmup", c.warmup, "Discarded calls per client before timing");
  cmd->add_option("--clients", c.clients, "Client processes")->check(CLI::PositiveNumber);
  cmd->add_option("--deadline-ms", c.deadline_ms, "Per-call deadline");
  cmd->add_option("--region", c.region_name, "Shared memory region name");
  cmd->add_option("--csv", c.csv_path, "Write per-call samples to this CSV file");
  cmd->add_option("--spin", f.spin, "Relax-hint spins before yielding (default: host dependent)");
  cmd->add_flag("--force-clean", c.force_clean, "Remove a stale region of the same name first");
  cmd->add_flag("--pin", c.pin_cores, "Pin server and clients to distinct cores");
}

// Presets set the workload shape; explicitly passed flags still win.
BenchConfig resolve(const Flags& f, const CLI::App* cmd) {
  BenchConfig c = f.cfg;
  if (f.preset.empty()) return c;
  BenchConfig p = f.preset == "large" ? shmrpc::bench::large_preset(c)
                                      : shmrpc::bench::small_preset(c);
  if (cmd->count("--payload-bytes") == 0) c.payload_bytes = p.payload_bytes;
  if (cmd->count("--attrs") == 0) c.attr_count = p.attr_count;
  if (cmd->count("--repeat") == 0) c.repeat = p.repeat;
  return c;
}

int report(const std::vector<shmrpc::bench::ArmResult>& arms, const std::string& csv) {
  std::cout << shmrpc::bench::format_report(arms);
  if (!csv.empty()) shmrpc::bench::write_csv(csv, arms);
  int rc = 0;
  for (const auto& a : arms)
    if (a.partial) {
      std::cerr << a.arm << ": run aborted: " << a.error << '\n';
      rc = 1;
    }
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shared-memory RPC vs loopback-socket echo latency benchmark"};
  app.require_subcommand(1);

  Flags run_flags;
  std::string transport = "shm", encoding = "copy";
  auto* run = app.add_subcommand("run", "Benchmark one transport/encoding arm");
  run->add_option("--transport", transport, "tcp or shm")->check(CLI::IsMember({"tcp", "shm"}));
  run->add_option("--encoding", encoding, "copy or reference")
      ->check(CLI::IsMember({"copy", "reference"}));
  add_workload_options(run, run_flags);

  Flags cmp_flags;
  bool all_arms = false;
  auto* compare = app.add_subcommand("compare", "Benchmark tcp, shm-copy and shm-reference");
  compare->add_flag("--all-arms", all_arms, "Run all three arms (the only supported mode)");
  add_workload_options(compare, cmp_flags);

  std::string replay_csv;
  auto* replay = app.add_subcommand("replay", "Recompute statistics from a sample CSV");
  replay->add_option("--csv", replay_csv, "CSV written by run/compare")->required();

  CLI11_PARSE(app, argc, argv);

  auto apply_spin = [](BenchConfig& c, int spin) {
    if (spin >= 0) c.backoff.spin_limit = static_cast<std::uint32_t>(spin);
  };

  try {
    if (*run) {
      BenchConfig c = resolve(run_flags, run);
      apply_spin(c, run_flags.spin);
      c.transport =
          transport == "tcp" ? shmrpc::bench::Transport::tcp : shmrpc::bench::Transport::shm;
      c.encoding = encoding == "reference" ? shmrpc::Encoding::reference : shmrpc::Encoding::copy;
      if (c.transport == shmrpc::bench::Transport::tcp && c.encoding == shmrpc::Encoding::reference)
        std::cerr << "note: the tcp baseline always uses the copy codec\n";
      return report({shmrpc::bench::run_bench(c)}, c.csv_path);
    }
    if (*compare) {
      BenchConfig c = resolve(cmp_flags, compare);
      apply_spin(c, cmp_flags.spin);
      return report(shmrpc::bench::compare_all_arms(c), c.csv_path);
    }
    if (*replay) {
      const auto arms = shmrpc::bench::read_csv(replay_csv);
      std::cout << shmrpc::bench::format_report(arms);
      return 0;
    }
  } catch (const shmrpc::Error& e) {
    std::cerr << "bench: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
