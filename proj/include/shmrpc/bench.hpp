#pragma once

// Echo-latency benchmark: server and clients run as separate processes on one
// host; each call is timed end to end on the client with a monotonic clock.

#include <sched.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "shmrpc/error.hpp"
#include "shmrpc/region.hpp"
#include "shmrpc/rpc.hpp"
#include "shmrpc/stub.hpp"
#include "shmrpc/tcp_baseline.hpp"

namespace shmrpc::bench {

enum class Transport { tcp, shm };

struct BenchConfig {
  Transport transport = Transport::shm;
  Encoding encoding = Encoding::copy;
  std::size_t payload_bytes = 16;
  std::size_t attr_count = 1;
  unsigned repeat = 1;
  std::size_t iterations = 1000;
  std::size_t warmup = 100;
  unsigned clients = 1;
  unsigned deadline_ms = 1000;
  std::string region_name = "shmrpc-bench";
  std::string csv_path;
  bool force_clean = false;
  bool pin_cores = false;
  BackoffPolicy backoff = BackoffPolicy::host_default();
};

/// Small preset: 16-byte body, one attr.
inline BenchConfig small_preset(BenchConfig c = {}) {
  c.payload_bytes = 16;
  c.attr_count = 1;
  c.repeat = 1;
  return c;
}

/// Large preset: 64 KiB body, 32 attrs, attr section encoded 16 times on the copy path.
inline BenchConfig large_preset(BenchConfig c = {}) {
  c.payload_bytes = 64 * 1024;
  c.attr_count = 32;
  c.repeat = 16;
  return c;
}

/// One timed call, nanoseconds.
struct Sample {
  std::int64_t latency_ns = 0;
  std::int64_t serialize_ns = 0;
  std::int64_t wait_ns = 0;
  std::int64_t decode_ns = 0;
  bool operator==(const Sample&) const = default;
};

struct LatencyStats {
  std::size_t count = 0;
  double avg_us = 0;
  double p50_us = 0;
  double p99_us = 0;
  double p999_us = 0;
  double max_us = 0;
  double min_us = 0;
  bool operator==(const LatencyStats&) const = default;
};

/// Mean per-call split, microseconds.
struct PhaseBreakdown {
  double serialize_us = 0;
  double wait_us = 0;
  double decode_us = 0;
  double other_us = 0;
  double total_us = 0;
};

struct ArmResult {
  std::string arm;
  std::vector<Sample> samples;
  LatencyStats stats;
  PhaseBreakdown breakdown;
  bool partial = false;
  std::string error;
};

/// Nearest-rank percentile: element ceil(q * n) - 1 of the sorted samples.
template <typename T>
T percentile(std::span<const T> samples, double q) {
  if (samples.empty()) throw Error(Errc::empty_samples, "percentile of no samples");
  if (!(q > 0.0 && q <= 1.0)) throw Error(Errc::usage_error, "percentile fraction outside (0, 1]");
  std::vector<T> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  // q * n can land a hair above an integer in floating point (0.99 * 100).
  const auto rank =
      static_cast<std::size_t>(std::ceil(q * static_cast<double>(sorted.size()) - 1e-9));
  return sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
}

template <typename T>
T percentile(const std::vector<T>& samples, double q) {
  return percentile(std::span<const T>(samples), q);
}

inline LatencyStats compute_stats(std::span<const Sample> samples) {
  if (samples.empty()) throw Error(Errc::empty_samples, "no samples");
  std::vector<std::int64_t> ns;
  ns.reserve(samples.size());
  for (const auto& s : samples) ns.push_back(s.latency_ns);
  std::sort(ns.begin(), ns.end());
  const std::span<const std::int64_t> v(ns);
  LatencyStats st;
  st.count = ns.size();
  const long double sum = std::accumulate(ns.begin(), ns.end(), 0.0L);
  st.avg_us = static_cast<double>(sum / static_cast<long double>(ns.size()) / 1000.0L);
  st.p50_us = static_cast<double>(percentile(v, 0.5)) / 1000.0;
  st.p99_us = static_cast<double>(percentile(v, 0.99)) / 1000.0;
  st.p999_us = static_cast<double>(percentile(v, 0.999)) / 1000.0;
  st.max_us = static_cast<double>(ns.back()) / 1000.0;
  st.min_us = static_cast<double>(ns.front()) / 1000.0;
  return st;
}

inline PhaseBreakdown compute_breakdown(std::span<const Sample> samples) {
  PhaseBreakdown b;
  if (samples.empty()) return b;
  long double ser = 0, wait = 0, dec = 0, tot = 0;
  for (const auto& s : samples) {
    ser += s.serialize_ns;
    wait += s.wait_ns;
    dec += s.decode_ns;
    tot += s.latency_ns;
  }
  const long double n = static_cast<long double>(samples.size()) * 1000.0L;
  b.serialize_us = static_cast<double>(ser / n);
  b.wait_us = static_cast<double>(wait / n);
  b.decode_us = static_cast<double>(dec / n);
  b.total_us = static_cast<double>(tot / n);
  b.other_us = std::max(0.0, b.total_us - b.serialize_us - b.wait_us - b.decode_us);
  return b;
}

inline void finalize(ArmResult& r) {
  if (r.samples.empty()) return;
  r.stats = compute_stats(r.samples);
  r.breakdown = compute_breakdown(r.samples);
}

inline std::string arm_name(Transport t, Encoding e) {
  if (t == Transport::tcp) return "tcp";
  return e == Encoding::copy ? "shm-copy" : "shm-reference";
}

// ---- reporting ----------------------------------------------------------

inline constexpr std::string_view kCsvHeader = "arm,iteration,latency_us,serialize_us,wait_us,decode_us";

namespace detail {

inline std::string ns_to_us(std::int64_t ns) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%lld.%03lld", static_cast<long long>(ns / 1000),
                static_cast<long long>(ns % 1000));
  return buf;
}

inline std::int64_t us_to_ns(std::string_view text) {
  const auto dot = text.find('.');
  const auto whole = text.substr(0, dot);
  std::int64_t ns = tcp::detail::parse_number<std::int64_t>(whole, "csv value") * 1000;
  if (dot != std::string_view::npos) {
    std::string frac(text.substr(dot + 1));
    if (frac.empty() || frac.size() > 3) throw Error(Errc::protocol_error, "csv value precision");
    frac.resize(3, '0');
    ns += tcp::detail::parse_number<std::int64_t>(frac, "csv value");
  }
  return ns;
}

}  // namespace detail

inline void write_csv(std::ostream& os, const std::vector<ArmResult>& arms) {
  os << kCsvHeader << '\n';
  for (const auto& a : arms)
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
      const auto& s = a.samples[i];
      os << a.arm << ',' << i << ',' << detail::ns_to_us(s.latency_ns) << ','
         << detail::ns_to_us(s.serialize_ns) << ',' << detail::ns_to_us(s.wait_ns) << ','
         << detail::ns_to_us(s.decode_ns) << '\n';
    }
}

inline void write_csv(const std::string& path, const std::vector<ArmResult>& arms) {
  std::ofstream f(path);
  if (!f) throw Error(Errc::setup_failure, "cannot open " + path);
  write_csv(f, arms);
}

/// Parses a CSV written by write_csv; arms keep their order of first appearance.
inline std::vector<ArmResult> read_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kCsvHeader)
    throw Error(Errc::protocol_error, "missing or unexpected CSV header");
  std::vector<ArmResult> arms;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string_view> f;
    std::string_view rest(line);
    for (;;) {
      const auto c = rest.find(',');
      f.push_back(rest.substr(0, c));
      if (c == std::string_view::npos) break;
      rest.remove_prefix(c + 1);
    }
    if (f.size() != 6) throw Error(Errc::protocol_error, "CSV row with " + std::to_string(f.size()) + " fields");
    auto it = std::find_if(arms.begin(), arms.end(), [&](const ArmResult& a) { return a.arm == f[0]; });
    if (it == arms.end()) {
      arms.push_back({});
      arms.back().arm = std::string(f[0]);
      it = arms.end() - 1;
    }
    it->samples.push_back({detail::us_to_ns(f[2]), detail::us_to_ns(f[3]), detail::us_to_ns(f[4]),
                           detail::us_to_ns(f[5])});
  }
  for (auto& a : arms) finalize(a);
  return arms;
}

inline std::vector<ArmResult> read_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(Errc::setup_failure, "cannot open " + path);
  return read_csv(f);
}

/// Latency table (rows = arms; avg / p99 / p999 in microseconds), then the
/// per-phase split as percentages of the mean call.
inline std::string format_report(const std::vector<ArmResult>& arms) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-16s %10s %10s %10s\n", "arm (us)", "avg", "p99", "p999");
  os << line;
  for (const auto& a : arms) {
    std::snprintf(line, sizeof line, "%-16s %10.2f %10.2f %10.2f%s\n", a.arm.c_str(), a.stats.avg_us,
                  a.stats.p99_us, a.stats.p999_us, a.partial ? "  (partial)" : "");
    os << line;
  }
  os << '\n';
  std::snprintf(line, sizeof line, "%-16s %8s %8s %8s %8s %8s %8s\n", "breakdown", "n", "p50",
                "max", "ser%", "wait%", "dec%");
  os << line;
  for (const auto& a : arms) {
    const auto& b = a.breakdown;
    const double t = b.total_us > 0 ? b.total_us : 1;
    std::snprintf(line, sizeof line, "%-16s %8zu %8.2f %8.2f %8.1f %8.1f %8.1f\n", a.arm.c_str(),
                  a.stats.count, a.stats.p50_us, a.stats.max_us, 100 * b.serialize_us / t,
                  100 * b.wait_us / t, 100 * b.decode_us / t);
    os << line;
  }
  return os.str();
}

// ---- workload -----------------------------------------------------------

/// Deterministic request for iteration `i`.
inline EchoMessage make_request(const BenchConfig& cfg, std::uint64_t i, std::mt19937_64& rng) {
  EchoMessage m;
  m.id = i;
  m.body.resize(cfg.payload_bytes);
  for (auto& c : m.body) c = static_cast<char>('a' + rng() % 26);
  m.attrs.reserve(cfg.attr_count);
  for (std::size_t a = 0; a < cfg.attr_count; ++a) {
    char key[16];
    std::snprintf(key, sizeof key, "attr-%02zu", a);
    m.attrs.emplace_back(key, "value-" + std::to_string(rng() % 100000));
  }
  return m;
}

namespace detail {

inline std::atomic<bool> g_stop{false};
inline void on_stop_signal(int) { g_stop.store(true); }

inline void install_stop_handler() {
  struct sigaction sa {};
  sa.sa_handler = on_stop_signal;
  sigemptyset(&sa.sa_mask);
  ::sigaction(SIGTERM, &sa, nullptr);
  ::sigaction(SIGINT, &sa, nullptr);
}

inline void pin_to(unsigned cpu) {
  const unsigned n = std::max(1u, std::thread::hardware_concurrency());
  cpu_set_t set;
  CPU_ZERO(&set);
  CPU_SET(cpu % n, &set);
  ::sched_setaffinity(0, sizeof set, &set);
}

inline bool write_full(int fd, const void* p, std::size_t n) {
  const char* c = static_cast<const char*>(p);
  while (n > 0) {
    const ssize_t w = ::write(fd, c, n);
    if (w < 0 && errno == EINTR) continue;
    if (w <= 0) return false;
    c += w;
    n -= static_cast<std::size_t>(w);
  }
  return true;
}

inline bool read_full(int fd, void* p, std::size_t n) {
  char* c = static_cast<char*>(p);
  while (n > 0) {
    const ssize_t r = ::read(fd, c, n);
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) return false;
    c += r;
    n -= static_cast<std::size_t>(r);
  }
  return true;
}

/// Waits up to `timeout` for `n` bytes on a pipe.
inline bool read_with_timeout(int fd, void* p, std::size_t n, std::chrono::milliseconds timeout) {
  if (!tcp::detail::wait_fd(fd, POLLIN, deadline_after(timeout))) return false;
  return read_full(fd, p, n);
}

inline BindOptions bind_options_for(const BenchConfig& cfg) {
  BindOptions o;
  o.n_queue_pairs = std::max(1u, cfg.clients);
  EchoMessage probe;
  std::mt19937_64 rng(0);
  probe = make_request(cfg, 0, rng);
  const auto msg = encoded_size(probe);
  o.subarena_bytes = ::shmrpc::detail::align_up(std::max<std::uint64_t>(256 * 1024, 2 * msg + 64 * 1024), 4096);
  o.backoff = cfg.backoff;
  return o;
}

struct ClientReport {
  std::uint64_t count = 0;
  std::uint64_t mismatches = 0;
  std::int32_t failed = 0;
  char error[200] = {};
};

template <RpcStub Stub>
[[noreturn]] void client_child(Stub& stub, const BenchConfig& cfg, unsigned client, int out_fd) {
  ClientReport rep;
  std::vector<Sample> samples;
  samples.reserve(cfg.iterations);
  std::mt19937_64 rng(0x5eed + client);
  CallOptions opts;
  opts.encoding = cfg.encoding;
  opts.repeat = cfg.repeat;
  const auto deadline = std::chrono::milliseconds(cfg.deadline_ms);
  try {
    for (std::size_t i = 0; i < cfg.warmup + cfg.iterations; ++i) {
      const EchoMessage req = make_request(cfg, i, rng);
      CallTiming t;
      opts.deadline = deadline_after(deadline);
      const auto start = Clock::now();
      const EchoMessage resp = stub.call(kEchoMethod, req, opts, &t);
      const auto end = Clock::now();
      if (resp != req) ++rep.mismatches;
      if (i < cfg.warmup) continue;
      auto ns = [](Clock::duration d) {
        return std::chrono::duration_cast<std::chrono::nanoseconds>(d).count();
      };
      samples.push_back({std::max<std::int64_t>(1, ns(end - start)), ns(t.serialize), ns(t.wait),
                         ns(t.decode)});
    }
  } catch (const std::exception& e) {
    rep.failed = 1;
    std::snprintf(rep.error, sizeof rep.error, "client %u: %s", client, e.what());
  }
  rep.count = samples.size();
  write_full(out_fd, &rep, sizeof rep);
  write_full(out_fd, samples.data(), samples.size() * sizeof(Sample));
  ::close(out_fd);
  ::_exit(rep.failed ? 2 : 0);
}

}  // namespace detail

/// Runs one arm: forks a server process and `cfg.clients` client processes,
/// discards warmup calls and returns one sample per timed call. Call errors
/// abort the run; the result is then flagged partial with the error text.
inline ArmResult run_bench(const BenchConfig& cfg) {
  if (cfg.iterations == 0) throw Error(Errc::usage_error, "iterations must be > 0");
  if (cfg.clients == 0) throw Error(Errc::usage_error, "clients must be > 0");
  const std::string service = "echo";
  ArmResult result;
  result.arm = arm_name(cfg.transport, cfg.encoding);

  const BindOptions bind_opts = detail::bind_options_for(cfg);
  std::optional<RegionHandle> region;
  if (cfg.transport == Transport::shm) {
    if (cfg.force_clean) force_clean_region(cfg.region_name);
    try {
      region.emplace(RegionHandle::create(cfg.region_name, required_region_size(bind_opts)));
    } catch (const Error& e) {
      throw Error(Errc::setup_failure, e.what());
    }
  }
  struct Cleanup {
    const BenchConfig& cfg;
    std::optional<RegionHandle>& region;
    ~Cleanup() {
      if (region) {
        region.reset();
        force_clean_region(cfg.region_name);
      }
    }
  } cleanup{cfg, region};

  int ready[2];
  if (::pipe(ready) != 0) throw Error(Errc::setup_failure, "pipe");
  const pid_t server = ::fork();
  if (server < 0) throw Error(Errc::setup_failure, "fork");
  if (server == 0) {
    ::close(ready[0]);
    detail::install_stop_handler();
    if (cfg.pin_cores) detail::pin_to(0);
    int code = 0;
    try {
      if (cfg.transport == Transport::shm) {
        RegionHandle r = RegionHandle::attach(cfg.region_name);
        ServerRuntime rt = ServerRuntime::bind(r, service, echo_handlers(), bind_opts);
        const std::uint32_t port = 0;
        detail::write_full(ready[1], &port, sizeof port);
        rt.serve(detail::g_stop);
      } else {
        auto srv = tcp::BaselineServer::bind(0, echo_handlers());
        const std::uint32_t port = srv->port();
        detail::write_full(ready[1], &port, sizeof port);
        while (!detail::g_stop.load()) ::usleep(2000);
        srv->stop();
      }
    } catch (const std::exception& e) {
      std::fprintf(stderr, "bench server: %s\n", e.what());
      code = 3;
    }
    ::_exit(code);
  }
  ::close(ready[1]);
  auto stop_server = [&] {
    ::kill(server, SIGTERM);
    int status = 0;
    ::waitpid(server, &status, 0);
  };
  std::uint32_t port = 0;
  const bool up = detail::read_with_timeout(ready[0], &port, sizeof port, std::chrono::seconds(10));
  ::close(ready[0]);
  if (!up) {
    stop_server();
    throw Error(Errc::setup_failure, "server did not come up");
  }

  std::vector<std::pair<pid_t, int>> kids;
  for (unsigned c = 0; c < cfg.clients; ++c) {
    int fds[2];
    if (::pipe(fds) != 0) throw Error(Errc::setup_failure, "pipe");
    const pid_t pid = ::fork();
    if (pid < 0) throw Error(Errc::setup_failure, "fork");
    if (pid == 0) {
      ::close(fds[0]);
      if (cfg.pin_cores) detail::pin_to(c + 1);
      try {
        const auto connect_deadline = deadline_after(std::chrono::seconds(10));
        if (cfg.transport == Transport::shm) {
          RegionHandle r = RegionHandle::attach(cfg.region_name);
          ClientStub stub = ClientStub::connect(r, service, connect_deadline, cfg.backoff);
          detail::client_child(stub, cfg, c, fds[1]);
        } else {
          tcp::TcpStub stub =
              tcp::TcpStub::connect("127.0.0.1:" + std::to_string(port), connect_deadline);
          detail::client_child(stub, cfg, c, fds[1]);
        }
      } catch (const std::exception& e) {
        detail::ClientReport rep;
        rep.failed = 1;
        std::snprintf(rep.error, sizeof rep.error, "client %u setup: %s", c, e.what());
        detail::write_full(fds[1], &rep, sizeof rep);
        ::_exit(2);
      }
    }
    ::close(fds[1]);
    kids.emplace_back(pid, fds[0]);
  }

  std::uint64_t mismatches = 0;
  for (auto& [pid, fd] : kids) {
    detail::ClientReport rep;
    if (!detail::read_full(fd, &rep, sizeof rep)) {
      rep.failed = 1;
      std::snprintf(rep.error, sizeof rep.error, "client process died");
    }
    std::vector<Sample> s(rep.count);
    if (rep.count > 0 && !detail::read_full(fd, s.data(), s.size() * sizeof(Sample))) {
      s.clear();
      rep.failed = 1;
    }
    result.samples.insert(result.samples.end(), s.begin(), s.end());
    mismatches += rep.mismatches;
    if (rep.failed) {
      result.partial = true;
      if (result.error.empty()) result.error = rep.error;
    }
    ::close(fd);
    int status = 0;
    ::waitpid(pid, &status, 0);
  }
  stop_server();

  if (mismatches > 0) {
    result.partial = true;
    if (result.error.empty()) result.error = std::to_string(mismatches) + " payload mismatches";
  }
  finalize(result);
  return result;
}

/// The three arms: tcp, shm-copy, shm-reference, with otherwise identical settings.
inline std::vector<ArmResult> compare_all_arms(BenchConfig cfg) {
  std::vector<ArmResult> out;
  cfg.transport = Transport::tcp;
  cfg.encoding = Encoding::copy;
  out.push_back(run_bench(cfg));
  cfg.transport = Transport::shm;
  out.push_back(run_bench(cfg));
  cfg.encoding = Encoding::reference;
  out.push_back(run_bench(cfg));
  return out;
}

}  // namespace shmrpc::bench
