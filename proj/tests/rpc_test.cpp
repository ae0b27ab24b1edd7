#include <gtest/gtest.h>

#include <algorithm>
#include <memory>
#include <random>
#include <set>
#include <thread>

#include "shmrpc/rpc.hpp"
#include "test_util.hpp"

using namespace shmrpc;
using namespace std::chrono_literals;
using shmrpc::testing::ms_since;
using shmrpc::testing::run_in_child;
using shmrpc::testing::unique_name;

namespace {

constexpr std::uint32_t kFaultMethod = 2;
constexpr std::uint32_t kSlowMethod = 3;

BindOptions small_opts(std::uint32_t pairs = 4) {
  BindOptions o;
  o.n_queue_pairs = pairs;
  o.capacity_slots = 8;
  o.slot_size_bytes = 4096;
  o.subarena_bytes = 128 * 1024;
  return o;
}

HandlerTable test_handlers() {
  auto h = echo_handlers();
  h[kFaultMethod] = [](EchoMessage) -> EchoMessage { throw std::runtime_error("boom"); };
  h[kSlowMethod] = [](EchoMessage m) {
    std::this_thread::sleep_for(30ms);
    return m;
  };
  return h;
}

struct Fixture {
  explicit Fixture(BindOptions o = small_opts(), std::uint32_t services = 1)
      : opts(o),
        name(unique_name("rpc")),
        guard(name),
        region(RegionHandle::create(name, required_region_size(o, services))) {}
  BindOptions opts;
  std::string name;
  RegionGuard guard;
  RegionHandle region;
};

/// Runs a bound server's dispatch loop on a thread until destroyed or stopped.
class ServerThread {
 public:
  ServerThread(const RegionHandle& region, const std::string& service, BindOptions o,
               HandlerTable h = test_handlers())
      : rt_(std::make_unique<ServerRuntime>(ServerRuntime::bind(region, service, std::move(h), o))) {
    start();
  }
  ~ServerThread() { stop(); }

  void start() {
    stop_ = false;
    t_ = std::thread([this] { rt_->serve(stop_); });
  }
  /// Stops polling; serve() closes all channels on the way out.
  void stop() {
    stop_ = true;
    if (t_.joinable()) t_.join();
  }
  ServerRuntime& runtime() { return *rt_; }

 private:
  std::unique_ptr<ServerRuntime> rt_;
  std::atomic<bool> stop_{false};
  std::thread t_;
};

/// Polls serve_once on a thread; unlike serve() it leaves channels open on stop.
class Poller {
 public:
  explicit Poller(ServerRuntime& rt) : rt_(rt) {
    t_ = std::thread([this] {
      while (!stop_) {
        if (rt_.serve_once() == 0) std::this_thread::yield();
      }
    });
  }
  ~Poller() { stop(); }
  void stop() {
    stop_ = true;
    if (t_.joinable()) t_.join();
  }

 private:
  ServerRuntime& rt_;
  std::atomic<bool> stop_{false};
  std::thread t_;
};

EchoMessage sample_message(std::uint64_t id, std::size_t body = 16, std::size_t attrs = 1) {
  EchoMessage m{id, std::string(body, static_cast<char>('a' + id % 26)), {}};
  for (std::size_t i = 0; i < attrs; ++i)
    m.attrs.emplace_back("key" + std::to_string(i), "value" + std::to_string(id + i));
  return m;
}

CallOptions opts_for(Encoding e, std::chrono::milliseconds d = 2000ms) {
  CallOptions o;
  o.encoding = e;
  o.deadline = Clock::now() + d;
  return o;
}

Errc code_of(const std::function<void()>& fn, unsigned* status = nullptr) {
  try {
    fn();
  } catch (const Error& e) {
    if (status != nullptr) *status = e.status();
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return Errc::os_failure;
}

}  // namespace

TEST(Rpc, BindPublishesEntryAndFreePairs) {
  Fixture fx;
  auto rt = ServerRuntime::bind(fx.region, "echo", echo_handlers(), fx.opts);
  EXPECT_TRUE(service_bound(fx.region, "echo"));
  const auto pairs = audit_service(fx.region, "echo");
  ASSERT_EQ(pairs.size(), 4u);
  for (const auto& p : pairs) EXPECT_EQ(p.state, registry::kPairFree);
  EXPECT_EQ(rt.free_pairs(), 4u);
  rt.unbind();
  EXPECT_FALSE(service_bound(fx.region, "echo"));
}

TEST(Rpc, BindErrors) {
  Fixture fx(small_opts(), 1);
  auto rt = ServerRuntime::bind(fx.region, "echo", echo_handlers(), fx.opts);
  EXPECT_EQ(code_of([&] { ServerRuntime::bind(fx.region, "echo", echo_handlers(), fx.opts); }),
            Errc::name_taken);
  // The region was sized for exactly one service.
  EXPECT_EQ(code_of([&] { ServerRuntime::bind(fx.region, "other", echo_handlers(), fx.opts); }),
            Errc::region_overflow);
  EXPECT_EQ(code_of([&] { ServerRuntime::bind(fx.region, "", echo_handlers(), fx.opts); }),
            Errc::usage_error);
}

TEST(Rpc, RegistryFullAfterEightServices) {
  const auto o = small_opts(1);
  Fixture fx(o, kRegistryEntries + 1);
  std::vector<ServerRuntime> bound;
  for (std::uint32_t i = 0; i < kRegistryEntries; ++i)
    bound.push_back(ServerRuntime::bind(fx.region, "svc" + std::to_string(i), echo_handlers(), o));
  EXPECT_EQ(code_of([&] { ServerRuntime::bind(fx.region, "extra", echo_handlers(), o); }),
            Errc::registry_full);
}

TEST(Rpc, ConnectToUnknownServiceFails) {
  Fixture fx;
  EXPECT_EQ(code_of([&] { ClientStub::connect(fx.region, "nobody", Clock::now() + 10ms); }),
            Errc::service_not_found);
}

TEST(Rpc, ConnectTimesOutWhenServerNotPolling) {
  Fixture fx;
  auto rt = ServerRuntime::bind(fx.region, "echo", echo_handlers(), fx.opts);
  const auto t0 = Clock::now();
  EXPECT_EQ(code_of([&] { ClientStub::connect(fx.region, "echo", t0 + 10ms); }), Errc::timeout);
  EXPECT_LT(ms_since(t0), 100.0);
  // The withdrawn claim leaves nothing behind for the server to assign.
  rt.serve_once();
  EXPECT_EQ(rt.free_pairs(), 4u);
  Poller poll(rt);
  auto c = ClientStub::connect(fx.region, "echo", Clock::now() + 2s);
  EXPECT_EQ(c.queue_pair_index(), 0u);
}

TEST(Rpc, AssignsLowestFreePairAndRejectsWhenFull) {
  Fixture fx(small_opts(2));
  auto rt = ServerRuntime::bind(fx.region, "echo", echo_handlers(), fx.opts);
  Poller poll(rt);
  auto a = ClientStub::connect(fx.region, "echo", Clock::now() + 2s);
  auto b = ClientStub::connect(fx.region, "echo", Clock::now() + 2s);
  EXPECT_EQ(a.queue_pair_index(), 0u);
  EXPECT_EQ(b.queue_pair_index(), 1u);
  EXPECT_EQ(code_of([&] { ClientStub::connect(fx.region, "echo", Clock::now() + 2s); }),
            Errc::no_capacity);
  a.disconnect();
  // Pair 0 becomes free once the server notices the release.
  auto deadline = Clock::now() + 2s;
  std::optional<ClientStub> c;
  while (!c && Clock::now() < deadline) {
    try {
      c.emplace(ClientStub::connect(fx.region, "echo", Clock::now() + 2s));
    } catch (const Error& e) {
      ASSERT_EQ(e.code(), Errc::no_capacity);
    }
  }
  ASSERT_TRUE(c);
  EXPECT_EQ(c->queue_pair_index(), 0u);
}

TEST(Rpc, RacingClientsGetDistinctPairs) {
  for (int trial = 0; trial < 10; ++trial) {
    Fixture fx(small_opts(8));
    auto rt = ServerRuntime::bind(fx.region, "echo", echo_handlers(), fx.opts);
    Poller poll(rt);
    std::vector<std::optional<ClientStub>> stubs(8);
    std::vector<std::thread> ts;
    for (int i = 0; i < 8; ++i)
      ts.emplace_back([&, i] { stubs[i].emplace(ClientStub::connect(fx.region, "echo", Clock::now() + 5s)); });
    for (auto& t : ts) t.join();
    std::set<std::uint32_t> seen;
    for (auto& s : stubs) {
      ASSERT_TRUE(s);
      seen.insert(s->queue_pair_index());
    }
    EXPECT_EQ(seen.size(), 8u);
    EXPECT_EQ(rt.free_pairs(), 0u);
  }
}

TEST(Rpc, EchoOverBothEncodings) {
  Fixture fx;
  ServerThread server(fx.region, "echo", fx.opts);
  auto c = ClientStub::connect(fx.region, "echo", Clock::now() + 2s);
  for (auto enc : {Encoding::copy, Encoding::reference}) {
    for (std::size_t body : {0u, 5u, 16u, 4000u, 65536u}) {
      const auto req = sample_message(body + 1, body, 3);
      EXPECT_EQ(c.call(kEchoMethod, req, opts_for(enc)), req) << body;
    }
  }
  auto o = opts_for(Encoding::copy);
  o.repeat = 8;
  const auto req = sample_message(9, 1000, 32);
  EXPECT_EQ(c.call(kEchoMethod, req, o), req);
  EXPECT_EQ(c.stale_responses(), 0u);
}

TEST(Rpc, CallTimesOutWhenServerIdle) {
  Fixture fx;
  auto rt = ServerRuntime::bind(fx.region, "echo", echo_handlers(), fx.opts);
  std::optional<ClientStub> c;
  {
    Poller poll(rt);
    c.emplace(ClientStub::connect(fx.region, "echo", Clock::now() + 2s));
  }
  for (int i = 0; i < 5; ++i) {
    const auto t0 = Clock::now();
    EXPECT_EQ(code_of([&] { c->call(kEchoMethod, sample_message(1), opts_for(Encoding::copy, 10ms)); }),
              Errc::timeout);
    const double ms = ms_since(t0);
    EXPECT_GE(ms, 10.0);
    EXPECT_LT(ms, 60.0);
  }
  EXPECT_EQ(c->timeouts(), 5u);
}

TEST(Rpc, StaleResponseIsDiscardedAndCounted) {
  Fixture fx;
  ServerThread server(fx.region, "echo", fx.opts);
  auto c = ClientStub::connect(fx.region, "echo", Clock::now() + 2s);
  EXPECT_EQ(code_of([&] { c.call(kSlowMethod, sample_message(1), opts_for(Encoding::copy, 5ms)); }),
            Errc::timeout);
  const auto req = sample_message(2, 100, 2);
  EXPECT_EQ(c.call(kEchoMethod, req, opts_for(Encoding::reference)), req);
  EXPECT_EQ(c.stale_responses(), 1u);
  EXPECT_EQ(c.timeouts(), 1u);
}

TEST(Rpc, HandlerFaultAndUnknownMethodAreServerErrors) {
  Fixture fx;
  ServerThread server(fx.region, "echo", fx.opts);
  auto c = ClientStub::connect(fx.region, "echo", Clock::now() + 2s);
  unsigned status = 0;
  EXPECT_EQ(code_of([&] { c.call(kFaultMethod, sample_message(1), opts_for(Encoding::copy)); }, &status),
            Errc::server_error);
  EXPECT_EQ(status, status_code::kHandlerFault);
  EXPECT_EQ(code_of([&] { c.call(99, sample_message(1), opts_for(Encoding::reference)); }, &status),
            Errc::server_error);
  EXPECT_EQ(status, status_code::kUnknownMethod);
  // The dispatch loop survives both.
  const auto req = sample_message(3);
  EXPECT_EQ(c.call(kEchoMethod, req, opts_for(Encoding::copy)), req);
}

TEST(Rpc, StoppedServerClosesChannels) {
  Fixture fx;
  ServerThread server(fx.region, "echo", fx.opts);
  auto c = ClientStub::connect(fx.region, "echo", Clock::now() + 2s);
  EXPECT_NO_THROW(c.call(kEchoMethod, sample_message(1), opts_for(Encoding::copy)));
  server.stop();
  EXPECT_EQ(code_of([&] { c.call(kEchoMethod, sample_message(2), opts_for(Encoding::copy)); }),
            Errc::channel_closed);
}

TEST(Rpc, DisconnectClosesStubAndFreesPair) {
  Fixture fx(small_opts(1));
  ServerThread server(fx.region, "echo", fx.opts);
  auto a = ClientStub::connect(fx.region, "echo", Clock::now() + 2s);
  a.disconnect();
  EXPECT_EQ(code_of([&] { a.call(kEchoMethod, sample_message(1), opts_for(Encoding::copy)); }),
            Errc::channel_closed);
  EXPECT_EQ(code_of([&] { a.disconnect(); }), Errc::usage_error);
  std::optional<ClientStub> b;
  const auto deadline = Clock::now() + 2s;
  while (!b && Clock::now() < deadline) {
    try {
      b.emplace(ClientStub::connect(fx.region, "echo", Clock::now() + 2s));
    } catch (const Error& e) {
      ASSERT_EQ(e.code(), Errc::no_capacity);
    }
  }
  ASSERT_TRUE(b);
  const auto req = sample_message(4);
  EXPECT_EQ(b->call(kEchoMethod, req, opts_for(Encoding::reference)), req);
}

TEST(Rpc, ConnectDisconnectChurnLeavesAllPairsFree) {
  Fixture fx(small_opts(2));
  auto rt = ServerRuntime::bind(fx.region, "echo", echo_handlers(), fx.opts);
  {
    Poller poll(rt);
    for (int i = 0; i < 1000; ++i) {
      for (;;) {
        try {
          auto c = ClientStub::connect(fx.region, "echo", Clock::now() + 2s);
          if (i % 10 == 0) c.call(kEchoMethod, sample_message(i), opts_for(Encoding::copy));
          c.disconnect();
          break;
        } catch (const Error& e) {
          ASSERT_EQ(e.code(), Errc::no_capacity);  // a release not yet observed
        }
      }
    }
  }
  rt.serve_once();
  EXPECT_EQ(rt.free_pairs(), 2u);
}

// With one request waiting on every pair, one pass serves each pair once.
TEST(Rpc, ServeOnceVisitsEveryPair) {
  Fixture fx(small_opts(4));
  auto rt = ServerRuntime::bind(fx.region, "echo", echo_handlers(), fx.opts);
  std::vector<ClientStub> stubs;
  {
    Poller poll(rt);
    for (int i = 0; i < 4; ++i) stubs.push_back(ClientStub::connect(fx.region, "echo", Clock::now() + 2s));
  }
  std::vector<std::thread> callers;
  for (int i = 0; i < 4; ++i)
    callers.emplace_back([&, i] { stubs[i].call(kEchoMethod, sample_message(i), opts_for(Encoding::copy, 5000ms)); });

  const auto audit = audit_service(fx.region, "echo");
  const auto deadline = Clock::now() + 5s;
  for (const auto& p : audit) {
    auto ch = RingChannel::open(fx.region, p.request_channel_offset);
    while (ch.occupancy() == 0 && Clock::now() < deadline) std::this_thread::yield();
    ASSERT_EQ(ch.occupancy(), 1u);
  }
  EXPECT_EQ(rt.serve_once(), 4u);
  for (auto& t : callers) t.join();
  for (std::uint32_t i = 0; i < 4; ++i) EXPECT_EQ(rt.handled(i), 1u);
  EXPECT_EQ(rt.serve_once(), 0u);
}

TEST(Rpc, ConcurrentClientsGetTheirOwnResponses) {
  Fixture fx;
  ServerThread server(fx.region, "echo", fx.opts);
  std::atomic<int> mismatches{0};
  std::vector<std::thread> ts;
  for (int c = 0; c < 4; ++c) {
    ts.emplace_back([&, c] {
      auto stub = ClientStub::connect(fx.region, "echo", Clock::now() + 5s);
      std::mt19937_64 rng(c);
      for (int i = 0; i < 1000; ++i) {
        const auto req = sample_message(c * 100000 + i, rng() % 3000, rng() % 4);
        const auto enc = rng() % 2 ? Encoding::copy : Encoding::reference;
        if (stub.call(kEchoMethod, req, opts_for(enc, 5000ms)) != req) ++mismatches;
      }
    });
  }
  for (auto& t : ts) t.join();
  EXPECT_EQ(mismatches, 0);
}

TEST(Rpc, ClientsInOtherProcesses) {
  Fixture fx;
  ServerThread server(fx.region, "echo", fx.opts);
  const std::string name = fx.name;
  std::vector<pid_t> kids;
  for (int c = 0; c < 3; ++c) {
    const pid_t pid = ::fork();
    if (pid == 0) {
      int rc = 0;
      try {
        auto region = RegionHandle::attach(name);
        auto stub = ClientStub::connect(region, "echo", Clock::now() + 5s);
        for (int i = 0; i < 500; ++i) {
          const auto req = sample_message(c * 1000 + i, 10 + i % 2000, 2);
          const auto enc = i % 2 ? Encoding::copy : Encoding::reference;
          if (stub.call(kEchoMethod, req, opts_for(enc, 5000ms)) != req) rc = 1;
        }
        stub.disconnect();
      } catch (const std::exception& e) {
        std::fprintf(stderr, "client %d: %s\n", c, e.what());
        rc = 2;
      }
      ::_exit(rc);
    }
    kids.push_back(pid);
  }
  for (pid_t pid : kids) {
    int status = 0;
    ::waitpid(pid, &status, 0);
    EXPECT_TRUE(WIFEXITED(status) && WEXITSTATUS(status) == 0);
  }
}

// Every cross-module reference in shared state is an in-bounds offset, never
// an address from this process's mapping.
TEST(Rpc, SharedStateHoldsOffsetsNotAddresses) {
  Fixture fx;
  ServerThread server(fx.region, "echo", fx.opts);
  auto c = ClientStub::connect(fx.region, "echo", Clock::now() + 2s);
  c.call(kEchoMethod, sample_message(1, 5000, 2), opts_for(Encoding::reference));

  const auto size = fx.region.size_bytes();
  for (const auto& p : audit_service(fx.region, "echo")) {
    for (auto off : {p.request_channel_offset, p.response_channel_offset, p.client_arena_offset,
                     p.server_arena_offset}) {
      EXPECT_LT(off, size);
      EXPECT_EQ(off % 64, 0u);
    }
  }
  const auto base = reinterpret_cast<std::uintptr_t>(fx.region.at(0, 1));
  const auto table_end = kArenaOffset + service_footprint(fx.opts) -
                         fx.opts.n_queue_pairs * queue_pair_footprint(fx.opts);
  for (std::uint64_t off = 0; off + 8 <= table_end; off += 8) {
    std::uint64_t v;
    std::memcpy(&v, fx.region.at(off, 8), 8);
    EXPECT_FALSE(v >= base && v < base + size) << "address-like word at offset " << off;
  }
}
