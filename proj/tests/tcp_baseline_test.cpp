#include <gtest/gtest.h>

#include <thread>

#include "shmrpc/rpc.hpp"
#include "shmrpc/tcp_baseline.hpp"
#include "test_util.hpp"
#include "workload.hpp"

using namespace shmrpc;
using namespace std::chrono_literals;
using shmrpc::testing::differential_handlers;
using shmrpc::testing::ms_since;
using shmrpc::testing::run_workload;
using shmrpc::testing::unique_name;

namespace {

CallOptions copy_opts(std::chrono::milliseconds d = 2000ms) {
  CallOptions o;
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

std::uint16_t unused_port() {
  auto s = tcp::BaselineServer::bind(0, echo_handlers());
  const auto port = s->port();
  s->stop();
  return port;
}

}  // namespace

TEST(TcpBaseline, EchoRoundTrip) {
  auto server = tcp::BaselineServer::bind(0, echo_handlers());
  auto c = tcp::TcpStub::connect("127.0.0.1:" + std::to_string(server->port()), Clock::now() + 2s);
  const EchoMessage req{42, std::string(70'000, 'q'), {{"a", "1"}, {"b", ""}}};
  EXPECT_EQ(c.call(kEchoMethod, req, copy_opts()), req);
  auto o = copy_opts();
  o.repeat = 16;
  EXPECT_EQ(c.call(kEchoMethod, req, o), req);
  EXPECT_EQ(server->handled(), 2u);
}

TEST(TcpBaseline, BarePortAddress) {
  auto server = tcp::BaselineServer::bind(0, echo_handlers());
  auto c = tcp::TcpStub::connect(std::to_string(server->port()), Clock::now() + 2s);
  EXPECT_EQ(c.call(kEchoMethod, EchoMessage{1, "x", {}}, copy_opts()).body, "x");
}

TEST(TcpBaseline, ConnectToClosedPortIsRefused) {
  const auto port = unused_port();
  EXPECT_EQ(code_of([&] { tcp::TcpStub::connect("127.0.0.1:" + std::to_string(port), Clock::now() + 1s); }),
            Errc::connection_refused);
}

TEST(TcpBaseline, HeaderBlocksAreRealisticAndParsed) {
  auto server = tcp::BaselineServer::bind(0, echo_handlers());
  auto c = tcp::TcpStub::connect(std::to_string(server->port()), Clock::now() + 2s);
  c.call(kEchoMethod, EchoMessage{1, "tiny", {}}, copy_opts());
  EXPECT_GE(c.last_request_header_bytes(), 256u);
  EXPECT_GE(c.last_response_header_bytes(), 256u);
  EXPECT_GE(c.header_lines_parsed(), 8u);
  // The server parsed every line of the request header block.
  const auto deadline = Clock::now() + 1s;
  while (server->header_lines_parsed() < 8 && Clock::now() < deadline) std::this_thread::yield();
  EXPECT_GE(server->header_lines_parsed(), 8u);
  c.call(kEchoMethod, EchoMessage{2, "tiny", {}}, copy_opts());
  EXPECT_GE(c.header_lines_parsed(), 16u);
}

TEST(TcpBaseline, ParseHeaderBlock) {
  std::string msg;
  const std::uint32_t status = 3;
  tcp::format_message(msg, 7, 99, "abcd", "PAYLOAD", &status, 4);
  const auto end = msg.find("\r\n\r\n");
  ASSERT_NE(end, std::string::npos);
  tcp::WireMessage w;
  std::size_t len = 0;
  tcp::parse_header_block(std::string_view(msg).substr(0, end + 2), w, len);
  EXPECT_EQ(w.method, 7u);
  EXPECT_EQ(w.request_id, 99u);
  EXPECT_EQ(w.status, 3u);
  EXPECT_EQ(w.repeat, 4u);
  EXPECT_EQ(w.trace_id, "abcd");
  EXPECT_EQ(len, 7u);
  EXPECT_EQ(msg.substr(end + 4), "PAYLOAD");
}

TEST(TcpBaseline, MalformedHeadersAreProtocolErrors) {
  tcp::WireMessage w;
  std::size_t len = 0;
  for (std::string_view bad : {"method 1\r\n", "method: x\r\nrequest-id: 1\r\ncontent-length: 0\r\ntrace-id: t\r\n",
                               "request-id: 1\r\ncontent-length: 0\r\ntrace-id: t\r\n", ": v\r\n",
                               "method: 1\r\nrequest-id: 1\r\ncontent-length: 0\r\ntrace-id: t"})
    EXPECT_EQ(code_of([&] { tcp::parse_header_block(bad, w, len); }), Errc::protocol_error) << bad;
}

TEST(TcpBaseline, ServerErrorsMatchShmStatusCodes) {
  auto server = tcp::BaselineServer::bind(0, differential_handlers());
  auto c = tcp::TcpStub::connect(std::to_string(server->port()), Clock::now() + 2s);
  unsigned status = 0;
  EXPECT_EQ(code_of([&] { c.call(shmrpc::testing::kFaultMethod, EchoMessage{}, copy_opts()); }, &status),
            Errc::server_error);
  EXPECT_EQ(status, status_code::kHandlerFault);
  EXPECT_EQ(code_of([&] { c.call(1234, EchoMessage{}, copy_opts()); }, &status), Errc::server_error);
  EXPECT_EQ(status, status_code::kUnknownMethod);
}

TEST(TcpBaseline, TimeoutThenStaleResponseDiscarded) {
  auto h = echo_handlers();
  h[5] = [](EchoMessage m) {
    std::this_thread::sleep_for(30ms);
    return m;
  };
  auto server = tcp::BaselineServer::bind(0, h);
  auto c = tcp::TcpStub::connect(std::to_string(server->port()), Clock::now() + 2s);
  const auto t0 = Clock::now();
  EXPECT_EQ(code_of([&] { c.call(5, EchoMessage{1, "slow", {}}, copy_opts(5ms)); }), Errc::timeout);
  EXPECT_LT(ms_since(t0), 50.0);
  const EchoMessage req{2, "fast", {}};
  EXPECT_EQ(c.call(kEchoMethod, req, copy_opts()), req);
  EXPECT_EQ(c.stale_responses(), 1u);
}

TEST(TcpBaseline, StoppedServerClosesConnection) {
  auto server = tcp::BaselineServer::bind(0, echo_handlers());
  auto c = tcp::TcpStub::connect(std::to_string(server->port()), Clock::now() + 2s);
  c.call(kEchoMethod, EchoMessage{}, copy_opts());
  server->stop();
  EXPECT_EQ(code_of([&] { c.call(kEchoMethod, EchoMessage{}, copy_opts()); }), Errc::channel_closed);
  c.disconnect();
  EXPECT_EQ(code_of([&] { c.call(kEchoMethod, EchoMessage{}, copy_opts()); }), Errc::channel_closed);
}

// The same randomized workload through both transports yields identical
// responses and identical error classes.
TEST(TcpBaseline, DifferentialAgainstSharedMemory) {
  auto tcp_server = tcp::BaselineServer::bind(0, differential_handlers());
  auto tcp_stub = tcp::TcpStub::connect(std::to_string(tcp_server->port()), Clock::now() + 2s);

  BindOptions o;
  o.n_queue_pairs = 1;
  o.capacity_slots = 8;
  o.slot_size_bytes = 4096;
  const auto name = unique_name("diff");
  RegionGuard guard(name);
  auto region = RegionHandle::create(name, required_region_size(o));
  auto rt = ServerRuntime::bind(region, "echo", differential_handlers(), o);
  std::atomic<bool> stop{false};
  std::thread serve([&] { rt.serve(stop); });
  auto shm_stub = ClientStub::connect(region, "echo", Clock::now() + 2s);

  const auto via_tcp = run_workload(tcp_stub, 17, 1000, Encoding::copy, 8192);
  const auto via_copy = run_workload(shm_stub, 17, 1000, Encoding::copy, 8192);
  const auto via_ref = run_workload(shm_stub, 17, 1000, Encoding::reference, 8192);
  stop = true;
  serve.join();

  ASSERT_EQ(via_tcp.size(), 1000u);
  EXPECT_TRUE(via_tcp == via_copy);
  EXPECT_TRUE(via_tcp == via_ref);
  int errors = 0;
  for (const auto& r : via_tcp) errors += r.error.has_value();
  EXPECT_GT(errors, 0);
}
