#pragma once

// Loopback-socket control arm exposing the same stub/handler API as the
// shared-memory runtime, while keeping the costs that path removes: kernel
// socket I/O, text header processing and mandatory copy-codec serialization.
//
// Every message is an ASCII header block followed by copy-codec bytes:
//   key: value\r\n ... \r\n  (empty line ends the block)
// Required keys: method, request-id, content-length, trace-id. Responses add
// status. Four fixed padding headers keep each block at >= 256 bytes.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "shmrpc/backoff.hpp"
#include "shmrpc/codec.hpp"
#include "shmrpc/error.hpp"
#include "shmrpc/stub.hpp"

namespace shmrpc::tcp {

inline constexpr std::size_t kMaxHeaderBlock = 64 * 1024;
inline constexpr std::size_t kMaxContentLength = 256u * 1024 * 1024;

inline constexpr std::string_view kPaddingHeaders =
    "user-agent: shmrpc-baseline/1.0 (emulated-l7; linux x86_64; persistent-stream)\r\n"
    "accept-encoding: identity;q=1.0, gzip;q=0, deflate;q=0\r\n"
    "x-forwarded-for: 127.0.0.1, 127.0.0.1\r\n"
    "x-envoy-upstream-service-time: 0; route=echo.default.svc.cluster.local\r\n";

namespace detail {

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) noexcept : fd_(fd) {}
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Fd() { reset(); }
  int get() const noexcept { return fd_; }
  explicit operator bool() const noexcept { return fd_ >= 0; }
  void reset() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

inline void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

/// Waits for `events` on `fd` until `deadline`. False on timeout.
inline bool wait_fd(int fd, short events, Deadline deadline) {
  for (;;) {
    timespec ts{};
    timespec* tsp = nullptr;
    if (deadline != Deadline::max()) {
      const auto left = deadline - Clock::now();
      if (left <= Clock::duration::zero()) return false;
      const auto ns = std::chrono::duration_cast<std::chrono::nanoseconds>(left).count();
      ts.tv_sec = static_cast<time_t>(ns / 1'000'000'000);
      ts.tv_nsec = static_cast<long>(ns % 1'000'000'000);
      tsp = &ts;
    }
    pollfd p{fd, events, 0};
    const int r = ::ppoll(&p, 1, tsp, nullptr);
    if (r > 0) return true;
    if (r == 0) continue;  // re-check the clock; ppoll may wake early
    if (errno != EINTR) throw Error(Errc::os_failure, std::string("ppoll: ") + std::strerror(errno));
  }
}

inline bool send_all(int fd, std::string_view data, Deadline deadline) {
  while (!data.empty()) {
    const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL | MSG_DONTWAIT);
    if (n > 0) {
      data.remove_prefix(static_cast<std::size_t>(n));
      continue;
    }
    if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) {
      if (!wait_fd(fd, POLLOUT, deadline)) return false;
      continue;
    }
    if (n < 0 && errno == EINTR) continue;
    throw Error(Errc::channel_closed, std::string("send: ") + std::strerror(errno));
  }
  return true;
}

inline bool iequals(std::string_view a, std::string_view b) noexcept {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) ==
                  std::tolower(static_cast<unsigned char>(y));
         });
}

template <typename T>
T parse_number(std::string_view v, std::string_view key) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw Error(Errc::protocol_error, "bad numeric value for " + std::string(key));
  return out;
}

}  // namespace detail

/// One parsed wire message.
struct WireMessage {
  std::uint32_t method = 0;
  std::uint64_t request_id = 0;
  std::uint32_t status = 0;
  unsigned repeat = 1;
  std::string trace_id;
  std::string payload;
  std::size_t header_bytes = 0;
  std::size_t header_lines = 0;
};

/// Parses a header block (without the terminating empty line's CRLF pair).
/// Throws ProtocolError on malformed lines or missing required keys.
inline void parse_header_block(std::string_view block, WireMessage& out,
                               std::size_t& content_length) {
  bool have_method = false, have_id = false, have_len = false, have_trace = false;
  out.status = 0;
  out.repeat = 1;
  out.header_lines = 0;
  while (!block.empty()) {
    const auto eol = block.find("\r\n");
    if (eol == std::string_view::npos) throw Error(Errc::protocol_error, "unterminated header line");
    const std::string_view line = block.substr(0, eol);
    block.remove_prefix(eol + 2);
    const auto colon = line.find(':');
    if (colon == std::string_view::npos || colon == 0)
      throw Error(Errc::protocol_error, "header line without key: '" + std::string(line) + "'");
    const std::string_view key = line.substr(0, colon);
    std::string_view value = line.substr(colon + 1);
    while (!value.empty() && value.front() == ' ') value.remove_prefix(1);
    ++out.header_lines;
    if (detail::iequals(key, "method")) {
      out.method = detail::parse_number<std::uint32_t>(value, key);
      have_method = true;
    } else if (detail::iequals(key, "request-id")) {
      out.request_id = detail::parse_number<std::uint64_t>(value, key);
      have_id = true;
    } else if (detail::iequals(key, "content-length")) {
      content_length = detail::parse_number<std::size_t>(value, key);
      if (content_length > kMaxContentLength) throw Error(Errc::protocol_error, "content too long");
      have_len = true;
    } else if (detail::iequals(key, "trace-id")) {
      out.trace_id.assign(value);
      have_trace = true;
    } else if (detail::iequals(key, "status")) {
      out.status = detail::parse_number<std::uint32_t>(value, key);
    } else if (detail::iequals(key, "repeat")) {
      out.repeat = std::max(1u, detail::parse_number<unsigned>(value, key));
    }
  }
  if (!have_method || !have_id || !have_len || !have_trace)
    throw Error(Errc::protocol_error, "missing required header");
}

/// Appends a full message (header block + payload) to `out`.
inline void format_message(std::string& out, std::uint32_t method, std::uint64_t request_id,
                           std::string_view trace_id, std::string_view payload,
                           const std::uint32_t* status, unsigned repeat) {
  char num[32];
  auto put = [&](std::string_view key, std::string_view value) {
    out.append(key).append(": ").append(value).append("\r\n");
  };
  auto put_num = [&](std::string_view key, auto v) {
    const auto r = std::to_chars(num, num + sizeof num, v);
    put(key, std::string_view(num, static_cast<std::size_t>(r.ptr - num)));
  };
  put_num("method", method);
  put_num("request-id", request_id);
  put_num("content-length", payload.size());
  put("trace-id", trace_id);
  if (status != nullptr) put_num("status", *status);
  if (repeat > 1) put_num("repeat", repeat);
  out.append(kPaddingHeaders);
  out.append("\r\n");
  out.append(payload);
}

/// Buffered reader of wire messages from a stream socket.
class MessageReader {
 public:
  /// False on deadline; throws ChannelClosed on EOF, ProtocolError on bad input.
  bool read(int fd, Deadline deadline, WireMessage& out) {
    for (;;) {
      if (try_extract(out)) return true;
      if (buf_.size() - start_ > kMaxHeaderBlock + kMaxContentLength)
        throw Error(Errc::protocol_error, "message too large");
      char tmp[64 * 1024];
      const ssize_t n = ::recv(fd, tmp, sizeof tmp, MSG_DONTWAIT);
      if (n > 0) {
        if (start_ > 0 && start_ == buf_.size()) {
          buf_.clear();
          start_ = 0;
        }
        buf_.append(tmp, static_cast<std::size_t>(n));
        continue;
      }
      if (n == 0) throw Error(Errc::channel_closed, "peer closed connection");
      if (errno == EINTR) continue;
      if (errno != EAGAIN && errno != EWOULDBLOCK)
        throw Error(Errc::channel_closed, std::string("recv: ") + std::strerror(errno));
      if (!detail::wait_fd(fd, POLLIN, deadline)) return false;
    }
  }

  std::uint64_t header_lines_parsed() const noexcept { return lines_parsed_; }

 private:
  bool try_extract(WireMessage& out) {
    const std::string_view avail(buf_.data() + start_, buf_.size() - start_);
    const auto end = avail.find("\r\n\r\n");
    if (end == std::string_view::npos) {
      if (avail.size() > kMaxHeaderBlock) throw Error(Errc::protocol_error, "header block too long");
      return false;
    }
    std::size_t content_length = 0;
    parse_header_block(avail.substr(0, end + 2), out, content_length);
    const std::size_t total = end + 4 + content_length;
    if (avail.size() < total) return false;
    lines_parsed_ += out.header_lines;
    out.header_bytes = end + 4;
    out.payload.assign(avail.substr(end + 4, content_length));
    start_ += total;
    if (start_ == buf_.size()) {
      buf_.clear();
      start_ = 0;
    } else if (start_ > (1u << 20)) {
      buf_.erase(0, start_);
      start_ = 0;
    }
    return true;
  }

  std::string buf_;
  std::size_t start_ = 0;
  std::uint64_t lines_parsed_ = 0;
};

/// Thread-per-connection loopback server.
class BaselineServer {
 public:
  BaselineServer(const BaselineServer&) = delete;
  BaselineServer& operator=(const BaselineServer&) = delete;
  ~BaselineServer() { stop(); }

  /// Listens on 127.0.0.1:`port` (0 picks an ephemeral port) and starts accepting.
  static std::unique_ptr<BaselineServer> bind(std::uint16_t port, HandlerTable handlers) {
    detail::Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (!fd) throw Error(Errc::os_failure, std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
        ::listen(fd.get(), 64) != 0)
      throw Error(Errc::setup_failure, std::string("bind/listen: ") + std::strerror(errno));
    socklen_t len = sizeof addr;
    ::getsockname(fd.get(), reinterpret_cast<sockaddr*>(&addr), &len);

    std::unique_ptr<BaselineServer> s(new BaselineServer());
    s->listener_ = std::move(fd);
    s->port_ = ntohs(addr.sin_port);
    s->handlers_ = std::move(handlers);
    s->acceptor_ = std::thread([srv = s.get()] { srv->accept_loop(); });
    return s;
  }

  std::uint16_t port() const noexcept { return port_; }
  std::uint64_t handled() const noexcept { return handled_.load(std::memory_order_relaxed); }
  std::uint64_t header_lines_parsed() const noexcept {
    return lines_parsed_.load(std::memory_order_relaxed);
  }

  /// Stops accepting, shuts every connection down and joins all threads.
  void stop() {
    if (stopping_.exchange(true)) return;
    if (listener_) ::shutdown(listener_.get(), SHUT_RDWR);
    if (acceptor_.joinable()) acceptor_.join();
    std::vector<std::thread> workers;
    {
      std::lock_guard lk(mu_);
      for (int fd : conns_) ::shutdown(fd, SHUT_RDWR);
      workers.swap(workers_);
    }
    for (auto& t : workers) t.join();
    listener_.reset();
  }

 private:
  BaselineServer() = default;

  void accept_loop() {
    while (!stopping_.load()) {
      const int c = ::accept4(listener_.get(), nullptr, nullptr, SOCK_CLOEXEC);
      if (c < 0) {
        if (errno == EINTR || errno == ECONNABORTED) continue;
        return;
      }
      detail::set_nodelay(c);
      std::lock_guard lk(mu_);
      if (stopping_.load()) {
        ::close(c);
        return;
      }
      conns_.push_back(c);
      workers_.emplace_back([this, c] { connection_loop(c); });
    }
  }

  void connection_loop(int fd) {
    MessageReader reader;
    WireMessage req;
    EchoMessage msg;
    std::string out;
    std::vector<std::byte> enc;
    try {
      for (;;) {
        if (!reader.read(fd, Deadline::max(), req)) continue;
        lines_parsed_.fetch_add(req.header_lines, std::memory_order_relaxed);
        std::uint32_t status = status_code::kOk;
        out.clear();
        enc.clear();
        try {
          decode_copy_into(std::as_bytes(std::span(req.payload.data(), req.payload.size())), msg,
                           req.repeat);
        } catch (const Error&) {
          status = status_code::kDecodeError;
        }
        if (status == status_code::kOk) {
          const auto h = handlers_.find(req.method);
          if (h == handlers_.end()) {
            status = status_code::kUnknownMethod;
          } else {
            try {
              EchoMessage resp = h->second(std::move(msg));
              enc.resize(encoded_size(resp));
              encode_copy_into(resp, enc, req.repeat);
              msg = std::move(resp);
            } catch (...) {
              status = status_code::kHandlerFault;
              enc.clear();
            }
          }
        }
        format_message(out, req.method, req.request_id, req.trace_id,
                       std::string_view(reinterpret_cast<const char*>(enc.data()), enc.size()),
                       &status, req.repeat);
        handled_.fetch_add(1, std::memory_order_relaxed);
        if (!detail::send_all(fd, out, Deadline::max())) break;
      }
    } catch (const Error&) {
      // Peer went away or sent garbage; drop the connection.
    }
    std::lock_guard lk(mu_);
    conns_.erase(std::remove(conns_.begin(), conns_.end(), fd), conns_.end());
    ::close(fd);
  }

  detail::Fd listener_;
  std::uint16_t port_ = 0;
  HandlerTable handlers_;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex mu_;
  std::vector<int> conns_;
  std::vector<std::thread> workers_;
  std::atomic<std::uint64_t> handled_{0};
  std::atomic<std::uint64_t> lines_parsed_{0};
};

/// Baseline client; same call contract as the shared-memory ClientStub.
class TcpStub {
 public:
  TcpStub(TcpStub&&) noexcept = default;
  TcpStub& operator=(TcpStub&&) noexcept = default;

  /// `address` is "host:port" with host 127.0.0.1 / localhost, or just a port.
  static TcpStub connect(std::string_view address, Deadline deadline) {
    std::string_view host = "127.0.0.1";
    std::string_view port_text = address;
    if (const auto colon = address.rfind(':'); colon != std::string_view::npos) {
      host = address.substr(0, colon);
      port_text = address.substr(colon + 1);
    }
    if (host == "localhost") host = "127.0.0.1";
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(detail::parse_number<std::uint16_t>(port_text, "port"));
    if (::inet_pton(AF_INET, std::string(host).c_str(), &addr.sin_addr) != 1)
      throw Error(Errc::usage_error, "unsupported host '" + std::string(host) + "'");

    detail::Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC | SOCK_NONBLOCK, 0));
    if (!fd) throw Error(Errc::os_failure, std::string("socket: ") + std::strerror(errno));
    if (::connect(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      if (errno == ECONNREFUSED) throw Error(Errc::connection_refused, std::string(address));
      if (errno != EINPROGRESS) throw Error(Errc::os_failure, std::strerror(errno));
      if (!detail::wait_fd(fd.get(), POLLOUT, deadline))
        throw Error(Errc::timeout, "connect " + std::string(address));
      int err = 0;
      socklen_t len = sizeof err;
      ::getsockopt(fd.get(), SOL_SOCKET, SO_ERROR, &err, &len);
      if (err == ECONNREFUSED) throw Error(Errc::connection_refused, std::string(address));
      if (err != 0) throw Error(Errc::os_failure, std::strerror(err));
    }
    detail::set_nodelay(fd.get());
    TcpStub s;
    s.fd_ = std::move(fd);
    s.trace_base_ = static_cast<std::uint64_t>(::getpid()) * 0x9e3779b97f4a7c15ull ^
                    reinterpret_cast<std::uintptr_t>(&s);
    return s;
  }

  EchoMessage call(std::uint32_t method_id, const EchoMessage& request, const CallOptions& opts,
                   CallTiming* timing = nullptr) {
    if (!fd_) throw Error(Errc::channel_closed, "stub is disconnected");
    const auto t0 = Clock::now();
    const std::uint64_t rid = next_request_id_++;
    const unsigned repeat = std::max(1u, opts.repeat);
    enc_.resize(encoded_size(request));
    encode_copy_into(request, enc_, repeat);
    char trace[17];
    std::snprintf(trace, sizeof trace, "%016llx",
                  static_cast<unsigned long long>(trace_base_ ^ (rid * 0x9e3779b97f4a7c15ull)));
    out_.clear();
    format_message(out_, method_id, rid, std::string_view(trace, 16),
                   std::string_view(reinterpret_cast<const char*>(enc_.data()), enc_.size()),
                   nullptr, repeat);
    const auto t1 = Clock::now();

    if (!detail::send_all(fd_.get(), out_, opts.deadline)) {
      ++timeouts_;
      throw Error(Errc::timeout, "send blocked until deadline");
    }
    for (;;) {
      if (!reader_.read(fd_.get(), opts.deadline, in_)) {
        ++timeouts_;
        throw Error(Errc::timeout, "no response for request " + std::to_string(rid));
      }
      if (in_.request_id == rid) break;
      ++stale_;
    }
    const auto t2 = Clock::now();
    if (in_.status != status_code::kOk)
      throw Error(Errc::server_error, "status " + std::to_string(in_.status), in_.status);
    EchoMessage resp;
    decode_copy_into(std::as_bytes(std::span(in_.payload.data(), in_.payload.size())), resp,
                     repeat);
    if (timing != nullptr) {
      timing->serialize = t1 - t0;
      timing->wait = t2 - t1;
      timing->decode = Clock::now() - t2;
    }
    return resp;
  }

  void disconnect() {
    if (!fd_) throw Error(Errc::usage_error, "stub already disconnected");
    fd_.reset();
  }

  bool connected() const noexcept { return static_cast<bool>(fd_); }
  std::uint64_t stale_responses() const noexcept { return stale_; }
  std::uint64_t timeouts() const noexcept { return timeouts_; }
  std::uint64_t header_lines_parsed() const noexcept { return reader_.header_lines_parsed(); }
  std::size_t last_response_header_bytes() const noexcept { return in_.header_bytes; }
  std::size_t last_request_header_bytes() const noexcept { return out_.size() - enc_.size(); }

 private:
  TcpStub() = default;

  detail::Fd fd_;
  std::uint64_t trace_base_ = 0;
  std::uint64_t next_request_id_ = 1;
  std::uint64_t stale_ = 0;
  std::uint64_t timeouts_ = 0;
  MessageReader reader_;
  WireMessage in_;
  std::string out_;
  std::vector<std::byte> enc_;
};

static_assert(RpcStub<TcpStub>);

}  // namespace shmrpc::tcp
