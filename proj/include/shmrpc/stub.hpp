#pragma once

// The client/server contract shared by the shared-memory runtime and the
// socket baseline. A program written against RpcStub runs on either.

#include <concepts>
#include <cstdint>
#include <functional>
#include <string_view>
#include <unordered_map>

#include "shmrpc/backoff.hpp"
#include "shmrpc/codec.hpp"

namespace shmrpc {

enum class Encoding { copy, reference };

constexpr std::string_view to_string(Encoding e) noexcept {
  return e == Encoding::copy ? "copy" : "reference";
}

namespace status_code {
inline constexpr std::uint32_t kOk = 0;
inline constexpr std::uint32_t kHandlerFault = 1;
inline constexpr std::uint32_t kUnknownMethod = 2;
inline constexpr std::uint32_t kDecodeError = 3;
}  // namespace status_code

inline constexpr std::uint32_t kEchoMethod = 1;

struct CallOptions {
  Encoding encoding = Encoding::copy;
  Deadline deadline = Deadline::max();
  // Extra attr encode/decode passes on the copy path; see encode_copy_into.
  unsigned repeat = 1;
};

/// Client-side time split of one call.
struct CallTiming {
  Clock::duration serialize{};
  Clock::duration wait{};
  Clock::duration decode{};
};

using Handler = std::function<EchoMessage(EchoMessage)>;
using HandlerTable = std::unordered_map<std::uint32_t, Handler>;

inline HandlerTable echo_handlers() {
  return {{kEchoMethod, [](EchoMessage m) { return m; }}};
}

/// Synchronous single-outstanding-call client. `call` returns the response or
/// throws Error with Timeout, ServerError or ChannelClosed.
template <typename S>
concept RpcStub = requires(S s, const EchoMessage& m, const CallOptions& o, CallTiming* t) {
  { s.call(kEchoMethod, m, o) } -> std::same_as<EchoMessage>;
  { s.call(kEchoMethod, m, o, t) } -> std::same_as<EchoMessage>;
  { s.stale_responses() } -> std::convertible_to<std::uint64_t>;
  s.disconnect();
};

}  // namespace shmrpc
