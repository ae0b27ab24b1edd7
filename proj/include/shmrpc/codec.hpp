#pragma once

// Two payload paths for EchoMessage.
//
// Copy codec wire format (little-endian):
//   u64 id; u32 body_len; body; u8 attr_count;
//   per attr: u16 key_len, key, u16 val_len, val
// An empty message encodes to 13 bytes.
//
// Reference path: the body is written once into an arena and travels as an
// (offset, epoch, len) locator, with no per-field transformation.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "shmrpc/arena.hpp"
#include "shmrpc/detail/bytes.hpp"
#include "shmrpc/error.hpp"
#include "shmrpc/frame.hpp"

namespace shmrpc {

struct EchoMessage {
  std::uint64_t id = 0;
  std::string body;
  std::vector<std::pair<std::string, std::string>> attrs;

  bool operator==(const EchoMessage&) const = default;
};

inline constexpr std::size_t kMaxAttrs = 255;

/// Exact length encode_copy will produce. Throws if `msg` is not encodable.
inline std::size_t encoded_size(const EchoMessage& msg) {
  if (msg.body.size() > 0xFFFFFFFFu) throw Error(Errc::usage_error, "body exceeds 4 GiB");
  if (msg.attrs.size() > kMaxAttrs) throw Error(Errc::usage_error, "more than 255 attrs");
  std::size_t n = 8 + 4 + msg.body.size() + 1;
  for (const auto& [k, v] : msg.attrs) {
    if (k.empty()) throw Error(Errc::usage_error, "attr keys must be non-empty");
    if (k.size() > 0xFFFF || v.size() > 0xFFFF)
      throw Error(Errc::usage_error, "attr key or value longer than 65535 bytes");
    n += 4 + k.size() + v.size();
  }
  return n;
}

/// Serializes into `out` (which must hold encoded_size(msg) bytes). The attr
/// section is encoded `repeat` times over the same bytes to emulate heavier
/// schemas; the output does not depend on `repeat`.
inline std::size_t encode_copy_into(const EchoMessage& msg, std::span<std::byte> out,
                                    unsigned repeat = 1) {
  const std::size_t total = encoded_size(msg);
  if (out.size() < total) throw Error(Errc::usage_error, "encode buffer too small");
  std::byte* p = out.data();
  detail::store<std::uint64_t>(p, msg.id);
  detail::store<std::uint32_t>(p + 8, static_cast<std::uint32_t>(msg.body.size()));
  std::memcpy(p + 12, msg.body.data(), msg.body.size());
  std::byte* attrs_at = p + 12 + msg.body.size();
  for (unsigned r = 0; r < (repeat == 0 ? 1 : repeat); ++r) {
    std::byte* q = attrs_at;
    *q++ = static_cast<std::byte>(msg.attrs.size());
    for (const auto& [k, v] : msg.attrs) {
      detail::store<std::uint16_t>(q, static_cast<std::uint16_t>(k.size()));
      std::memcpy(q + 2, k.data(), k.size());
      q += 2 + k.size();
      detail::store<std::uint16_t>(q, static_cast<std::uint16_t>(v.size()));
      std::memcpy(q + 2, v.data(), v.size());
      q += 2 + v.size();
    }
    // Keeps repeated passes from being folded into one.
    asm volatile("" : : "r"(q) : "memory");
  }
  return total;
}

inline std::vector<std::byte> encode_copy(const EchoMessage& msg, unsigned repeat = 1) {
  std::vector<std::byte> out(encoded_size(msg));
  encode_copy_into(msg, out, repeat);
  return out;
}

/// Parses `in` into `out`, reusing its storage. The attr section is parsed
/// `repeat` times. Throws Truncated or MalformedTag.
inline void decode_copy_into(std::span<const std::byte> in, EchoMessage& out,
                             unsigned repeat = 1) {
  const std::byte* p = in.data();
  const std::size_t n = in.size();
  if (n < 12) throw Error(Errc::truncated, "message header");
  out.id = detail::load<std::uint64_t>(p);
  const std::size_t body_len = detail::load<std::uint32_t>(p + 8);
  if (n - 12 < body_len) throw Error(Errc::truncated, "body");
  out.body.assign(reinterpret_cast<const char*>(p + 12), body_len);
  const std::size_t attrs_at = 12 + body_len;

  std::size_t pos = 0;
  for (unsigned r = 0; r < (repeat == 0 ? 1 : repeat); ++r) {
    pos = attrs_at;
    if (pos >= n) throw Error(Errc::truncated, "attr count");
    const auto count = static_cast<std::size_t>(p[pos++]);
    out.attrs.resize(count);
    auto read_str = [&](std::string& s, const char* what) {
      if (n - pos < 2) throw Error(Errc::truncated, what);
      const std::size_t len = detail::load<std::uint16_t>(p + pos);
      pos += 2;
      if (n - pos < len) throw Error(Errc::truncated, what);
      s.assign(reinterpret_cast<const char*>(p + pos), len);
      pos += len;
    };
    for (auto& [k, v] : out.attrs) {
      read_str(k, "attr key");
      if (k.empty()) throw Error(Errc::malformed_tag, "empty attr key");
      read_str(v, "attr value");
    }
  }
  if (pos != n) throw Error(Errc::malformed_tag, std::to_string(n - pos) + " trailing bytes");
}

inline EchoMessage decode_copy(std::span<const std::byte> in, unsigned repeat = 1) {
  EchoMessage m;
  decode_copy_into(in, m, repeat);
  return m;
}

/// Writes `body` once into the arena. Empty bodies take no arena space.
inline ArenaLocator write_reference(std::span<const std::byte> body, Arena& arena) {
  if (body.empty()) return {0, arena.epoch(), 0};
  const ArenaLocator loc = arena.alloc(body.size());
  std::memcpy(arena.extent(loc).data(), body.data(), body.size());
  return loc;
}

inline ArenaLocator write_reference(std::string_view body, Arena& arena) {
  return write_reference(std::as_bytes(std::span(body.data(), body.size())), arena);
}

/// Read-only view of the referenced payload, validated against the current epoch.
inline std::span<const std::byte> read_reference(const MessageFrame& frame, const Arena& arena) {
  if (!frame.is_arena_ref()) throw Error(Errc::usage_error, "frame is not an arena reference");
  arena.validate(frame.arena);
  return arena.extent(frame.arena);
}

/// Copies the referenced payload into `out`, then re-checks the epoch so a
/// reset racing with the copy is reported as StaleReference.
inline void read_reference_into(const MessageFrame& frame, const Arena& arena, std::string& out) {
  const auto view = read_reference(frame, arena);
  out.assign(reinterpret_cast<const char*>(view.data()), view.size());
  if (arena.epoch() != frame.arena.epoch)
    throw Error(Errc::stale_reference, "arena reset during read");
}

}  // namespace shmrpc
