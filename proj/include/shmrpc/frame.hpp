#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "shmrpc/detail/bytes.hpp"
#include "shmrpc/error.hpp"

namespace shmrpc {

namespace frame_flags {
inline constexpr std::uint32_t kEncodingInline = 1u << 0;
inline constexpr std::uint32_t kEncodingArenaRef = 1u << 1;
inline constexpr std::uint32_t kIsError = 1u << 2;
}  // namespace frame_flags

/// (offset, epoch, len) of a payload held in a shared arena. Offsets are
/// relative to the arena's data area.
struct ArenaLocator {
  std::uint64_t offset = 0;
  std::uint64_t epoch = 0;
  std::uint64_t len = 0;
  bool operator==(const ArenaLocator&) const = default;
};

using Metadata = std::vector<std::pair<std::string, std::string>>;

inline std::optional<std::string_view> find_metadata(const Metadata& md, std::string_view key) {
  for (const auto& [k, v] : md)
    if (k == key) return std::string_view(v);
  return std::nullopt;
}

struct MessageFrame {
  std::uint64_t request_id = 0;
  std::uint32_t method_id = 0;
  std::uint32_t flags = frame_flags::kEncodingInline;
  std::uint32_t status_code = 0;
  Metadata metadata;
  std::vector<std::byte> payload;  // inline frames only
  ArenaLocator arena;              // arena-reference frames only

  bool is_inline() const noexcept { return (flags & frame_flags::kEncodingInline) != 0; }
  bool is_arena_ref() const noexcept { return (flags & frame_flags::kEncodingArenaRef) != 0; }
  bool is_error() const noexcept { return (flags & frame_flags::kIsError) != 0; }

  std::uint64_t payload_len() const noexcept { return is_arena_ref() ? arena.len : payload.size(); }

  bool operator==(const MessageFrame&) const = default;
};

inline bool has_valid_encoding(std::uint32_t flags) noexcept {
  const bool in = (flags & frame_flags::kEncodingInline) != 0;
  const bool ref = (flags & frame_flags::kEncodingArenaRef) != 0;
  return in != ref;
}

// Metadata wire encoding: repeated (u16 key_len, key, u16 value_len, value).

inline std::size_t encoded_metadata_size(const Metadata& md) {
  std::size_t n = 0;
  for (const auto& [k, v] : md) {
    if (k.size() > 0xFFFF || v.size() > 0xFFFF)
      throw Error(Errc::usage_error, "metadata key or value longer than 65535 bytes");
    n += 4 + k.size() + v.size();
  }
  return n;
}

/// `out` must hold encoded_metadata_size(md) bytes.
inline void encode_metadata(const Metadata& md, std::byte* out) {
  for (const auto& [k, v] : md) {
    detail::store<std::uint16_t>(out, static_cast<std::uint16_t>(k.size()));
    std::memcpy(out + 2, k.data(), k.size());
    out += 2 + k.size();
    detail::store<std::uint16_t>(out, static_cast<std::uint16_t>(v.size()));
    std::memcpy(out + 2, v.data(), v.size());
    out += 2 + v.size();
  }
}

/// Replaces `out` with the decoded pairs; false if `in` is not a whole number of entries.
inline bool decode_metadata(std::span<const std::byte> in, Metadata& out) {
  std::size_t n = 0;
  std::size_t pos = 0;
  auto read_str = [&](std::string& s) {
    if (in.size() - pos < 2) return false;
    const auto len = detail::load<std::uint16_t>(in.data() + pos);
    pos += 2;
    if (in.size() - pos < len) return false;
    s.assign(reinterpret_cast<const char*>(in.data() + pos), len);
    pos += len;
    return true;
  };
  while (pos < in.size()) {
    if (n == out.size()) out.emplace_back();
    auto& [k, v] = out[n];
    if (!read_str(k) || !read_str(v)) {
      out.resize(n);
      return false;
    }
    ++n;
  }
  out.resize(n);
  return true;
}

}  // namespace shmrpc
