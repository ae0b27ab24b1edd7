#pragma once

// One-directional SPSC ring of fixed-size message slots inside a region,
// synchronized only by polling two monotone 64-bit indices.
//
// Channel header (little-endian, 256 bytes, 64-byte aligned):
//   0   u32 capacity_slots      4   u32 slot_size_bytes
//   64  u64 produce_index       (own cache line)
//   128 u64 consume_index       (own cache line)
//   192 u32 closed_flag         196 u32 reserved
// Slot layout:
//   0  u64 request_id   8  u32 method_id    12 u32 flags
//   16 u32 status_code  20 u32 metadata_len 24 u32 payload_len
//   28 u32 checksum     32 u64 arena_offset 40 u64 arena_epoch
//   48 metadata bytes, then inline payload bytes
//
// The producer writes a whole slot, then its checksum, then publishes with a
// release store of produce_index. The consumer copies the slot out and only
// then releases it with a release store of consume_index. Those two words are
// the only ones carrying synchronization meaning.

#include <zlib.h>

#include <cstddef>
#include <cstdint>
#include <string>

#include "shmrpc/backoff.hpp"
#include "shmrpc/detail/bytes.hpp"
#include "shmrpc/error.hpp"
#include "shmrpc/frame.hpp"
#include "shmrpc/region.hpp"

namespace shmrpc {

inline constexpr std::uint64_t kChannelHeaderSize = 256;
inline constexpr std::uint64_t kSlotHeaderSize = 48;

enum class ChannelStatus { ok, full, empty, closed, timeout, frame_too_large, corrupt };

constexpr std::string_view to_string(ChannelStatus s) noexcept {
  switch (s) {
    case ChannelStatus::ok: return "Ok";
    case ChannelStatus::full: return "Full";
    case ChannelStatus::empty: return "Empty";
    case ChannelStatus::closed: return "Closed";
    case ChannelStatus::timeout: return "Timeout";
    case ChannelStatus::frame_too_large: return "FrameTooLarge";
    case ChannelStatus::corrupt: return "Corrupt";
  }
  return "Unknown";
}

constexpr std::uint64_t channel_footprint(std::uint32_t capacity_slots,
                                          std::uint32_t slot_size_bytes) noexcept {
  return kChannelHeaderSize + std::uint64_t{capacity_slots} * slot_size_bytes;
}

/// Hook points marking slot ownership changes; `generation` is index / capacity.
struct NoOwnershipProbe {
  void acquire(std::uint64_t /*slot*/, std::uint64_t /*generation*/) noexcept {}
  void release(std::uint64_t /*slot*/, std::uint64_t /*generation*/) noexcept {}
};

namespace detail {

inline std::uint32_t slot_checksum(const std::byte* slot, std::size_t used) noexcept {
  static constexpr Bytef zeros[4] = {0, 0, 0, 0};
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, reinterpret_cast<const Bytef*>(slot), 28);
  crc = ::crc32(crc, zeros, 4);
  crc = ::crc32(crc, reinterpret_cast<const Bytef*>(slot + 32), static_cast<uInt>(used - 32));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

template <typename Probe = NoOwnershipProbe>
class BasicRingChannel {
 public:
  BasicRingChannel() = default;

  /// Formats a fresh channel at `offset`.
  static BasicRingChannel init(const RegionHandle& region, std::uint64_t offset,
                               std::uint32_t capacity_slots, std::uint32_t slot_size_bytes,
                               Probe probe = Probe{}) {
    if (capacity_slots < 2 || !detail::is_pow2(capacity_slots))
      throw Error(Errc::bad_capacity, std::to_string(capacity_slots) + " slots");
    if (slot_size_bytes < kSlotHeaderSize || slot_size_bytes % 8 != 0)
      throw Error(Errc::usage_error, "slot size must be >= 48 and a multiple of 8");
    if (offset % 64 != 0) throw Error(Errc::usage_error, "channel offset must be 64-byte aligned");
    std::byte* h = region.at(offset, channel_footprint(capacity_slots, slot_size_bytes));
    detail::store<std::uint32_t>(h + 0, capacity_slots);
    detail::store<std::uint32_t>(h + 4, slot_size_bytes);
    detail::store<std::uint32_t>(h + 196, 0);
    detail::word<std::uint64_t>(h + 64).store(0, std::memory_order_relaxed);
    detail::word<std::uint64_t>(h + 128).store(0, std::memory_order_relaxed);
    detail::store_release<std::uint32_t>(h + 192, 0);
    return BasicRingChannel(region, offset, std::move(probe));
  }

  /// Binds to a channel previously formatted by init (possibly in another process).
  static BasicRingChannel open(const RegionHandle& region, std::uint64_t offset,
                               Probe probe = Probe{}) {
    return BasicRingChannel(region, offset, std::move(probe));
  }

  std::uint64_t offset() const noexcept { return offset_; }
  std::uint32_t capacity() const noexcept { return capacity_; }
  std::uint32_t slot_size() const noexcept { return slot_size_; }
  std::uint64_t max_inline_bytes() const noexcept { return slot_size_ - kSlotHeaderSize; }
  bool valid() const noexcept { return hdr_ != nullptr; }

  std::uint64_t produce_index() const noexcept {
    return detail::load_acquire<std::uint64_t>(hdr_ + 64);
  }
  std::uint64_t consume_index() const noexcept {
    return detail::load_acquire<std::uint64_t>(hdr_ + 128);
  }
  std::uint64_t occupancy() const noexcept {
    const auto c = consume_index();
    return produce_index() - c;
  }
  bool closed() const noexcept { return detail::load_acquire<std::uint32_t>(hdr_ + 192) != 0; }

  void close() noexcept { detail::store_release<std::uint32_t>(hdr_ + 192, 1); }

  Probe& probe() noexcept { return probe_; }

  ChannelStatus try_send(const MessageFrame& f) {
    if (!has_valid_encoding(f.flags))
      throw Error(Errc::usage_error, "frame must set exactly one encoding flag");
    if (f.is_arena_ref() && !f.payload.empty())
      throw Error(Errc::usage_error, "arena-reference frame carries inline bytes");
    if (closed()) return ChannelStatus::closed;

    const std::size_t md_len = encoded_metadata_size(f.metadata);
    const std::size_t used = kSlotHeaderSize + md_len + f.payload.size();
    if (used > slot_size_) return ChannelStatus::frame_too_large;

    auto produce = detail::word<std::uint64_t>(hdr_ + 64);
    const std::uint64_t head = produce.load(std::memory_order_relaxed);
    if (head - consume_cache_ >= capacity_) {
      consume_cache_ = detail::load_acquire<std::uint64_t>(hdr_ + 128);
      if (head - consume_cache_ >= capacity_) return ChannelStatus::full;
    }

    const std::uint64_t idx = head & (capacity_ - 1);
    probe_.acquire(idx, head / capacity_);
    std::byte* s = slot(idx);
    detail::store<std::uint64_t>(s + 0, f.request_id);
    detail::store<std::uint32_t>(s + 8, f.method_id);
    detail::store<std::uint32_t>(s + 12, f.flags);
    detail::store<std::uint32_t>(s + 16, f.status_code);
    detail::store<std::uint32_t>(s + 20, static_cast<std::uint32_t>(md_len));
    detail::store<std::uint32_t>(s + 24, static_cast<std::uint32_t>(f.payload_len()));
    detail::store<std::uint64_t>(s + 32, f.arena.offset);
    detail::store<std::uint64_t>(s + 40, f.arena.epoch);
    encode_metadata(f.metadata, s + kSlotHeaderSize);
    if (!f.payload.empty())
      std::memcpy(s + kSlotHeaderSize + md_len, f.payload.data(), f.payload.size());
    detail::store<std::uint32_t>(s + 28, detail::slot_checksum(s, used));

    produce.store(head + 1, std::memory_order_release);
    return ChannelStatus::ok;
  }

  /// Copies the next frame into `out`, reusing its buffers.
  ChannelStatus try_recv(MessageFrame& out) {
    auto consume = detail::word<std::uint64_t>(hdr_ + 128);
    const std::uint64_t tail = consume.load(std::memory_order_relaxed);
    if (tail == produce_cache_) {
      produce_cache_ = detail::load_acquire<std::uint64_t>(hdr_ + 64);
      if (tail == produce_cache_) {
        if (!closed()) return ChannelStatus::empty;
        // A send that preceded close is visible once closed is.
        produce_cache_ = detail::load_acquire<std::uint64_t>(hdr_ + 64);
        if (tail == produce_cache_) return ChannelStatus::closed;
      }
    }

    const std::uint64_t idx = tail & (capacity_ - 1);
    const std::byte* s = slot(idx);
    const auto flags = detail::load<std::uint32_t>(s + 12);
    const auto md_len = detail::load<std::uint32_t>(s + 20);
    const auto payload_len = detail::load<std::uint32_t>(s + 24);
    const bool is_ref = (flags & frame_flags::kEncodingArenaRef) != 0;
    const std::uint64_t inline_len = is_ref ? 0 : payload_len;
    const std::uint64_t used = kSlotHeaderSize + std::uint64_t{md_len} + inline_len;

    ChannelStatus st = ChannelStatus::ok;
    if (!has_valid_encoding(flags) || used > slot_size_ ||
        detail::load<std::uint32_t>(s + 28) != detail::slot_checksum(s, used)) {
      st = ChannelStatus::corrupt;
      ++checksum_failures_;
    } else {
      out.request_id = detail::load<std::uint64_t>(s + 0);
      out.method_id = detail::load<std::uint32_t>(s + 8);
      out.flags = flags;
      out.status_code = detail::load<std::uint32_t>(s + 16);
      if (!decode_metadata({s + kSlotHeaderSize, md_len}, out.metadata)) {
        st = ChannelStatus::corrupt;
        ++checksum_failures_;
      }
      const std::byte* p = s + kSlotHeaderSize + md_len;
      out.payload.assign(p, p + inline_len);
      if (is_ref) {
        out.arena = {detail::load<std::uint64_t>(s + 32), detail::load<std::uint64_t>(s + 40),
                     payload_len};
      } else {
        out.arena = {};
      }
    }

    probe_.release(idx, tail / capacity_);
    consume.store(tail + 1, std::memory_order_release);
    return st;
  }

  ChannelStatus send_until(const MessageFrame& f, Deadline deadline,
                           BackoffPolicy policy = BackoffPolicy::host_default()) {
    Backoff backoff(policy);
    for (;;) {
      const auto st = try_send(f);
      if (st != ChannelStatus::full) return st;
      if (Clock::now() >= deadline) return ChannelStatus::timeout;
      backoff.pause();
    }
  }

  ChannelStatus recv_until(MessageFrame& out, Deadline deadline,
                           BackoffPolicy policy = BackoffPolicy::host_default()) {
    Backoff backoff(policy);
    for (;;) {
      const auto st = try_recv(out);
      if (st != ChannelStatus::empty) return st;
      if (Clock::now() >= deadline) return ChannelStatus::timeout;
      backoff.pause();
    }
  }

  /// Frames rejected by the consumer-side integrity check.
  std::uint64_t checksum_failures() const noexcept { return checksum_failures_; }

 private:
  BasicRingChannel(const RegionHandle& region, std::uint64_t offset, Probe probe)
      : offset_(offset), probe_(std::move(probe)) {
    std::byte* h = region.at(offset, kChannelHeaderSize);
    const auto cap = detail::load<std::uint32_t>(h + 0);
    const auto slot_size = detail::load<std::uint32_t>(h + 4);
    if (cap < 2 || !detail::is_pow2(cap))
      throw Error(Errc::bad_capacity, "channel at offset " + std::to_string(offset));
    if (slot_size < kSlotHeaderSize)
      throw Error(Errc::usage_error, "channel slot size below header size");
    hdr_ = region.at(offset, channel_footprint(cap, slot_size));
    capacity_ = cap;
    slot_size_ = slot_size;
    consume_cache_ = consume_index();
    produce_cache_ = produce_index();
  }

  std::byte* slot(std::uint64_t idx) const noexcept {
    return hdr_ + kChannelHeaderSize + idx * slot_size_;
  }

  std::byte* hdr_ = nullptr;
  std::uint64_t offset_ = 0;
  std::uint32_t capacity_ = 0;
  std::uint32_t slot_size_ = 0;
  std::uint64_t consume_cache_ = 0;  // producer side
  std::uint64_t produce_cache_ = 0;  // consumer side
  std::uint64_t checksum_failures_ = 0;
  Probe probe_{};
};

using RingChannel = BasicRingChannel<>;

}  // namespace shmrpc
