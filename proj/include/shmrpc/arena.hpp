#pragma once

// Bump allocator over a reserved block of a region.
//
// Header (little-endian, 64 bytes): u64 capacity_bytes; u64 alloc_cursor;
// u64 epoch; 40 bytes reserved. Data follows the header. Each arena has a
// single allocating owner; the peer only reads extents it was handed and
// validates them against the epoch, which reset advances.

#include <cstdint>
#include <span>
#include <string>

#include "shmrpc/detail/bytes.hpp"
#include "shmrpc/error.hpp"
#include "shmrpc/frame.hpp"
#include "shmrpc/region.hpp"

namespace shmrpc {

inline constexpr std::uint64_t kArenaHeaderSize = 64;
inline constexpr std::uint64_t kArenaAlignment = 16;

constexpr std::uint64_t arena_footprint(std::uint64_t capacity_bytes) noexcept {
  return kArenaHeaderSize + capacity_bytes;
}

class Arena {
 public:
  Arena() = default;

  /// Formats (or re-formats) the arena at `offset`: cursor 0, epoch one past
  /// whatever epoch was stored there (a zeroed region yields epoch 1).
  static Arena init(const RegionHandle& region, std::uint64_t offset,
                    std::uint64_t capacity_bytes) {
    if (offset % kArenaAlignment != 0)
      throw Error(Errc::usage_error, "arena offset must be 16-byte aligned");
    std::byte* h = region.at(offset, arena_footprint(capacity_bytes));
    const auto old_epoch = detail::load_acquire<std::uint64_t>(h + 16);
    detail::store<std::uint64_t>(h + 0, capacity_bytes);
    detail::word<std::uint64_t>(h + 8).store(0, std::memory_order_relaxed);
    detail::store_release<std::uint64_t>(h + 16, old_epoch + 1);
    return Arena(h, offset, capacity_bytes);
  }

  static Arena open(const RegionHandle& region, std::uint64_t offset) {
    std::byte* h = region.at(offset, kArenaHeaderSize);
    const auto cap = detail::load<std::uint64_t>(h + 0);
    region.at(offset, arena_footprint(cap));
    return Arena(h, offset, cap);
  }

  bool valid() const noexcept { return hdr_ != nullptr; }
  std::uint64_t offset() const noexcept { return offset_; }
  std::uint64_t capacity() const noexcept { return capacity_; }
  std::uint64_t cursor() const noexcept {
    return detail::word<std::uint64_t>(hdr_ + 8).load(std::memory_order_relaxed);
  }
  std::uint64_t epoch() const noexcept { return detail::load_acquire<std::uint64_t>(hdr_ + 16); }

  /// O(1): one bounds check and one cursor bump.
  ArenaLocator alloc(std::uint64_t len) {
    if (len == 0) throw Error(Errc::invalid_length, "arena allocation of zero bytes");
    const std::uint64_t at = cursor();
    if (len > capacity_ - at || detail::align_up(len, kArenaAlignment) > capacity_ - at)
      throw Error(Errc::out_of_space, std::to_string(len) + " bytes requested, " +
                                          std::to_string(capacity_ - at) + " free");
    detail::word<std::uint64_t>(hdr_ + 8).store(at + detail::align_up(len, kArenaAlignment),
                                                 std::memory_order_relaxed);
    return {at, epoch(), len};
  }

  /// Frees everything at once; every locator handed out so far becomes stale.
  void reset() noexcept {
    detail::word<std::uint64_t>(hdr_ + 8).store(0, std::memory_order_relaxed);
    detail::store_release<std::uint64_t>(hdr_ + 16, epoch() + 1);
  }

  /// Throws BadLocator / StaleReference unless `loc` names live bytes.
  void validate(const ArenaLocator& loc) const {
    if (loc.offset > capacity_ || loc.len > capacity_ - loc.offset)
      throw Error(Errc::bad_locator, "extent [" + std::to_string(loc.offset) + ", +" +
                                         std::to_string(loc.len) + ") outside arena of " +
                                         std::to_string(capacity_));
    const auto e = epoch();
    if (loc.epoch != e)
      throw Error(Errc::stale_reference,
                  "locator epoch " + std::to_string(loc.epoch) + ", arena epoch " + std::to_string(e));
  }

  /// Unvalidated view, for the owner writing into a fresh allocation.
  std::span<std::byte> extent(const ArenaLocator& loc) const noexcept {
    return {data() + loc.offset, static_cast<std::size_t>(loc.len)};
  }

 private:
  Arena(std::byte* hdr, std::uint64_t offset, std::uint64_t capacity)
      : hdr_(hdr), offset_(offset), capacity_(capacity) {}

  std::byte* data() const noexcept { return hdr_ + kArenaHeaderSize; }

  std::byte* hdr_ = nullptr;
  std::uint64_t offset_ = 0;
  std::uint64_t capacity_ = 0;
};

}  // namespace shmrpc
