#pragma once

#include <atomic>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <type_traits>

namespace shmrpc::detail {

static_assert(std::endian::native == std::endian::little,
              "shared layouts are defined little-endian; big-endian hosts are unsupported");

constexpr std::uint64_t align_up(std::uint64_t v, std::uint64_t a) noexcept {
  return (v + a - 1) & ~(a - 1);
}

constexpr bool is_pow2(std::uint64_t v) noexcept { return v != 0 && (v & (v - 1)) == 0; }

template <typename T>
  requires std::is_trivially_copyable_v<T>
inline T load(const std::byte* p) noexcept {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
  requires std::is_trivially_copyable_v<T>
inline void store(std::byte* p, T v) noexcept {
  std::memcpy(p, &v, sizeof(T));
}

// Words shared between processes. The mapped region is page aligned and every
// synchronizing field sits at a naturally aligned offset.
template <typename T>
inline std::atomic_ref<T> word(std::byte* p) noexcept {
  return std::atomic_ref<T>(*reinterpret_cast<T*>(p));
}

template <typename T>
inline T load_acquire(const std::byte* p) noexcept {
  return word<T>(const_cast<std::byte*>(p)).load(std::memory_order_acquire);
}

template <typename T>
inline void store_release(std::byte* p, T v) noexcept {
  word<T>(p).store(v, std::memory_order_release);
}

}  // namespace shmrpc::detail
