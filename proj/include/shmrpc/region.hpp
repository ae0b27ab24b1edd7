#pragma once

// Named shared memory regions. Everything above this layer addresses memory
// as (region, offset); the mapped base address never leaves a RegionHandle.
//
// Layout of the first 64 bytes (little-endian):
//   0..7   magic "NOTNETS1"
//   8..11  layout_version (u32) = 1
//   12..19 total_size (u64)
//   20..27 registry_offset (u64)
//   28..35 arena_offset (u64)
//   36..63 reserved, zero

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <utility>

#include "shmrpc/detail/bytes.hpp"
#include "shmrpc/error.hpp"

namespace shmrpc {

inline constexpr char kRegionMagic[8] = {'N', 'O', 'T', 'N', 'E', 'T', 'S', '1'};
inline constexpr std::uint32_t kLayoutVersion = 1;
inline constexpr std::uint64_t kRegionHeaderSize = 64;

// Service registry: 64-byte registry header followed by fixed 512-byte entries.
inline constexpr std::uint64_t kRegistryOffset = kRegionHeaderSize;
inline constexpr std::uint32_t kRegistryEntries = 8;
inline constexpr std::uint64_t kRegistryEntryStride = 512;
inline constexpr std::uint64_t kRegistryBytes = 64 + kRegistryEntries * kRegistryEntryStride;
// Start of the carve area from which queue pairs and their sub-arenas are taken.
inline constexpr std::uint64_t kArenaOffset = detail::align_up(kRegistryOffset + kRegistryBytes, 4096);
inline constexpr std::uint64_t kMinRegionSize = 64 * 1024;

enum class RegionRole { creator, attacher };

struct RegionLayoutHeader {
  std::uint32_t layout_version = 0;
  std::uint64_t total_size = 0;
  std::uint64_t registry_offset = 0;
  std::uint64_t arena_offset = 0;
};

namespace detail {

inline std::string os_name(std::string_view name) {
  if (name.empty()) throw Error(Errc::usage_error, "region name must be non-empty");
  if (name.find('/') != std::string_view::npos)
    throw Error(Errc::usage_error, "region name must not contain '/'");
  return "/" + std::string(name);
}

inline std::string errno_text(const char* what) {
  return std::string(what) + ": " + std::strerror(errno);
}

}  // namespace detail

class RegionHandle {
 public:
  RegionHandle() = default;
  RegionHandle(const RegionHandle&) = delete;
  RegionHandle& operator=(const RegionHandle&) = delete;
  RegionHandle(RegionHandle&& o) noexcept { *this = std::move(o); }
  RegionHandle& operator=(RegionHandle&& o) noexcept {
    if (this != &o) {
      release();
      name_ = std::move(o.name_);
      size_ = std::exchange(o.size_, 0);
      role_ = o.role_;
      base_ = std::exchange(o.base_, nullptr);
    }
    return *this;
  }
  ~RegionHandle() { release(); }

  /// Creates `name` OS-wide, zero-filled, with the layout header written.
  static RegionHandle create(std::string_view name, std::uint64_t size_bytes) {
    const std::string os = detail::os_name(name);
    if (size_bytes < kMinRegionSize)
      throw Error(Errc::size_too_small, std::to_string(size_bytes) + " < minimum " +
                                            std::to_string(kMinRegionSize));
    int fd = ::shm_open(os.c_str(), O_CREAT | O_EXCL | O_RDWR, 0600);
    if (fd < 0) {
      if (errno == EEXIST) throw Error(Errc::already_exists, std::string(name));
      throw Error(Errc::os_failure, detail::errno_text("shm_open"));
    }
    if (::ftruncate(fd, static_cast<off_t>(size_bytes)) != 0) {
      const auto msg = detail::errno_text("ftruncate");
      ::close(fd);
      ::shm_unlink(os.c_str());
      throw Error(Errc::os_failure, msg);
    }
    void* p = ::mmap(nullptr, size_bytes, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
    ::close(fd);
    if (p == MAP_FAILED) {
      const auto msg = detail::errno_text("mmap");
      ::shm_unlink(os.c_str());
      throw Error(Errc::os_failure, msg);
    }
    RegionHandle h;
    h.name_ = std::string(name);
    h.size_ = size_bytes;
    h.role_ = RegionRole::creator;
    h.base_ = static_cast<std::byte*>(p);

    std::byte* b = h.base_;
    detail::store<std::uint32_t>(b + 8, kLayoutVersion);
    detail::store<std::uint64_t>(b + 12, size_bytes);
    detail::store<std::uint64_t>(b + 20, kRegistryOffset);
    detail::store<std::uint64_t>(b + 28, kArenaOffset);
    // Magic goes last so a concurrent attacher never accepts a half-written header.
    std::uint64_t magic;
    std::memcpy(&magic, kRegionMagic, 8);
    detail::store_release<std::uint64_t>(b, magic);
    return h;
  }

  static RegionHandle attach(std::string_view name) {
    const std::string os = detail::os_name(name);
    int fd = ::shm_open(os.c_str(), O_RDWR, 0600);
    if (fd < 0) {
      if (errno == ENOENT) throw Error(Errc::not_found, std::string(name));
      throw Error(Errc::os_failure, detail::errno_text("shm_open"));
    }
    struct stat st {};
    if (::fstat(fd, &st) != 0) {
      const auto msg = detail::errno_text("fstat");
      ::close(fd);
      throw Error(Errc::os_failure, msg);
    }
    const auto size = static_cast<std::uint64_t>(st.st_size);
    if (size < kRegionHeaderSize) {
      ::close(fd);
      throw Error(Errc::bad_magic, std::string(name) + ": region shorter than header");
    }
    void* p = ::mmap(nullptr, size, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
    ::close(fd);
    if (p == MAP_FAILED) throw Error(Errc::os_failure, detail::errno_text("mmap"));

    RegionHandle h;
    h.name_ = std::string(name);
    h.size_ = size;
    h.role_ = RegionRole::attacher;
    h.base_ = static_cast<std::byte*>(p);

    std::uint64_t magic;
    std::memcpy(&magic, kRegionMagic, 8);
    if (detail::load_acquire<std::uint64_t>(h.base_) != magic)
      throw Error(Errc::bad_magic, std::string(name));
    const auto hdr = h.header();
    if (hdr.layout_version != kLayoutVersion)
      throw Error(Errc::version_mismatch, "layout version " + std::to_string(hdr.layout_version));
    if (hdr.total_size != size || hdr.registry_offset + kRegistryBytes > hdr.arena_offset ||
        hdr.arena_offset > size)
      throw Error(Errc::bad_magic, std::string(name) + ": inconsistent layout header");
    return h;
  }

  /// Unmaps this handle. The region itself persists for other attachers.
  void detach() {
    if (base_ == nullptr) throw Error(Errc::usage_error, "detach of a detached handle");
    release();
  }

  bool attached() const noexcept { return base_ != nullptr; }
  const std::string& name() const noexcept { return name_; }
  std::uint64_t size_bytes() const noexcept { return size_; }
  RegionRole role() const noexcept { return role_; }

  RegionLayoutHeader header() const {
    const std::byte* b = checked_base();
    return {detail::load<std::uint32_t>(b + 8), detail::load<std::uint64_t>(b + 12),
            detail::load<std::uint64_t>(b + 20), detail::load<std::uint64_t>(b + 28)};
  }

  /// Bounds-checked view of [offset, offset + len).
  std::span<std::byte> bytes(std::uint64_t offset, std::uint64_t len) const {
    std::byte* b = checked_base();
    if (offset > size_ || len > size_ - offset)
      throw Error(Errc::region_overflow, "extent [" + std::to_string(offset) + ", +" +
                                             std::to_string(len) + ") exceeds region of " +
                                             std::to_string(size_));
    return {b + offset, static_cast<std::size_t>(len)};
  }

  std::byte* at(std::uint64_t offset, std::uint64_t len) const {
    return bytes(offset, len).data();
  }

 private:
  std::byte* checked_base() const {
    if (base_ == nullptr) throw Error(Errc::usage_error, "access through a detached handle");
    return base_;
  }

  void release() noexcept {
    if (base_ != nullptr) {
      ::munmap(base_, size_);
      base_ = nullptr;
    }
  }

  std::string name_;
  std::uint64_t size_ = 0;
  RegionRole role_ = RegionRole::creator;
  std::byte* base_ = nullptr;
};

/// Removes `name`. Live mappings stay valid until they detach.
inline void destroy_region(std::string_view name) {
  const std::string os = detail::os_name(name);
  if (::shm_unlink(os.c_str()) != 0) {
    if (errno == ENOENT) throw Error(Errc::not_found, std::string(name));
    throw Error(Errc::os_failure, detail::errno_text("shm_unlink"));
  }
}

/// Reclaims a region orphaned by a crashed creator. Returns whether one existed.
inline bool force_clean_region(std::string_view name) noexcept {
  try {
    destroy_region(name);
    return true;
  } catch (const Error&) {
    return false;
  }
}

/// Destroys the named region when it goes out of scope.
class RegionGuard {
 public:
  explicit RegionGuard(std::string name) : name_(std::move(name)) {}
  RegionGuard(const RegionGuard&) = delete;
  RegionGuard& operator=(const RegionGuard&) = delete;
  ~RegionGuard() { force_clean_region(name_); }

 private:
  std::string name_;
};

}  // namespace shmrpc
