#pragma once

// RPC over ring channels: a service registry with a connect handshake that
// hands each client an exclusive queue pair, synchronous client calls with
// client-managed deadlines, and a polling server dispatch loop.
//
// Registry header (at kRegistryOffset, 64 bytes):
//   0 u32 entry_count   4 u32 bind_lock   8 u64 carve_cursor (absolute offset)
// Registry entry (stride 512, entries follow the header):
//   0  u64 name_hash        8  u32 state (0 EMPTY, 1 BOUND)
//   12 u32 n_queue_pairs    16 u64 queue_pair_table_offset
//   24 u32 name_len         28 u32 reserved
//   32 name bytes [64]
//   96 connect slots [16] x 16 bytes: u32 state; u32 assigned_qp_index; u64 client_nonce
//      state: 0 FREE, 1 CLAIMED, 2 ASSIGNED, 3 REJECTED
// Queue pair descriptor (stride 64, in the table):
//   0  u32 state (0 FREE, 1 ASSIGNED, 2 RELEASING)   4 u32 reserved
//   8  u64 owner_nonce
//   16 u64 request_channel_offset   24 u64 response_channel_offset
//   32 u64 client_arena_offset      40 u64 server_arena_offset
//   48 u64 handled_count            56 u64 reserved
//
// A client claims a connect slot by a compare-and-set of its nonce word into
// a zero nonce, then publishes CLAIMED. The server assigns the lowest-index
// free pair and moves the slot to ASSIGNED (or REJECTED) with a CAS, so a
// client that gives up on its deadline can withdraw a CLAIMED slot safely.

#include <unistd.h>

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "shmrpc/arena.hpp"
#include "shmrpc/backoff.hpp"
#include "shmrpc/codec.hpp"
#include "shmrpc/detail/bytes.hpp"
#include "shmrpc/error.hpp"
#include "shmrpc/frame.hpp"
#include "shmrpc/region.hpp"
#include "shmrpc/ring_channel.hpp"
#include "shmrpc/stub.hpp"

namespace shmrpc {

namespace frame_flags {
// Payload is a raw body handed over by reference, not copy-codec bytes.
inline constexpr std::uint32_t kRawBody = 1u << 3;
}  // namespace frame_flags

struct BindOptions {
  std::uint32_t n_queue_pairs = 4;
  std::uint32_t capacity_slots = 64;
  std::uint32_t slot_size_bytes = 16 * 1024;
  std::uint64_t subarena_bytes = 256 * 1024;
  std::chrono::nanoseconds response_send_timeout = std::chrono::milliseconds(100);
  BackoffPolicy backoff = BackoffPolicy::host_default();
};

namespace registry {

inline constexpr std::uint32_t kConnectSlots = 16;
inline constexpr std::uint64_t kEntriesOffset = 64;
inline constexpr std::uint64_t kConnectSlotsOffset = 96;
inline constexpr std::uint64_t kConnectSlotStride = 16;
inline constexpr std::uint64_t kQueuePairStride = 64;
inline constexpr std::size_t kMaxNameLen = 64;

enum EntryState : std::uint32_t { kEmpty = 0, kBound = 1 };
enum SlotState : std::uint32_t { kSlotFree = 0, kClaimed = 1, kAssigned = 2, kRejected = 3 };
enum PairState : std::uint32_t { kPairFree = 0, kPairAssigned = 1, kPairReleasing = 2 };

inline std::byte* header(const RegionHandle& r) {
  return r.at(r.header().registry_offset, kRegistryBytes);
}
inline std::byte* entry(const RegionHandle& r, std::uint32_t i) {
  return header(r) + kEntriesOffset + i * kRegistryEntryStride;
}
inline std::byte* connect_slot(std::byte* entry, std::uint32_t s) {
  return entry + kConnectSlotsOffset + s * kConnectSlotStride;
}
inline std::byte* pair_descriptor(const RegionHandle& r, std::byte* entry, std::uint32_t i) {
  const auto table = detail::load<std::uint64_t>(entry + 16);
  return r.at(table + i * kQueuePairStride, kQueuePairStride);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string_view entry_name(const std::byte* e) {
  const auto len = detail::load<std::uint32_t>(e + 24);
  return {reinterpret_cast<const char*>(e + 32), std::min<std::size_t>(len, kMaxNameLen)};
}

inline std::optional<std::uint32_t> find_bound(const RegionHandle& r, std::string_view name) {
  const auto hash = fnv1a(name);
  for (std::uint32_t i = 0; i < kRegistryEntries; ++i) {
    std::byte* e = entry(r, i);
    if (detail::load_acquire<std::uint32_t>(e + 8) == kBound &&
        detail::load<std::uint64_t>(e) == hash && entry_name(e) == name)
      return i;
  }
  return std::nullopt;
}

class BindLock {
 public:
  explicit BindLock(std::byte* reg) : word_(reg + 4) {
    Backoff b;
    for (;;) {
      std::uint32_t expected = 0;
      if (detail::word<std::uint32_t>(word_).compare_exchange_weak(expected, 1,
                                                                   std::memory_order_acquire))
        return;
      b.pause();
    }
  }
  ~BindLock() { detail::store_release<std::uint32_t>(word_, 0); }
  BindLock(const BindLock&) = delete;
  BindLock& operator=(const BindLock&) = delete;

 private:
  std::byte* word_;
};

}  // namespace registry

constexpr std::uint64_t queue_pair_footprint(const BindOptions& o) noexcept {
  return 2 * detail::align_up(channel_footprint(o.capacity_slots, o.slot_size_bytes), 64) +
         2 * detail::align_up(arena_footprint(o.subarena_bytes), 64);
}

constexpr std::uint64_t service_footprint(const BindOptions& o) noexcept {
  return detail::align_up(std::uint64_t{o.n_queue_pairs} * registry::kQueuePairStride, 64) +
         std::uint64_t{o.n_queue_pairs} * queue_pair_footprint(o);
}

/// Smallest region holding `services` services bound with `o`.
constexpr std::uint64_t required_region_size(const BindOptions& o, std::uint32_t services = 1) {
  const auto need = kArenaOffset + services * service_footprint(o);
  return need < kMinRegionSize ? kMinRegionSize : detail::align_up(need, 4096);
}

/// Snapshot of one queue pair descriptor, for audits and tests.
struct PairAudit {
  std::uint32_t state = 0;
  std::uint64_t owner_nonce = 0;
  std::uint64_t request_channel_offset = 0;
  std::uint64_t response_channel_offset = 0;
  std::uint64_t client_arena_offset = 0;
  std::uint64_t server_arena_offset = 0;
  std::uint64_t handled = 0;
};

inline std::vector<PairAudit> audit_service(const RegionHandle& r, std::string_view name) {
  const auto idx = registry::find_bound(r, name);
  if (!idx) throw Error(Errc::service_not_found, std::string(name));
  std::byte* e = registry::entry(r, *idx);
  const auto n = detail::load<std::uint32_t>(e + 12);
  std::vector<PairAudit> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::byte* d = registry::pair_descriptor(r, e, i);
    out.push_back({detail::load_acquire<std::uint32_t>(d),
                   detail::load_acquire<std::uint64_t>(d + 8), detail::load<std::uint64_t>(d + 16),
                   detail::load<std::uint64_t>(d + 24), detail::load<std::uint64_t>(d + 32),
                   detail::load<std::uint64_t>(d + 40),
                   detail::word<std::uint64_t>(const_cast<std::byte*>(d) + 48)
                       .load(std::memory_order_relaxed)});
  }
  return out;
}

inline bool service_bound(const RegionHandle& r, std::string_view name) {
  return registry::find_bound(r, name).has_value();
}

namespace detail {

inline constexpr std::string_view kTraceKey = ":trace-id";
inline constexpr std::string_view kIdKey = ":id";
inline constexpr std::string_view kRepeatKey = ":repeat";

/// Frames `msg` into `f` with the given encoding. `f.metadata[0]` must already
/// hold the trace entry; everything after it is rewritten.
inline void pack_message(const EchoMessage& msg, Encoding enc, unsigned repeat, Arena& arena,
                         std::uint32_t slot_size, MessageFrame& f) {
  f.metadata.resize(1);
  if (enc == Encoding::copy) {
    if (repeat > 1) f.metadata.emplace_back(kRepeatKey, std::to_string(repeat));
    const std::size_t size = encoded_size(msg);
    const std::size_t md = encoded_metadata_size(f.metadata);
    if (kSlotHeaderSize + md + size <= slot_size) {
      f.flags = frame_flags::kEncodingInline;
      f.payload.resize(size);
      encode_copy_into(msg, f.payload, repeat);
      f.arena = {};
    } else {
      // Serialize into process-local memory, then hand the bytes to the
      // transport, exactly as the inline branch does.
      f.flags = frame_flags::kEncodingArenaRef;
      f.payload.resize(size);
      encode_copy_into(msg, f.payload, repeat);
      f.arena = arena.alloc(size);
      std::memcpy(arena.extent(f.arena).data(), f.payload.data(), size);
      f.payload.clear();
    }
    return;
  }
  f.flags = frame_flags::kEncodingArenaRef | frame_flags::kRawBody;
  f.payload.clear();
  f.arena = write_reference(msg.body, arena);
  std::string id(8, '\0');
  std::memcpy(id.data(), &msg.id, 8);
  f.metadata.emplace_back(kIdKey, std::move(id));
  f.metadata.insert(f.metadata.end(), msg.attrs.begin(), msg.attrs.end());
}

/// Inverse of pack_message; `peer_arena` is the arena the sender allocated from.
inline void unpack_message(const MessageFrame& f, const Arena& peer_arena, unsigned repeat,
                           EchoMessage& out) {
  if (f.is_inline()) {
    decode_copy_into(f.payload, out, repeat);
    return;
  }
  if ((f.flags & frame_flags::kRawBody) == 0) {
    decode_copy_into(read_reference(f, peer_arena), out, repeat);
    if (peer_arena.epoch() != f.arena.epoch)
      throw Error(Errc::stale_reference, "arena reset during decode");
    return;
  }
  if (f.metadata.size() < 2 || f.metadata[1].first != kIdKey || f.metadata[1].second.size() != 8)
    throw Error(Errc::malformed_tag, "reference frame without message id");
  read_reference_into(f, peer_arena, out.body);
  std::memcpy(&out.id, f.metadata[1].second.data(), 8);
  out.attrs.assign(f.metadata.begin() + 2, f.metadata.end());
}

inline std::uint64_t make_nonce() {
  static std::atomic<std::uint64_t> counter{0};
  static const std::uint64_t seed = [] {
    std::random_device rd;
    return (std::uint64_t{rd()} << 32) ^ rd() ^ (std::uint64_t(::getpid()) << 17);
  }();
  // splitmix64
  std::uint64_t z = (seed ^ (std::uint64_t(::getpid()) << 40)) +
                    0x9e3779b97f4a7c15ull * (counter.fetch_add(1) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  z ^= z >> 31;
  return z == 0 ? 1 : z;
}

}  // namespace detail

class ServerRuntime {
 public:
  ServerRuntime(const ServerRuntime&) = delete;
  ServerRuntime& operator=(const ServerRuntime&) = delete;
  ServerRuntime(ServerRuntime&& o) noexcept { *this = std::move(o); }
  ServerRuntime& operator=(ServerRuntime&& o) noexcept {
    if (this != &o) {
      region_ = std::exchange(o.region_, nullptr);
      entry_ = std::exchange(o.entry_, nullptr);
      name_ = std::move(o.name_);
      handlers_ = std::move(o.handlers_);
      opts_ = o.opts_;
      pairs_ = std::move(o.pairs_);
      next_pair_ = o.next_pair_;
      dropped_ = o.dropped_;
      corrupt_ = o.corrupt_;
    }
    return *this;
  }
  ~ServerRuntime() { unbind(); }

  /// Registers `service_name` and carves its queue pairs out of the region.
  static ServerRuntime bind(const RegionHandle& region, std::string_view service_name,
                            HandlerTable handlers, BindOptions opts = {}) {
    using namespace registry;
    if (service_name.empty() || service_name.size() > kMaxNameLen)
      throw Error(Errc::usage_error, "service name must be 1..64 bytes");
    if (opts.n_queue_pairs == 0) throw Error(Errc::usage_error, "need at least one queue pair");
    if (opts.subarena_bytes % kArenaAlignment != 0)
      throw Error(Errc::usage_error, "sub-arena size must be a multiple of 16");

    std::byte* reg = header(region);
    BindLock lock(reg);
    if (find_bound(region, service_name)) throw Error(Errc::name_taken, std::string(service_name));
    std::optional<std::uint32_t> free_entry;
    for (std::uint32_t i = 0; i < kRegistryEntries && !free_entry; ++i)
      if (detail::load_acquire<std::uint32_t>(entry(region, i) + 8) == kEmpty) free_entry = i;
    if (!free_entry) throw Error(Errc::registry_full, std::string(service_name));

    std::uint64_t cursor = detail::load<std::uint64_t>(reg + 8);
    if (cursor == 0) cursor = region.header().arena_offset;
    const std::uint64_t need = service_footprint(opts);
    if (need > region.size_bytes() || cursor > region.size_bytes() - need)
      throw Error(Errc::region_overflow,
                  std::to_string(opts.n_queue_pairs) + " queue pairs need " +
                      std::to_string(need) + " bytes, " +
                      std::to_string(region.size_bytes() - std::min(cursor, region.size_bytes())) +
                      " left");
    detail::store<std::uint32_t>(reg, kRegistryEntries);
    detail::store<std::uint64_t>(reg + 8, cursor + need);

    ServerRuntime rt;
    rt.region_ = &region;
    rt.name_ = std::string(service_name);
    rt.handlers_ = std::move(handlers);
    rt.opts_ = opts;

    const std::uint64_t table = cursor;
    std::uint64_t at =
        table + detail::align_up(std::uint64_t{opts.n_queue_pairs} * kQueuePairStride, 64);
    const auto ch_bytes =
        detail::align_up(channel_footprint(opts.capacity_slots, opts.slot_size_bytes), 64);
    const auto ar_bytes = detail::align_up(arena_footprint(opts.subarena_bytes), 64);
    for (std::uint32_t i = 0; i < opts.n_queue_pairs; ++i) {
      std::byte* d = region.at(table + i * kQueuePairStride, kQueuePairStride);
      std::memset(d, 0, kQueuePairStride);
      detail::store<std::uint64_t>(d + 16, at);
      detail::store<std::uint64_t>(d + 24, at + ch_bytes);
      detail::store<std::uint64_t>(d + 32, at + 2 * ch_bytes);
      detail::store<std::uint64_t>(d + 40, at + 2 * ch_bytes + ar_bytes);
      Pair p;
      p.descriptor = d;
      p.requests = RingChannel::init(region, at, opts.capacity_slots, opts.slot_size_bytes);
      p.responses = RingChannel::init(region, at + ch_bytes, opts.capacity_slots, opts.slot_size_bytes);
      p.client_arena = Arena::init(region, at + 2 * ch_bytes, opts.subarena_bytes);
      p.server_arena = Arena::init(region, at + 2 * ch_bytes + ar_bytes, opts.subarena_bytes);
      rt.pairs_.push_back(std::move(p));
      at += queue_pair_footprint(opts);
    }

    std::byte* e = entry(region, *free_entry);
    std::memset(e, 0, kRegistryEntryStride);
    detail::store<std::uint64_t>(e, fnv1a(service_name));
    detail::store<std::uint32_t>(e + 12, opts.n_queue_pairs);
    detail::store<std::uint64_t>(e + 16, table);
    detail::store<std::uint32_t>(e + 24, static_cast<std::uint32_t>(service_name.size()));
    std::memcpy(e + 32, service_name.data(), service_name.size());
    detail::store_release<std::uint32_t>(e + 8, kBound);
    rt.entry_ = e;
    return rt;
  }

  /// One polling pass: pending connects, releases, then at most one request
  /// per queue pair in round-robin order. Returns the number of requests handled.
  std::size_t serve_once() {
    using namespace registry;
    for (std::uint32_t s = 0; s < kConnectSlots; ++s) poll_connect(s);
    std::size_t handled = 0;
    const auto n = static_cast<std::uint32_t>(pairs_.size());
    for (std::uint32_t k = 0; k < n; ++k) {
      const std::uint32_t i = (next_pair_ + k) % n;
      Pair& p = pairs_[i];
      const auto state = detail::load_acquire<std::uint32_t>(p.descriptor);
      if (state == kPairReleasing) {
        p.active = false;
        detail::store_release<std::uint32_t>(p.descriptor, kPairFree);
        continue;
      }
      if (state != kPairAssigned || !p.active) continue;
      const auto st = p.requests.try_recv(p.in);
      if (st == ChannelStatus::ok) {
        handle(p);
        ++handled;
      } else if (st == ChannelStatus::corrupt) {
        ++corrupt_;
      }
    }
    next_pair_ = n == 0 ? 0 : (next_pair_ + 1) % n;
    return handled;
  }

  /// Polls until `stop` is set, then closes every channel.
  void serve(const std::atomic<bool>& stop) {
    Backoff backoff(opts_.backoff);
    while (!stop.load(std::memory_order_relaxed)) {
      if (serve_once() == 0)
        backoff.pause();
      else
        backoff.reset();
    }
    close_all();
  }

  void close_all() noexcept {
    for (auto& p : pairs_) {
      p.requests.close();
      p.responses.close();
    }
  }

  /// Marks the registry entry EMPTY. Carved memory is not reclaimed.
  void unbind() noexcept {
    if (entry_ == nullptr) return;
    close_all();
    detail::store_release<std::uint32_t>(entry_ + 8, registry::kEmpty);
    entry_ = nullptr;
  }

  const std::string& name() const noexcept { return name_; }
  std::uint32_t queue_pairs() const noexcept { return static_cast<std::uint32_t>(pairs_.size()); }
  std::uint64_t handled(std::uint32_t pair) const { return pairs_.at(pair).handled; }
  std::uint64_t dropped_responses() const noexcept { return dropped_; }
  std::uint64_t corrupt_frames() const noexcept { return corrupt_; }
  std::uint32_t free_pairs() const {
    std::uint32_t n = 0;
    for (const auto& p : pairs_)
      n += detail::load_acquire<std::uint32_t>(p.descriptor) == registry::kPairFree;
    return n;
  }

 private:
  struct Pair {
    std::byte* descriptor = nullptr;
    RingChannel requests;
    RingChannel responses;
    Arena client_arena;
    Arena server_arena;
    bool active = false;
    std::uint64_t handled = 0;
    MessageFrame in;
    MessageFrame out;
    EchoMessage msg;
  };

  ServerRuntime() = default;

  void poll_connect(std::uint32_t s) {
    using namespace registry;
    std::byte* slot = connect_slot(entry_, s);
    auto state = detail::word<std::uint32_t>(slot);
    if (state.load(std::memory_order_acquire) != kClaimed) return;
    const auto nonce = detail::load_acquire<std::uint64_t>(slot + 8);

    std::optional<std::uint32_t> pick;
    for (std::uint32_t i = 0; i < pairs_.size() && !pick; ++i)
      if (detail::load_acquire<std::uint32_t>(pairs_[i].descriptor) == kPairFree) pick = i;
    std::uint32_t expected = kClaimed;
    if (!pick) {
      state.compare_exchange_strong(expected, kRejected, std::memory_order_acq_rel);
      return;
    }

    Pair& p = pairs_[*pick];
    const RegionHandle& r = *region_;
    std::byte* d = p.descriptor;
    p.requests = RingChannel::init(r, detail::load<std::uint64_t>(d + 16), opts_.capacity_slots,
                                   opts_.slot_size_bytes);
    p.responses = RingChannel::init(r, detail::load<std::uint64_t>(d + 24), opts_.capacity_slots,
                                    opts_.slot_size_bytes);
    p.client_arena = Arena::init(r, detail::load<std::uint64_t>(d + 32), opts_.subarena_bytes);
    p.server_arena = Arena::init(r, detail::load<std::uint64_t>(d + 40), opts_.subarena_bytes);
    detail::store_release<std::uint64_t>(d + 8, nonce);
    detail::store_release<std::uint32_t>(d, kPairAssigned);
    detail::store<std::uint32_t>(slot + 4, *pick);
    if (state.compare_exchange_strong(expected, kAssigned, std::memory_order_acq_rel)) {
      p.active = true;
    } else {
      // Client withdrew on its deadline.
      detail::store_release<std::uint32_t>(d, kPairFree);
    }
  }

  void handle(Pair& p) {
    // A new request means the client has returned from every earlier call,
    // so nothing it still reads lives in the response sub-arena.
    p.server_arena.reset();

    MessageFrame& out = p.out;
    out.request_id = p.in.request_id;
    out.method_id = p.in.method_id;
    out.status_code = status_code::kOk;
    out.metadata.resize(1);
    if (!p.in.metadata.empty() && p.in.metadata[0].first == detail::kTraceKey)
      out.metadata[0] = p.in.metadata[0];
    else
      out.metadata[0] = {std::string(detail::kTraceKey), std::string()};

    const Encoding enc =
        (p.in.flags & frame_flags::kRawBody) != 0 ? Encoding::reference : Encoding::copy;
    const unsigned repeat = repeat_of(p.in);
    auto fail = [&](std::uint32_t code) {
      out.flags = frame_flags::kEncodingInline | frame_flags::kIsError;
      out.status_code = code;
      out.payload.clear();
      out.arena = {};
    };

    bool ok = true;
    try {
      detail::unpack_message(p.in, p.client_arena, repeat, p.msg);
    } catch (const Error&) {
      fail(status_code::kDecodeError);
      ok = false;
    }
    if (ok) {
      const auto h = handlers_.find(p.in.method_id);
      if (h == handlers_.end()) {
        fail(status_code::kUnknownMethod);
      } else {
        try {
          EchoMessage resp = h->second(std::move(p.msg));
          detail::pack_message(resp, enc, repeat, p.server_arena, p.responses.slot_size(), out);
          p.msg = std::move(resp);
        } catch (...) {
          fail(status_code::kHandlerFault);
        }
      }
    }

    ++p.handled;
    detail::word<std::uint64_t>(p.descriptor + 48).fetch_add(1, std::memory_order_relaxed);
    const auto st =
        p.responses.send_until(out, deadline_after(opts_.response_send_timeout), opts_.backoff);
    if (st != ChannelStatus::ok) ++dropped_;
  }

  static unsigned repeat_of(const MessageFrame& f) {
    if (f.metadata.size() > 1 && f.metadata[1].first == detail::kRepeatKey)
      return static_cast<unsigned>(std::max(1, std::atoi(f.metadata[1].second.c_str())));
    return 1;
  }

  const RegionHandle* region_ = nullptr;
  std::byte* entry_ = nullptr;
  std::string name_;
  HandlerTable handlers_;
  BindOptions opts_;
  std::vector<Pair> pairs_;
  std::uint32_t next_pair_ = 0;
  std::uint64_t dropped_ = 0;
  std::uint64_t corrupt_ = 0;
};

class ClientStub {
 public:
  ClientStub(const ClientStub&) = delete;
  ClientStub& operator=(const ClientStub&) = delete;
  ClientStub(ClientStub&& o) noexcept { *this = std::move(o); }
  ClientStub& operator=(ClientStub&& o) noexcept {
    if (this != &o) {
      if (connected_) disconnect();
      region_ = o.region_;
      descriptor_ = o.descriptor_;
      pair_index_ = o.pair_index_;
      nonce_ = o.nonce_;
      requests_ = o.requests_;
      responses_ = o.responses_;
      own_arena_ = o.own_arena_;
      peer_arena_ = o.peer_arena_;
      policy_ = o.policy_;
      next_request_id_ = o.next_request_id_;
      outstanding_ = o.outstanding_;
      stale_ = o.stale_;
      timeouts_ = o.timeouts_;
      connected_ = std::exchange(o.connected_, false);
    }
    return *this;
  }
  ~ClientStub() {
    if (connected_) disconnect();
  }

  static ClientStub connect(const RegionHandle& region, std::string_view service_name,
                            Deadline deadline,
                            BackoffPolicy policy = BackoffPolicy::host_default()) {
    using namespace registry;
    const auto idx = find_bound(region, service_name);
    if (!idx) throw Error(Errc::service_not_found, std::string(service_name));
    std::byte* e = entry(region, *idx);
    const std::uint64_t nonce = detail::make_nonce();

    Backoff backoff(policy);
    std::byte* slot = nullptr;
    while (slot == nullptr) {
      for (std::uint32_t s = 0; s < kConnectSlots && slot == nullptr; ++s) {
        std::byte* c = connect_slot(e, s);
        std::uint64_t expected = 0;
        if (detail::word<std::uint64_t>(c + 8).compare_exchange_strong(
                expected, nonce, std::memory_order_acq_rel))
          slot = c;
      }
      if (slot != nullptr) break;
      if (Clock::now() >= deadline) throw Error(Errc::timeout, "no free connect slot");
      backoff.pause();
    }
    auto state = detail::word<std::uint32_t>(slot);
    state.store(kClaimed, std::memory_order_release);

    auto release_slot = [&] {
      state.store(kSlotFree, std::memory_order_release);
      detail::store_release<std::uint64_t>(slot + 8, 0);
    };

    backoff.reset();
    std::uint32_t st;
    for (;;) {
      st = state.load(std::memory_order_acquire);
      if (st == kAssigned || st == kRejected) break;
      if (Clock::now() >= deadline) {
        std::uint32_t expected = kClaimed;
        if (state.compare_exchange_strong(expected, kSlotFree, std::memory_order_acq_rel)) {
          detail::store_release<std::uint64_t>(slot + 8, 0);
          throw Error(Errc::timeout, "server did not answer connect");
        }
        continue;
      }
      backoff.pause();
    }
    if (st == kRejected) {
      release_slot();
      throw Error(Errc::no_capacity, std::string(service_name));
    }

    const auto pair = detail::load<std::uint32_t>(slot + 4);
    release_slot();

    ClientStub stub;
    std::byte* d = pair_descriptor(region, e, pair);
    if (detail::load_acquire<std::uint32_t>(d) != kPairAssigned ||
        detail::load<std::uint64_t>(d + 8) != nonce)
      throw Error(Errc::usage_error, "queue pair descriptor not owned after assignment");
    stub.region_ = &region;
    stub.descriptor_ = d;
    stub.pair_index_ = pair;
    stub.nonce_ = nonce;
    stub.requests_ = RingChannel::open(region, detail::load<std::uint64_t>(d + 16));
    stub.responses_ = RingChannel::open(region, detail::load<std::uint64_t>(d + 24));
    stub.own_arena_ = Arena::open(region, detail::load<std::uint64_t>(d + 32));
    stub.peer_arena_ = Arena::open(region, detail::load<std::uint64_t>(d + 40));
    stub.policy_ = policy;
    stub.connected_ = true;
    return stub;
  }

  EchoMessage call(std::uint32_t method_id, const EchoMessage& request, const CallOptions& opts,
                   CallTiming* timing = nullptr) {
    if (!connected_) throw Error(Errc::channel_closed, "stub is disconnected");
    if (outstanding_ == 0) own_arena_.reset();

    const auto t0 = Clock::now();
    const std::uint64_t rid = next_request_id_++;
    out_.request_id = rid;
    out_.method_id = method_id;
    out_.status_code = status_code::kOk;
    out_.metadata.resize(1);
    out_.metadata[0].first = detail::kTraceKey;
    char trace[17];
    std::snprintf(trace, sizeof trace, "%016llx",
                  static_cast<unsigned long long>(nonce_ ^ (rid * 0x9e3779b97f4a7c15ull)));
    out_.metadata[0].second.assign(trace, 16);
    const unsigned repeat = opts.encoding == Encoding::copy ? std::max(1u, opts.repeat) : 1u;
    detail::pack_message(request, opts.encoding, repeat, own_arena_, requests_.slot_size(), out_);
    const auto t1 = Clock::now();

    switch (requests_.send_until(out_, opts.deadline, policy_)) {
      case ChannelStatus::ok: break;
      case ChannelStatus::timeout:
        ++timeouts_;
        throw Error(Errc::timeout, "request channel full until deadline");
      case ChannelStatus::closed: throw Error(Errc::channel_closed, "request channel closed");
      case ChannelStatus::frame_too_large:
        throw Error(Errc::frame_too_large, "request metadata does not fit a slot");
      default: throw Error(Errc::usage_error, "unexpected send status");
    }
    ++outstanding_;

    for (;;) {
      const auto st = responses_.recv_until(in_, opts.deadline, policy_);
      if (st == ChannelStatus::timeout) {
        --outstanding_;
        ++timeouts_;
        throw Error(Errc::timeout, "no response for request " + std::to_string(rid));
      }
      if (st == ChannelStatus::closed) {
        --outstanding_;
        throw Error(Errc::channel_closed, "response channel closed");
      }
      if (st == ChannelStatus::corrupt) continue;
      if (in_.request_id == rid) break;
      // Late answer to a call that already timed out.
      ++stale_;
    }
    --outstanding_;
    const auto t2 = Clock::now();

    if (in_.is_error())
      throw Error(Errc::server_error, "status " + std::to_string(in_.status_code), in_.status_code);
    EchoMessage resp;
    detail::unpack_message(in_, peer_arena_, repeat, resp);
    if (timing != nullptr) {
      const auto t3 = Clock::now();
      timing->serialize = t1 - t0;
      timing->wait = t2 - t1;
      timing->decode = t3 - t2;
    }
    return resp;
  }

  /// Closes the pair's channels and hands the pair back to the server.
  void disconnect() {
    if (!connected_) throw Error(Errc::usage_error, "stub already disconnected");
    requests_.close();
    responses_.close();
    detail::store_release<std::uint32_t>(descriptor_, registry::kPairReleasing);
    connected_ = false;
  }

  bool connected() const noexcept { return connected_; }
  std::uint32_t queue_pair_index() const noexcept { return pair_index_; }
  std::uint64_t stale_responses() const noexcept { return stale_; }
  std::uint64_t timeouts() const noexcept { return timeouts_; }
  std::uint64_t outstanding() const noexcept { return outstanding_; }
  std::uint64_t next_request_id() const noexcept { return next_request_id_; }

 private:
  ClientStub() = default;

  const RegionHandle* region_ = nullptr;
  std::byte* descriptor_ = nullptr;
  std::uint32_t pair_index_ = 0;
  std::uint64_t nonce_ = 0;
  RingChannel requests_;
  RingChannel responses_;
  Arena own_arena_;
  Arena peer_arena_;
  BackoffPolicy policy_;
  std::uint64_t next_request_id_ = 1;
  std::uint64_t outstanding_ = 0;
  std::uint64_t stale_ = 0;
  std::uint64_t timeouts_ = 0;
  bool connected_ = false;
  MessageFrame out_;
  MessageFrame in_;
};

static_assert(RpcStub<ClientStub>);

}  // namespace shmrpc
