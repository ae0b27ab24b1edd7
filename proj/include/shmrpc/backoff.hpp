#pragma once

#include <sched.h>

#include <chrono>
#include <cstdint>
#include <thread>

namespace shmrpc {

inline void cpu_relax() noexcept {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_ia32_pause();
#elif defined(__aarch64__) || defined(__arm__)
  asm volatile("yield" ::: "memory");
#else
  asm volatile("" ::: "memory");
#endif
}

using Clock = std::chrono::steady_clock;
using Deadline = Clock::time_point;

inline Deadline deadline_after(std::chrono::nanoseconds d) { return Clock::now() + d; }

struct BackoffPolicy {
  // Relax-hint iterations before falling back to yielding the processor.
  std::uint32_t spin_limit = 1000;

  /// 1000 spins, except on a uniprocessor where spinning cannot observe the peer.
  static BackoffPolicy host_default() noexcept {
    return {std::thread::hardware_concurrency() > 1 ? 1000u : 0u};
  }
};

// Spin-then-yield. Never sleeps and never touches an OS wait primitive: the
// peer is only ever observed through polled memory.
class Backoff {
 public:
  explicit Backoff(BackoffPolicy p = BackoffPolicy::host_default()) noexcept : policy_(p) {}

  void pause() noexcept {
    if (spins_ < policy_.spin_limit) {
      ++spins_;
      cpu_relax();
    } else {
      ::sched_yield();
    }
  }

  void reset() noexcept { spins_ = 0; }
  const BackoffPolicy& policy() const noexcept { return policy_; }

 private:
  BackoffPolicy policy_;
  std::uint32_t spins_ = 0;
};

}  // namespace shmrpc
