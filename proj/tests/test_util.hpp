#pragma once

#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <functional>
#include <string>

#include "shmrpc/region.hpp"

namespace shmrpc::testing {

/// Region name unique to this process and call.
inline std::string unique_name(const char* tag = "t") {
  static std::atomic<int> n{0};
  return std::string("nn-") + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(n++);
}

/// A freshly created region that is destroyed at scope exit.
struct ScopedRegion {
  explicit ScopedRegion(std::uint64_t size = 1 << 20, const char* tag = "t")
      : name(unique_name(tag)), guard(name), handle(RegionHandle::create(name, size)) {}
  std::string name;
  RegionGuard guard;
  RegionHandle handle;
};

/// Runs `fn` in a forked child; returns its exit status (fn's return value,
/// or 99 if it threw).
inline int run_in_child(const std::function<int()>& fn) {
  const pid_t pid = ::fork();
  if (pid == 0) {
    int rc = 99;
    try {
      rc = fn();
    } catch (const std::exception& e) {
      std::fprintf(stderr, "child: %s\n", e.what());
    }
    ::_exit(rc);
  }
  int status = 0;
  ::waitpid(pid, &status, 0);
  return WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
}

inline double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace shmrpc::testing
