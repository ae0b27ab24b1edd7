#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace shmrpc {

enum class Errc {
  // region
  already_exists,
  size_too_small,
  os_failure,
  not_found,
  version_mismatch,
  bad_magic,
  usage_error,
  // channel / arena
  bad_capacity,
  region_overflow,
  frame_too_large,
  out_of_space,
  invalid_length,
  // codec
  truncated,
  malformed_tag,
  stale_reference,
  bad_locator,
  // rpc
  name_taken,
  registry_full,
  service_not_found,
  no_capacity,
  timeout,
  server_error,
  channel_closed,
  // tcp
  connection_refused,
  protocol_error,
  // bench
  empty_samples,
  setup_failure,
};

constexpr std::string_view to_string(Errc e) noexcept {
  switch (e) {
    case Errc::already_exists: return "AlreadyExists";
    case Errc::size_too_small: return "SizeTooSmall";
    case Errc::os_failure: return "OsFailure";
    case Errc::not_found: return "NotFound";
    case Errc::version_mismatch: return "VersionMismatch";
    case Errc::bad_magic: return "BadMagic";
    case Errc::usage_error: return "UsageError";
    case Errc::bad_capacity: return "BadCapacity";
    case Errc::region_overflow: return "RegionOverflow";
    case Errc::frame_too_large: return "FrameTooLarge";
    case Errc::out_of_space: return "OutOfSpace";
    case Errc::invalid_length: return "InvalidLength";
    case Errc::truncated: return "Truncated";
    case Errc::malformed_tag: return "MalformedTag";
    case Errc::stale_reference: return "StaleReference";
    case Errc::bad_locator: return "BadLocator";
    case Errc::name_taken: return "NameTaken";
    case Errc::registry_full: return "RegistryFull";
    case Errc::service_not_found: return "ServiceNotFound";
    case Errc::no_capacity: return "NoCapacity";
    case Errc::timeout: return "Timeout";
    case Errc::server_error: return "ServerError";
    case Errc::channel_closed: return "ChannelClosed";
    case Errc::connection_refused: return "ConnectionRefused";
    case Errc::protocol_error: return "ProtocolError";
    case Errc::empty_samples: return "EmptySamples";
    case Errc::setup_failure: return "SetupFailure";
  }
  return "Unknown";
}

/// Every failure surfaced by the library. `code()` is the stable error class;
/// `status()` carries the remote status code for `Errc::server_error`.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what, unsigned status = 0)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code),
        status_(status) {}

  Errc code() const noexcept { return code_; }
  unsigned status() const noexcept { return status_; }

 private:
  Errc code_;
  unsigned status_;
};

}  // namespace shmrpc
