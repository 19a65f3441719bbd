#pragma once

#include <stdexcept>
#include <string>

namespace cof {

enum class ErrorCode {
  invalid_argument,
  shape,
  domain,
  format,
  io,
  divergence,
  insufficient_signal,
  insufficient_frames,
  insufficient_data,
  degenerate_input,
  degenerate_anatomy,
  integration_blowup,
  undefined_distance,
  manifest,
};

const char* error_code_name(ErrorCode code) noexcept;

/// Exception carrying a machine-readable category; every failure in the
/// library surfaces as one of these.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) throw Error(code, message);
}

}  // namespace cof
