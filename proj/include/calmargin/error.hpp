#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace calmargin {

enum class ErrorCode {
  kValidation,
  kShapeMismatch,
  kBadMagic,
  kBadVersion,
  kDimensionOverflow,
  kTruncatedPayload,
  kDtypeMismatch,
  kIo,
  kNoForeground,
  kConfig,
  kNumerical,
  kAlreadyCompleted,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the library; callers branch on code().
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
  if (!condition) fail(code, message);
}

}  // namespace calmargin
