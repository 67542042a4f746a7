#pragma once

#include <stdexcept>
#include <string>

namespace resd {

enum class ErrorCode {
  kInvalidArgument,
  kContextOverflow,
  kNumeric,
  kShapeMismatch,
  kLayoutMismatch,
  kDomain,
  kUnknownId,
  kConfig,
  kIo,
  kFormat,
  kAdvisorUnavailable,
  kTransport,
};

const char* to_string(ErrorCode code);

// Contract violations and environmental failures. Domain outcomes (parse
// errors, failing test cases) are returned as values instead.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace resd
