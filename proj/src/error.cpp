#include "resd/error.hpp"

namespace resd {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kContextOverflow: return "context-overflow";
    case ErrorCode::kNumeric: return "numeric";
    case ErrorCode::kShapeMismatch: return "shape-mismatch";
    case ErrorCode::kLayoutMismatch: return "layout-mismatch";
    case ErrorCode::kDomain: return "domain";
    case ErrorCode::kUnknownId: return "unknown-id";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kAdvisorUnavailable: return "advisor-unavailable";
    case ErrorCode::kTransport: return "transport";
  }
  return "unknown";
}

}  // namespace resd
