// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xtrace {

enum class ErrorCode {
  kParse,
  kValidation,
  kMethodNotFound,
  kArityMismatch,
  kStackOverflow,
  kInvalidStub,
  kWrongPhase,
  kDuplicateListener,
  kUnknownListener,
  kNotCompiled,
  kConfig,
  kUnknownConfig,
  kInvalidTransition,
  kBadArgument,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kParse: return "parse error";
    case ErrorCode::kValidation: return "validation error";
    case ErrorCode::kMethodNotFound: return "method not found";
    case ErrorCode::kArityMismatch: return "arity mismatch";
    case ErrorCode::kStackOverflow: return "stack depth limit exceeded";
    case ErrorCode::kInvalidStub: return "invalid entry point";
    case ErrorCode::kWrongPhase: return "wrong phase";
    case ErrorCode::kDuplicateListener: return "duplicate listener";
    case ErrorCode::kUnknownListener: return "unknown listener";
    case ErrorCode::kNotCompiled: return "method not compiled";
    case ErrorCode::kConfig: return "config error";
    case ErrorCode::kUnknownConfig: return "unknown config";
    case ErrorCode::kInvalidTransition: return "invalid status transition";
    case ErrorCode::kBadArgument: return "bad argument";
  }
  return "unknown error";
}

/// Every recoverable failure raised by the runtime carries a code so callers
/// (and the differential tests) can compare failures without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace xtrace
