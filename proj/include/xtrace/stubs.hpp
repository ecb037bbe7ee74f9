// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>

#include "xtrace/vm.hpp"

namespace xtrace {

/// Quick instrumentation stub for compiled methods: look up the original
/// compiled code, raise the entry event, run the compiled body directly, and
/// raise the exit event on the way out.
inline std::int64_t quick_instrumentation_entry(Vm& vm, ThreadContext& thread, const MethodRecord& method,
                                                std::span<const std::int64_t> args) {
  const LoweredCode* code = method.lowered_code();
  if (!code) throw Error(ErrorCode::kNotCompiled, "quick stub on " + method.ref().to_string());
  auto& instr = vm.instrumentation();
  instr.method_enter_event(thread, method, EventSource::kQuickStub, args);
  std::int64_t result;
  try {
    result = vm.run_lowered(thread, *code, args);
  } catch (...) {
    instr.method_exit_event(thread, method, EventSource::kQuickStub, args, std::nullopt, true);
    throw;
  }
  instr.method_exit_event(thread, method, EventSource::kQuickStub, args, result, false);
  return result;
}

/// Interpreter stub: events around an interpreted execution, whatever the
/// method's compilation state.
inline std::int64_t interpreter_stub_entry(Vm& vm, ThreadContext& thread, const MethodRecord& method,
                                           std::span<const std::int64_t> args) {
  auto& instr = vm.instrumentation();
  instr.method_enter_event(thread, method, EventSource::kInterpreterStub, args);
  std::int64_t result;
  try {
    result = vm.interpret(thread, method, args, /*checkpoint=*/false);
  } catch (...) {
    instr.method_exit_event(thread, method, EventSource::kInterpreterStub, args, std::nullopt, true);
    throw;
  }
  instr.method_exit_event(thread, method, EventSource::kInterpreterStub, args, result, false);
  return result;
}

}  // namespace xtrace
