// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <string>
#include <vector>

#include "oracles.hpp"
#include "xtrace/xtrace.hpp"

namespace xtrace {
namespace {

constexpr std::string_view kProgram =
    "class p.A\n"
    "  method outer(int)\n    loadarg 0\n    call p.A.inner(int)\n    pushconst 1\n    add\n    ret\n"
    "  method inner(int)\n    loadarg 0\n    pushconst 2\n    mul\n    ret\n"
    "class p.B\n"
    "  method solo()\n    pushconst 5\n    ret\n";

struct Recorded {
  std::string method;
  MethodEvent kind;
  EventSource source;
};

class InstrumentationTest : public ::testing::Test {
 protected:
  void SetUp() override { vm.load_program(kProgram); }

  ListenerRegistration recorder(std::string id, EventMask mask = kAllEventsMask) {
    return {std::move(id), mask, [this](const MethodEventInfo& info) {
              seen.push_back({info.method_ref().short_name(), info.kind, info.source});
            }};
  }

  Vm vm;
  std::vector<Recorded> seen;
  MethodRef outer = parse_method_ref("p.A.outer(int)");
  MethodRef inner = parse_method_ref("p.A.inner(int)");
  MethodRef solo = parse_method_ref("p.B.solo()");
};

TEST_F(InstrumentationTest, InterpreterCheckpointFiresOnlyWithListeners) {
  auto thread = vm.new_thread();
  EXPECT_EQ(vm.invoke(thread, outer, {3}), 7);
  EXPECT_EQ(vm.instrumentation().events_dispatched(), 0u);
  vm.instrumentation().add_listener(recorder("r"));
  EXPECT_EQ(vm.invoke(thread, outer, {3}), 7);
  ASSERT_EQ(seen.size(), 4u);
  EXPECT_EQ(seen[0].method, "p.A.outer");
  EXPECT_EQ(seen[0].kind, MethodEvent::kEntered);
  EXPECT_EQ(seen[1].method, "p.A.inner");
  EXPECT_EQ(seen[2].kind, MethodEvent::kExited);
  EXPECT_EQ(seen[3].method, "p.A.outer");
  for (const auto& r : seen) EXPECT_EQ(r.source, EventSource::kInterpreterCheckpoint);
}

TEST_F(InstrumentationTest, CompiledCodeBypassesCheckpoint) {
  vm.jit_compile(outer);
  vm.jit_compile(inner);
  vm.instrumentation().add_listener(recorder("r"));
  auto thread = vm.new_thread();
  EXPECT_EQ(vm.invoke(thread, outer, {3}), 7);
  EXPECT_TRUE(seen.empty());
}

TEST_F(InstrumentationTest, StubsFireEventsForCompiledMethods) {
  vm.jit_compile(inner);
  vm.instrumentation().install_stubs_for_method(inner, EntryPoint::kQuickStub);
  vm.instrumentation().add_listener(recorder("r"));
  auto thread = vm.new_thread();
  vm.jit_compile(outer);
  EXPECT_EQ(vm.invoke(thread, outer, {3}), 7);
  ASSERT_EQ(seen.size(), 2u);
  EXPECT_EQ(seen[0].method, "p.A.inner");
  EXPECT_EQ(seen[0].source, EventSource::kQuickStub);
}

TEST_F(InstrumentationTest, QuickStubNeedsCompiledCode) {
  try {
    vm.instrumentation().install_stubs_for_method(inner, EntryPoint::kQuickStub);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidStub);
  }
  EXPECT_EQ(vm.registry().get(inner).entry_point(), EntryPoint::kInterpreterBridge);
  EXPECT_THROW(vm.instrumentation().install_stubs_for_method(inner, EntryPoint::kCompiledDirect), Error);
}

TEST_F(InstrumentationTest, RepeatedInstallThenOneRestore) {
  vm.jit_compile(inner);
  auto& rec = vm.registry().get(inner);
  auto& instr = vm.instrumentation();
  instr.install_stubs_for_method(rec, EntryPoint::kInterpreterStub);
  instr.install_stubs_for_method(rec, EntryPoint::kQuickStub);
  EXPECT_EQ(rec.saved_original(), EntryPoint::kCompiledDirect);
  EXPECT_TRUE(instr.restore_entry_point(rec));
  EXPECT_EQ(rec.entry_point(), EntryPoint::kCompiledDirect);
  EXPECT_FALSE(rec.saved_original().has_value());
  EXPECT_FALSE(instr.restore_entry_point(rec));
}

TEST_F(InstrumentationTest, NativeGlobalTracingTouchesEveryMethod) {
  vm.jit_compile(inner);
  auto before = vm.registry().snapshot();
  auto report = vm.instrumentation().enable_method_tracing_native();
  EXPECT_EQ(report.methods_visited, 3u);
  EXPECT_EQ(report.entry_points_replaced, 3u);
  EXPECT_EQ(report.per_class.at("p.A"), 2u);
  for (auto* rec : vm.registry().records()) EXPECT_EQ(rec->entry_point(), EntryPoint::kInterpreterStub);
  EXPECT_EQ(vm.instrumentation().disable_method_tracing_native(), 3u);
  EXPECT_TRUE(diff(before, vm.registry().snapshot()).empty());
}

TEST_F(InstrumentationTest, ActivationHandlerSlotIsReplaceable) {
  auto& instr = vm.instrumentation();
  EXPECT_TRUE(instr.activation_handler_is_default());
  int calls = 0;
  instr.replace_activation_handler("Counting", [&] {
    ++calls;
    return InstallationReport{};
  });
  auto report = instr.native_trace_start(recorder("r"));
  EXPECT_EQ(calls, 1);
  EXPECT_EQ(report.entry_points_replaced, 0u);
  EXPECT_EQ(instr.activation_handler_name(), "Counting");
  for (auto* rec : vm.registry().records()) EXPECT_EQ(rec->entry_point(), EntryPoint::kInterpreterBridge);
  instr.restore_activation_handler();
  EXPECT_TRUE(instr.activation_handler_is_default());
}

TEST_F(InstrumentationTest, ListenerRegistrationErrors) {
  auto& instr = vm.instrumentation();
  instr.add_listener(recorder("a"));
  try {
    instr.add_listener(recorder("a"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDuplicateListener);
  }
  EXPECT_THROW(instr.add_listener(recorder("b", 0)), Error);
  EXPECT_THROW(instr.remove_listener("zzz"), Error);
  EXPECT_EQ(instr.listener_count(), 1u);
  instr.remove_listener("a");
  EXPECT_EQ(instr.listener_count(), 0u);
  EXPECT_FALSE(instr.has_method_entry_listeners());
}

TEST_F(InstrumentationTest, EventMaskFiltersKinds) {
  vm.instrumentation().add_listener(recorder("entries", kEnteredMask));
  auto thread = vm.new_thread();
  vm.invoke(thread, solo, {});
  ASSERT_EQ(seen.size(), 1u);
  EXPECT_EQ(seen[0].kind, MethodEvent::kEntered);
}

TEST_F(InstrumentationTest, ThrowingListenerIsRecordedNotPropagated) {
  vm.instrumentation().add_listener({"bad", kEnteredMask, [](const MethodEventInfo&) {
                                       throw std::runtime_error("boom");
                                     }});
  auto thread = vm.new_thread();
  EXPECT_EQ(vm.invoke(thread, solo, {}), 5);
  EXPECT_EQ(vm.instrumentation().fault_count(), 1u);
  auto faults = vm.instrumentation().faults();
  ASSERT_EQ(faults.size(), 1u);
  EXPECT_EQ(faults[0].listener_id, "bad");
  EXPECT_EQ(faults[0].message, "boom");
}

TEST_F(InstrumentationTest, AbruptExitIsReported) {
  Vm deep(VmOptions{8});
  deep.load_program("class R\n  method down(int)\n    loadarg 0\n    call R.down(int)\n    ret\n");
  int abrupt = 0;
  deep.instrumentation().add_listener({"x", kExitedMask, [&](const MethodEventInfo& info) {
                                         if (info.abrupt) ++abrupt;
                                         EXPECT_FALSE(info.result.has_value());
                                       }});
  auto thread = deep.new_thread();
  EXPECT_THROW(deep.invoke(thread, parse_method_ref("R.down(int)"), {1}), Error);
  EXPECT_EQ(abrupt, 8);
}

}  // namespace
}  // namespace xtrace
