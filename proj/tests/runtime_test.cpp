// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "xtrace/xtrace.hpp"

namespace xtrace {
namespace {

using testing::fib_oracle;
using testing::make_program;

TEST(MethodRef, ParseAndFormatRoundTrip) {
  auto ref = parse_method_ref(" a.b.C.m( int , java.lang.String ) ");
  EXPECT_EQ(ref.class_name, "a.b.C");
  EXPECT_EQ(ref.method_name, "m");
  EXPECT_EQ(ref.params, (Signature{"int", "java.lang.String"}));
  EXPECT_EQ(ref.to_string(), "a.b.C.m(int,java.lang.String)");
  EXPECT_EQ(parse_method_ref(ref.to_string()), ref);
  EXPECT_EQ(ref.short_name(), "a.b.C.m");
}

TEST(MethodRef, RejectsMalformed) {
  EXPECT_THROW(parse_method_ref("noparens"), Error);
  EXPECT_THROW(parse_method_ref("m()"), Error);
  EXPECT_THROW(parse_method_ref("a..b.m()"), Error);
  EXPECT_THROW(parse_method_ref("a.b.1m()"), Error);
}

TEST(MethodRef, SignatureIgnoresWhitespace) {
  EXPECT_EQ(parse_signature(" int , int "), (Signature{"int", "int"}));
  EXPECT_TRUE(parse_signature("").empty());
}

TEST(MethodRef, ElidedMatching) {
  EXPECT_TRUE(matches_elided("androidx.window...WindowLayoutComponentImpl",
                             "androidx.window.extensions.layout.WindowLayoutComponentImpl"));
  EXPECT_FALSE(matches_elided("androidx.window...WindowLayoutComponentImpl", "androidx.WindowLayoutComponentImpl"));
  EXPECT_FALSE(matches_elided("androidx.window...Impl", "androidx.windowing.x.Impl"));
  EXPECT_TRUE(matches_elided("a.b.C", "a.b.C"));
  EXPECT_FALSE(matches_elided("a.b.C", "a.b.D"));
}

TEST(Bytecode, VerifierRejectsBadPrograms) {
  // Underflow.
  EXPECT_THROW(parse_program("class A\n  method m()\n    add\n    ret\n"), Error);
  // Jump out of range.
  EXPECT_THROW(parse_program("class A\n  method m()\n    jmp +5\n    pushconst 1\n    ret\n"), Error);
  // Falls off the end.
  EXPECT_THROW(parse_program("class A\n  method m()\n    pushconst 1\n"), Error);
  // Argument out of range.
  EXPECT_THROW(parse_program("class A\n  method m(int)\n    loadarg 1\n    ret\n"), Error);
  // Unknown opcode.
  EXPECT_THROW(parse_program("class A\n  method m()\n    frob\n    ret\n"), Error);
}

TEST(Bytecode, FormatParsesBack) {
  auto p = make_program(0, 42);
  auto program = parse_program(p.text);
  auto again = parse_program(format_program(program));
  EXPECT_EQ(format_program(again), format_program(program));
  EXPECT_EQ(program.method_count(), p.fns.size());
}

TEST(Vm, FibMatchesOracleInBothTiers) {
  Vm vm;
  vm.load_program(testing::fib_program());
  auto ref = parse_method_ref("t.Fib.fib(int)");
  auto thread = vm.new_thread();
  for (int n = 0; n <= 20; ++n) EXPECT_EQ(vm.invoke(thread, ref, {n}), fib_oracle(n)) << n;
  vm.jit_compile(ref);
  EXPECT_EQ(vm.registry().get(ref).entry_point(), EntryPoint::kCompiledDirect);
  for (int n = 0; n <= 20; ++n) EXPECT_EQ(vm.invoke(thread, ref, {n}), fib_oracle(n)) << n;
  EXPECT_EQ(thread.depth(), 0u);
}

TEST(Vm, RandomProgramsAgreeWithReferenceEvaluator) {
  std::mt19937_64 rng(99);
  for (int i = 0; i < 200; ++i) {
    auto p = make_program(i, rng());
    Vm interp, compiled;
    interp.load_program(p.text);
    compiled.load_program(p.text);
    for (auto* rec : compiled.registry().records()) compiled.jit_compile(*rec);
    auto t1 = interp.new_thread();
    auto t2 = compiled.new_thread();
    for (int f = 0; f < static_cast<int>(p.fns.size()); ++f) {
      std::vector<std::int64_t> args;
      for (int a = 0; a < p.fns[static_cast<std::size_t>(f)].arity; ++a) {
        args.push_back(static_cast<std::int64_t>(rng() % 2001) - 1000);
      }
      auto want = testing::eval_function(p.fns, f, args);
      auto ref = parse_method_ref(p.method(f));
      ASSERT_EQ(interp.invoke(t1, ref, args), want) << p.text;
      ASSERT_EQ(compiled.invoke(t2, ref, args), want) << p.text;
    }
  }
}

TEST(Vm, ArityAndMissingMethodErrors) {
  Vm vm;
  vm.load_program(testing::fib_program());
  auto thread = vm.new_thread();
  try {
    vm.invoke(thread, parse_method_ref("t.Fib.fib(int)"), {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kArityMismatch);
  }
  try {
    vm.invoke(thread, parse_method_ref("t.Fib.nope()"), {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMethodNotFound);
  }
}

TEST(Vm, StackOverflowUnwindsCleanly) {
  Vm vm(VmOptions{64});
  vm.load_program("class R\n  method down(int)\n    loadarg 0\n    call R.down(int)\n    ret\n");
  auto ref = parse_method_ref("R.down(int)");
  auto thread = vm.new_thread();
  try {
    vm.invoke(thread, ref, {1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kStackOverflow);
  }
  EXPECT_EQ(thread.depth(), 0u);
  vm.jit_compile(ref);
  EXPECT_THROW(vm.invoke(thread, ref, {1}), Error);
  EXPECT_EQ(thread.depth(), 0u);
}

TEST(Vm, CallsToUnloadedClassesBindLate) {
  Vm vm;
  vm.load_program("class A\n  method f()\n    call B.g()\n    ret\n");
  auto f = parse_method_ref("A.f()");
  auto thread = vm.new_thread();
  EXPECT_THROW(vm.invoke(thread, f, {}), Error);
  vm.load_program("class B\n  method g()\n    pushconst 7\n    ret\n");
  EXPECT_EQ(vm.invoke(thread, f, {}), 7);
  vm.jit_compile(f);
  EXPECT_EQ(vm.invoke(thread, f, {}), 7);
}

TEST(Vm, StringConstantsAreInternedHandles) {
  Vm vm;
  vm.load_program(
      "class S\n"
      "  method id(java.lang.String)\n    loadarg 0\n    ret\n"
      "  method a()\n    pushconst \"hello\"\n    ret\n"
      "  method b()\n    pushconst \"hello\"\n    ret\n");
  auto thread = vm.new_thread();
  auto ha = vm.invoke(thread, parse_method_ref("S.a()"), {});
  auto hb = vm.invoke(thread, parse_method_ref("S.b()"), {});
  EXPECT_EQ(ha, hb);
  EXPECT_EQ(vm.strings().lookup(ha), "hello");
  EXPECT_EQ(vm.decode("java.lang.String", ha), ArgValue(std::string("hello")));
  EXPECT_EQ(vm.decode("int", ha), ArgValue(ha));
}

TEST(Vm, LoadRejectsDuplicates) {
  Vm vm;
  vm.load_program(testing::fib_program());
  auto before = vm.registry().size();
  EXPECT_THROW(vm.load_program(testing::fib_program()), Error);
  EXPECT_EQ(vm.registry().size(), before);
}

TEST(Registry, SnapshotDiffNamesChangedMethods) {
  Vm vm;
  vm.load_program(testing::fib_program());
  auto before = vm.registry().snapshot();
  vm.jit_compile(parse_method_ref("t.Fib.fib(int)"));
  auto changed = diff(before, vm.registry().snapshot());
  ASSERT_EQ(changed.size(), 1u);
  EXPECT_EQ(changed[0], "t.Fib.fib(int)");
}

}  // namespace
}  // namespace xtrace
