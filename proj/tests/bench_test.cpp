// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "xtrace/xtrace.hpp"

namespace xtrace {
namespace {

GeneratedWorkload small() { return gen_workload(WorkloadSpec{12, 16, 4, 11, 0.3}); }

AblationOptions quick() {
  AblationOptions o;
  o.calls = 2000;
  o.warmup = 200;
  o.startup_repetitions = 3;
  return o;
}

TEST(Workload, ShapeAndCounts) {
  auto wl = small();
  EXPECT_EQ(wl.method_count(), 12u * 16u);
  Vm vm;
  EXPECT_EQ(vm.load_program(wl.program), wl.method_count());
  EXPECT_EQ(wl.targets.size(), 4u);
  EXPECT_EQ(std::set<MethodRef>(wl.targets.begin(), wl.targets.end()).size(), 4u);
  EXPECT_EQ(wl.traced_compiled, wl.targets[0]);
  ASSERT_TRUE(wl.traced_interpreted);
  EXPECT_EQ(*wl.traced_interpreted, wl.targets[1]);
  std::set<MethodRef> hot(wl.hot.begin(), wl.hot.end());
  EXPECT_TRUE(hot.count(wl.traced_compiled));
  EXPECT_FALSE(hot.count(*wl.traced_interpreted));
  EXPECT_TRUE(hot.count(wl.untraced_compiled));
  EXPECT_EQ(std::count(wl.targets.begin(), wl.targets.end(), wl.untraced_compiled), 0);
}

TEST(Workload, DeterministicPerSeed) {
  auto a = small();
  auto b = small();
  EXPECT_EQ(a.program, b.program);
  EXPECT_EQ(a.targets, b.targets);
  EXPECT_EQ(a.fingerprint, b.fingerprint);
  auto c = gen_workload(WorkloadSpec{12, 16, 4, 12, 0.3});
  EXPECT_NE(a.fingerprint, c.fingerprint);
}

TEST(Workload, TiersAgreeOnEveryMethod) {
  auto wl = small();
  Vm interp, compiled;
  interp.load_program(wl.program);
  compiled.load_program(wl.program);
  for (auto* rec : compiled.registry().records()) compiled.jit_compile(*rec);
  auto t1 = interp.new_thread();
  auto t2 = compiled.new_thread();
  for (auto* rec : interp.registry().records()) {
    ASSERT_EQ(interp.dispatch(t1, *rec, wl.sample_args),
              compiled.invoke(t2, rec->ref(), std::span<const std::int64_t>(wl.sample_args)))
        << rec->ref().to_string();
  }
}

TEST(Workload, RejectsBadSpecs) {
  EXPECT_THROW(gen_workload(WorkloadSpec{0, 10, 1, 1, 0.3}), Error);
  EXPECT_THROW(gen_workload(WorkloadSpec{2, 2, 10, 1, 0.3}), Error);
  EXPECT_THROW(gen_workload(WorkloadSpec{4, 8, 1, 1, 1.5}), Error);
}

TEST(Ablation, ModesModifyTheExpectedEntryPoints) {
  auto wl = small();
  auto base = run_ablation(AblationMode::kBaseline, wl, quick());
  auto full = run_ablation(AblationMode::kFull, wl, quick());
  auto global = run_ablation(AblationMode::kGlobal, wl, quick());
  auto interp = run_ablation(AblationMode::kInterpreter, wl, quick());
  EXPECT_EQ(base.startup_entry_points_modified, 0u);
  EXPECT_EQ(full.startup_entry_points_modified, 4u);
  EXPECT_EQ(interp.startup_entry_points_modified, 4u);
  EXPECT_EQ(global.startup_entry_points_modified, wl.method_count());
  EXPECT_EQ(full.traced_entry, EntryPoint::kQuickStub);
  EXPECT_EQ(interp.traced_entry, EntryPoint::kInterpreterStub);
  EXPECT_EQ(base.traced_entry, EntryPoint::kCompiledDirect);
  EXPECT_EQ(global.untraced_entry, EntryPoint::kInterpreterStub);
  EXPECT_EQ(full.untraced_entry, EntryPoint::kCompiledDirect);
  for (const auto& m : {base, full, global, interp}) {
    EXPECT_TRUE(m.teardown_clean) << to_string(m.mode);
    EXPECT_EQ(m.wrong_results, 0u) << to_string(m.mode);
    EXPECT_EQ(m.samples, 2000u);
    EXPECT_EQ(m.workload_fingerprint, wl.fingerprint);
  }
  EXPECT_EQ(base.trace_events, 0u);
  EXPECT_EQ(full.trace_events, 2200u);
}

TEST(Report, RatiosAgainstFull) {
  AblationMetrics full, global;
  full.mode = AblationMode::kFull;
  full.startup_entry_points_modified = 5;
  full.startup_time_ns = 100;
  global.mode = AblationMode::kGlobal;
  global.startup_entry_points_modified = 10000;
  global.startup_time_ns = 5000;
  auto rep = compare_report({global, full});
  EXPECT_EQ(rep.reference, 1u);
  EXPECT_DOUBLE_EQ(*rep.ratio_of(AblationMode::kGlobal, "startup_time_ns"), 50.0);
  EXPECT_DOUBLE_EQ(*rep.ratio_of(AblationMode::kGlobal, "startup_entry_points_modified"), 2000.0);
  EXPECT_FALSE(rep.ratio_of(AblationMode::kGlobal, "per_call_latency_traced_ns"));
  EXPECT_FALSE(rep.ratio_of(AblationMode::kBaseline, "startup_time_ns"));
  auto j = rep.to_json();
  EXPECT_EQ(j["reference"], "XTrace-Full");
  EXPECT_EQ(j["rows"].size(), 2u);
  auto csv = rep.to_csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_NE(rep.to_text().find("XTrace-Global"), std::string::npos);
}

TEST(Report, RejectsBadInput) {
  AblationMetrics a, b;
  EXPECT_THROW(compare_report({a}), Error);
  b.workload_fingerprint = 1;
  EXPECT_THROW(compare_report({a, b}), Error);
}

TEST(Report, ModeNames) {
  EXPECT_EQ(parse_ablation_mode("FULL"), AblationMode::kFull);
  EXPECT_EQ(parse_ablation_mode("interpreter"), AblationMode::kInterpreter);
  EXPECT_THROW(parse_ablation_mode("fast"), Error);
}

TEST(Stress, ConcurrentCallsDuringBringUp) {
  auto wl = small();
  auto r = run_concurrency_stress(wl, 4, 20, 200);
  EXPECT_EQ(r.wrong_results, 0u);
  EXPECT_EQ(r.torn_entries, 0u);
  EXPECT_EQ(r.errors, 0u);
  EXPECT_EQ(r.cycles, 20u);
  EXPECT_GE(r.calls, 800u);
  EXPECT_TRUE(r.teardown_clean);
}

}  // namespace
}  // namespace xtrace
