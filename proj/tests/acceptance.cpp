// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "oracles.hpp"
#include "xtrace_cli.hpp"

namespace xtrace {
namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double time_limit_s;  // 0: none
  std::function<Outcome()> check;
};

std::string fmt_double(double v, int precision = 2) {
  std::ostringstream os;
  os.precision(precision);
  os << std::fixed << v;
  return os.str();
}

// 1. Bring-up touches the targets only; the native path touches everything.
Outcome surgical_injection() {
  auto wl = gen_workload(WorkloadSpec{100, 100, 5, 7, 0.3});
  auto full_vm = load_workload(wl);
  auto pristine = full_vm->registry().snapshot();
  EventSink sink;
  Engine full(*full_vm, sink);
  auto report = full.apply(make_target_set(*full_vm, wl.targets, TraceAction::kCaptureStack));
  auto full_diff = diff(pristine, full_vm->registry().snapshot()).size();
  full.rollback();
  bool full_restored = diff(pristine, full_vm->registry().snapshot()).empty();

  auto global_vm = load_workload(wl);
  auto global_pristine = global_vm->registry().snapshot();
  auto native = global_vm->instrumentation().enable_method_tracing_native();
  auto global_diff = diff(global_pristine, global_vm->registry().snapshot()).size();

  bool ok = wl.method_count() == 10'000 && report.entry_points_modified == 5 && full_diff == 5 &&
            native.entry_points_replaced == 10'000 && global_diff == 10'000 && full_restored;
  return {ok, "registry=" + std::to_string(wl.method_count()) + " full_modified=" + std::to_string(full_diff) +
                  " global_modified=" + std::to_string(global_diff) +
                  " restored=" + (full_restored ? "yes" : "no")};
}

// 2. Startup Global >= 10x Full; compiled traced method InterpreterStub >= 2x
// QuickStub per call.
Outcome ablation_ordering() {
  auto wl = gen_workload(WorkloadSpec{100, 100, 5, 7, 0.3});
  AblationOptions opts;
  opts.calls = 100'000;
  opts.warmup = 10'000;
  auto full = run_ablation(AblationMode::kFull, wl, opts);
  auto global = run_ablation(AblationMode::kGlobal, wl, opts);
  auto interp = run_ablation(AblationMode::kInterpreter, wl, opts);
  auto rep = compare_report({full, global, interp});
  double startup = *rep.ratio_of(AblationMode::kGlobal, "startup_time_ns");
  double stub = *rep.ratio_of(AblationMode::kInterpreter, "per_call_latency_traced_ns");
  bool entries_ok = full.traced_entry == EntryPoint::kQuickStub && interp.traced_entry == EntryPoint::kInterpreterStub;
  bool clean = full.wrong_results + global.wrong_results + interp.wrong_results == 0 && full.teardown_clean &&
               global.teardown_clean && interp.teardown_clean;
  bool ok = startup >= 10.0 && stub >= 2.0 && entries_ok && clean && full.samples >= 100'000;
  return {ok, "startup Global/Full=" + fmt_double(startup) + "x (need >=10), traced InterpreterStub/QuickStub=" +
                  fmt_double(stub) + "x (need >=2), calls=" + std::to_string(full.samples) + " full=" +
                  fmt_double(full.per_call_latency_traced_ns, 1) + "ns interp=" +
                  fmt_double(interp.per_call_latency_traced_ns, 1) + "ns"};
}

// 3. Traced and untraced runs of generated programs agree with the reference
// evaluator under every tier and stub combination.
Outcome semantic_neutrality() {
  constexpr int kPrograms = 1000;
  constexpr int kInputs = 3;
  std::mt19937_64 rng(20260501);
  std::uint64_t mismatches = 0, checks = 0;
  // (compiled?, installed entry) pairs seen on traced methods.
  std::set<std::pair<bool, EntryPoint>> combos;
  enum Tier { kAllInterpreted, kAllCompiled, kMixed };
  const AblationMode modes[] = {AblationMode::kBaseline, AblationMode::kFull, AblationMode::kInterpreter,
                                AblationMode::kGlobal};
  for (int p = 0; p < kPrograms; ++p) {
    auto prog = testing::make_program(p, rng());
    std::vector<std::vector<std::vector<std::int64_t>>> inputs(prog.fns.size());
    std::vector<std::vector<std::int64_t>> expected(prog.fns.size());
    for (std::size_t f = 0; f < prog.fns.size(); ++f) {
      for (int k = 0; k < kInputs; ++k) {
        std::vector<std::int64_t> args;
        for (int a = 0; a < prog.fns[f].arity; ++a) {
          args.push_back(k == 2 ? static_cast<std::int64_t>(rng()) : static_cast<std::int64_t>(rng() % 201) - 100);
        }
        expected[f].push_back(testing::eval_function(prog.fns, static_cast<int>(f), args));
        inputs[f].push_back(std::move(args));
      }
    }
    for (Tier tier : {kAllInterpreted, kAllCompiled, kMixed}) {
      for (auto mode : modes) {
        Vm vm;
        vm.load_program(prog.text);
        for (auto* rec : vm.registry().records()) {
          if (tier == kAllCompiled || (tier == kMixed && rng() % 2)) vm.jit_compile(*rec);
        }
        auto pristine = vm.registry().snapshot();
        EventSink sink(1 << 12);
        Engine engine(vm, sink, engine_options_for(mode));
        auto thread = vm.new_thread();
        auto run_all = [&] {
          for (std::size_t f = 0; f < prog.fns.size(); ++f) {
            auto ref = parse_method_ref(prog.method(static_cast<int>(f)));
            for (int k = 0; k < kInputs; ++k) {
              ++checks;
              if (vm.invoke(thread, ref, inputs[f][static_cast<std::size_t>(k)]) !=
                  expected[f][static_cast<std::size_t>(k)]) {
                ++mismatches;
              }
            }
          }
        };
        run_all();  // Idle
        if (mode != AblationMode::kBaseline) {
          TargetSet targets;
          std::vector<TraceAction> all = {TraceAction::kCaptureStack, TraceAction::kCaptureArgs,
                                          TraceAction::kTimeMethod};
          for (auto* rec : vm.registry().records()) {
            if (rng() % 2 == 0) continue;
            std::vector<TraceAction> actions;
            for (auto a : all) {
              if (rng() % 2) actions.push_back(a);
            }
            if (actions.empty()) actions.push_back(all[rng() % 3]);
            targets.add(*rec, actions);
          }
          engine.apply(std::move(targets));
          for (const auto* m : engine.current_targets()->members()) combos.insert({m->is_compiled(), m->entry_point()});
          run_all();  // Active
          sink.drain();
          engine.rollback();
          if (!diff(pristine, vm.registry().snapshot()).empty()) ++mismatches;
          run_all();  // Idle again
        }
        if (thread.depth() != 0) ++mismatches;
      }
    }
  }
  bool all_combos = combos.count({false, EntryPoint::kInterpreterStub}) && combos.count({true, EntryPoint::kQuickStub}) &&
                    combos.count({true, EntryPoint::kInterpreterStub});
  bool ok = mismatches == 0 && all_combos;
  return {ok, std::to_string(kPrograms) + " programs, " + std::to_string(checks) + " calls, " +
                  std::to_string(mismatches) + " mismatches, stub/tier combinations covered=" +
                  (all_combos ? "all" : "incomplete")};
}

// 4. The canned scenario captures the expected stack, interceptor first.
Outcome ghost_bug() {
  const std::vector<std::string> want = {
      "XTrace.intercept",
      "androidx.window.extensions.layout.WindowLayoutComponentImpl.addWindowLayoutInfoListener",
      "androidx.window.layout.WindowInfoTrackerImpl.windowLayoutInfo",
      "org.chromium.content.browser.device_posture.DevicePosturePlatformProviderAndroid.startListening",
      "com.android.webview.chromium.WebViewChromium.evaluateJavascript",
      "android.webkit.WebView.evaluateJavascript",
      "com.example.lynx.hybrid.webkit.WebKitView.sendEventByJson",
      "com.example.hybrid.spark.page.SparkFragment.onCreateView",
      "androidx.fragment.app.Fragment.performCreateView",
      "androidx.fragment.app.FragmentController.dispatchStart",
      "com.example.hybrid.spark.page.SparkActivity.onStart",
  };
  const char* argv[] = {"xtrace", "demo", "ghost-bug"};
  std::ostringstream out, err;
  int code = cli::cli_main(3, argv, out, err);
  std::string expected_text =
      "captured on androidx.window.extensions.layout.WindowLayoutComponentImpl.addWindowLayoutInfoListener:\n";
  for (const auto& f : want) expected_text += "at " + f + "\n";

  auto run = demo::run_ghost_bug();
  bool frames_ok = run.events.size() == 1;
  std::size_t n_frames = 0;
  if (frames_ok) {
    const auto& frames = std::get<StackPayload>(run.events[0].payload).frames;
    n_frames = frames.size();
    frames_ok = frames.size() == want.size() && frames[0].synthetic;
    for (std::size_t i = 0; frames_ok && i < want.size(); ++i) {
      frames_ok = frames[i].method_ref.short_name() == want[i] && frames[i].synthetic == (i == 0);
    }
  }
  bool ok = code == 0 && out.str() == expected_text && frames_ok;
  return {ok, "exit=" + std::to_string(code) + " events=" + std::to_string(run.events.size()) +
                  " frames=" + std::to_string(n_frames) + " sequence=" + (frames_ok ? "exact" : "MISMATCH") +
                  " cli_output=" + (out.str() == expected_text ? "exact" : "MISMATCH")};
}

// 5. An unhealthy canary is rolled back on every session, leaving no trace.
Outcome rollback_completeness() {
  ConfigManager mgr(RolloutPolicy{1000, {}});
  auto cfg = parse_config(demo::kGhostBugConfig);
  cfg.config_id = "ghost-bug-canary";
  cfg.rollout_fraction = 0.6;
  auto id = mgr.submit(cfg);
  mgr.approve(id);
  mgr.start_canary(id);
  SessionWorkload wl{std::string(demo::kGhostBugProgram), demo::ghost_bug_entry(), {}, demo::ghost_bug_precompiled()};
  Fleet fleet(mgr, id, wl, FleetOptions{2000, 2, 1, "device-"}, CrashInjector{0.03, 0.0});
  auto result = fleet_simulate(mgr, fleet, id);
  fleet.drain_all();
  auto drift = fleet.sessions_with_drift();
  auto events = fleet.run_calls(10'000);
  bool ok = result.status == ConfigStatus::kRolledBack && result.metrics.sessions >= 1000 && drift == 0 &&
            events == 0 && fleet.wrong_results() == 0 && fleet.active_engines() == 0 &&
            result.restored_sessions == result.metrics.sessions;
  return {ok, "sessions=2000 admitted=" + std::to_string(result.metrics.sessions) + " crash_rate=" +
                  fmt_double(result.metrics.crash_rate().value_or(0), 4) + " status=" +
                  std::string(to_string(result.status)) + " restored=" + std::to_string(result.restored_sessions) +
                  " drift=" + std::to_string(drift) + " events_after_10000_calls=" + std::to_string(events)};
}

// 6. Admission count at 0.1%, determinism, monotonicity in the fraction.
Outcome canary_gate() {
  constexpr int kDevices = 1'000'000;
  const std::string config_id = "canary-gate";
  std::vector<std::string> ids;
  ids.reserve(kDevices);
  for (int i = 0; i < kDevices; ++i) ids.push_back("device-" + std::to_string(i));
  std::vector<int> admitted;
  for (int i = 0; i < kDevices; ++i) {
    if (session_gate(ids[static_cast<std::size_t>(i)], config_id, 0.001)) admitted.push_back(i);
  }
  bool count_ok = admitted.size() >= 800 && admitted.size() <= 1200;
  bool deterministic = true;
  for (int i : admitted) deterministic &= session_gate(ids[static_cast<std::size_t>(i)], config_id, 0.001);
  std::size_t again = 0;
  for (int i = 0; i < kDevices; ++i) again += session_gate(ids[static_cast<std::size_t>(i)], config_id, 0.001);
  deterministic &= again == admitted.size();

  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  bool monotone = true;
  for (int trial = 0; trial < 200 && monotone; ++trial) {
    double a = unit(rng), b = unit(rng);
    if (a > b) std::swap(a, b);
    for (int k = 0; k < 2000; ++k) {
      const auto& id = ids[rng() % ids.size()];
      if (session_gate(id, config_id, a) && !session_gate(id, config_id, b)) {
        monotone = false;
        break;
      }
    }
  }
  bool ok = count_ok && deterministic && monotone;
  return {ok, "admitted " + std::to_string(admitted.size()) + " of 1000000 at 0.001 (allowed 800..1200), deterministic=" +
                  (deterministic ? "yes" : "no") + " monotone=" + (monotone ? "yes" : "no")};
}

// 7. No email or long digit run survives into drained events; redaction is a
// fixed point.
Outcome redaction() {
  testing::PiiStringGen gen(7);
  std::uint64_t leaks = 0, not_idempotent = 0, strings = 0;
  for (int i = 0; i < 50'000; ++i) {
    auto s = gen.next();
    auto r = redact_text(s);
    ++strings;
    if (contains_pii(r)) ++leaks;
    if (redact_text(r) != r) ++not_idempotent;
  }

  Vm vm;
  vm.load_program("class app.Form\n  method submit(java.lang.String,int,java.lang.String)\n    loadarg 1\n    ret\n");
  auto ref = parse_method_ref("app.Form.submit(java.lang.String,int,java.lang.String)");
  EventSink sink(1 << 16);
  Engine engine(vm, sink);
  TargetSet set;
  set.add(vm.registry().get(ref), {TraceAction::kCaptureArgs});
  engine.apply(std::move(set));
  auto thread = vm.new_thread();
  std::uint64_t pii_inputs = 0;
  for (int i = 0; i < 5'000; ++i) {
    auto a = gen.next(), b = gen.next();
    pii_inputs += contains_pii(a) || contains_pii(b);
    std::int64_t args[] = {vm.strings().intern(a), 123456789012, vm.strings().intern(b)};
    vm.invoke(thread, ref, args);
  }
  auto drained = sink.drain();
  std::uint64_t event_leaks = 0, event_strings = 0;
  for (const auto& ev : drained.events) {
    for (const auto& v : std::get<ArgsPayload>(ev.payload).args) {
      if (const auto* s = std::get_if<std::string>(&v)) {
        ++event_strings;
        if (contains_pii(*s)) ++event_leaks;
        if (redact_text(*s) != *s) ++not_idempotent;
      }
    }
  }
  bool ok = leaks == 0 && event_leaks == 0 && not_idempotent == 0 && drained.events.size() == 5'000 &&
            drained.drop_count == 0 && pii_inputs > 0;
  return {ok, std::to_string(strings) + " generated strings, " + std::to_string(event_strings) +
                  " drained string args (" + std::to_string(pii_inputs) + " calls carried PII), leaks=" +
                  std::to_string(leaks + event_leaks) + " non-idempotent=" + std::to_string(not_idempotent)};
}

// 8. Random operation sequences against a reference phase model, then an
// 8-thread call storm during repeated bring-up.
struct EngineObservation {
  RegistrySnapshot registry;
  std::string status;
  std::size_t listeners;
  std::string handler;
  std::size_t targets;
  friend bool operator==(const EngineObservation&, const EngineObservation&) = default;
};

Outcome phase_machine_and_concurrency() {
  constexpr std::string_view kProgram =
      "class s.A\n"
      "  method f(int)\n    loadarg 0\n    call s.A.g(int)\n    ret\n"
      "  method g(int)\n    loadarg 0\n    pushconst 2\n    mul\n    ret\n"
      "  method h(int)\n    loadarg 0\n    pushconst 1\n    add\n    ret\n"
      "class s.B\n"
      "  method k(int)\n    loadarg 0\n    call s.A.h(int)\n    ret\n";
  std::mt19937_64 rng(8);
  std::uint64_t ops = 0, rejected = 0, model_disagreements = 0, partial_mutations = 0;
  enum Op { kSuppress, kSetEntry, kInstall, kActivate, kDeactivate, kApply, kOpCount };
  for (int seq = 0; seq < 2000; ++seq) {
    Vm vm;
    vm.load_program(kProgram);
    auto records = vm.registry().records();
    for (auto* rec : records) {
      if (rng() % 2) vm.jit_compile(*rec);
    }
    EventSink sink;
    Engine engine(vm, sink);
    auto observe = [&] {
      auto t = engine.current_targets();
      return EngineObservation{vm.registry().snapshot(), engine.status().dump(), vm.instrumentation().listener_count(),
                               vm.instrumentation().activation_handler_name(), t ? t->size() : 0};
    };
    // Reference model.
    EnginePhase phase = EnginePhase::kIdle;
    bool installed = false;
    std::set<const MethodRecord*> injected;
    auto random_targets = [&](std::set<const MethodRecord*>& members) {
      TargetSet t;
      for (auto* rec : records) {
        if (rng() % 2) {
          t.add(*rec, {TraceAction::kCaptureStack});
          members.insert(rec);
        }
      }
      return t;
    };
    for (int step = 0; step < 12; ++step) {
      auto op = static_cast<Op>(rng() % kOpCount);
      bool legal = false;
      std::function<void()> run;
      std::function<void()> commit;
      switch (op) {
        case kSuppress:
          legal = phase == EnginePhase::kIdle;
          run = [&] { engine.suppress_global_tracing(); };
          commit = [&] { phase = EnginePhase::kSuppressed; };
          break;
        case kSetEntry: {
          auto* rec = records[rng() % records.size()];
          const EntryPoint eps[] = {EntryPoint::kInterpreterStub, EntryPoint::kQuickStub, EntryPoint::kCompiledDirect,
                                    EntryPoint::kInterpreterBridge};
          auto ep = eps[rng() % 4];
          legal = (phase == EnginePhase::kSuppressed || phase == EnginePhase::kInjected) &&
                  is_instrumentation_stub(ep) && (ep != EntryPoint::kQuickStub || rec->is_compiled());
          run = [&, rec, ep] { engine.set_entry_point(*rec, ep); };
          commit = [&, rec] {
            phase = EnginePhase::kInjected;
            injected.insert(rec);
          };
          break;
        }
        case kInstall: {
          auto members = std::make_shared<std::set<const MethodRecord*>>();
          auto t = std::make_shared<TargetSet>(random_targets(*members));
          bool covers = std::includes(members->begin(), members->end(), injected.begin(), injected.end());
          legal = phase == EnginePhase::kInjected && !installed && covers;
          run = [&, t] { engine.install_dispatcher(*t); };
          commit = [&] { installed = true; };
          break;
        }
        case kActivate:
          legal = phase == EnginePhase::kInjected && installed;
          run = [&] { engine.activate_event_engine(); };
          commit = [&] { phase = EnginePhase::kActive; };
          break;
        case kDeactivate:
          legal = true;
          run = [&] { engine.deactivate_and_restore(); };
          commit = [&] {
            phase = EnginePhase::kIdle;
            installed = false;
            injected.clear();
          };
          break;
        case kApply: {
          auto members = std::make_shared<std::set<const MethodRecord*>>();
          auto t = std::make_shared<TargetSet>(random_targets(*members));
          legal = phase == EnginePhase::kIdle;
          run = [&, t] { engine.apply(*t); };
          commit = [&, members] {
            phase = EnginePhase::kActive;
            installed = true;
            injected = *members;
          };
          break;
        }
        case kOpCount: break;
      }
      ++ops;
      auto before = observe();
      bool threw = false;
      try {
        run();
      } catch (const Error&) {
        threw = true;
      }
      if (threw) {
        ++rejected;
        if (!(observe() == before)) ++partial_mutations;
      } else {
        commit();
      }
      if (threw == legal) ++model_disagreements;
      if (engine.phase() != phase) ++model_disagreements;
    }
    engine.deactivate_and_restore();
  }

  auto wl = gen_workload(WorkloadSpec{20, 50, 5, 7, 0.3});
  auto stress = run_concurrency_stress(wl, 8, 200);
  bool ok = model_disagreements == 0 && partial_mutations == 0 && rejected > 0 && stress.wrong_results == 0 &&
            stress.torn_entries == 0 && stress.errors == 0 && stress.teardown_clean;
  return {ok, std::to_string(ops) + " ops (" + std::to_string(rejected) + " rejected), partial mutations=" +
                  std::to_string(partial_mutations) + " model disagreements=" + std::to_string(model_disagreements) +
                  "; stress 8 threads " + std::to_string(stress.calls) + " calls over " +
                  std::to_string(stress.cycles) + " bring-up cycles: wrong=" + std::to_string(stress.wrong_results) +
                  " torn=" + std::to_string(stress.torn_entries) + " errors=" + std::to_string(stress.errors)};
}

}  // namespace
}  // namespace xtrace

int main() {
  using namespace xtrace;
  spdlog::set_level(spdlog::level::err);
  const std::vector<Criterion> criteria = {
      {1, "surgical-injection-exactness", 5, surgical_injection},
      {2, "ablation-ordering", 60, ablation_ordering},
      {3, "semantic-neutrality", 0, semantic_neutrality},
      {4, "ghost-bug-end-to-end", 1, ghost_bug},
      {5, "rollback-completeness", 30, rollback_completeness},
      {6, "canary-gate-statistics", 0, canary_gate},
      {7, "redaction-soundness-idempotence", 0, redaction},
      {8, "phase-machine-and-concurrency", 0, phase_machine_and_concurrency},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    bool in_time = c.time_limit_s == 0 || secs < c.time_limit_s;
    bool pass = o.pass && in_time;
    failed += !pass;
    std::string limit = c.time_limit_s > 0 ? " limit " + fmt_double(c.time_limit_s, 0) + "s" : "";
    std::printf("[%s] criterion %d %s: %s (%.2fs%s%s)\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs,
                limit.c_str(), in_time ? "" : ", TOO SLOW");
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
