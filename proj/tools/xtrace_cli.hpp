// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "xtrace/xtrace.hpp"

namespace xtrace::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kBadArgument, "cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kBadArgument, "cannot write " + path);
  out << text;
}

/// The named method, or the first method of the first class.
inline MethodRef pick_entry(const Program& program, const std::string& entry) {
  if (!entry.empty()) return parse_method_ref(entry);
  for (const auto& cls : program.classes) {
    if (!cls.methods.empty()) return cls.methods.front().ref;
  }
  throw UsageError("program declares no methods");
}

inline void check_args(const MethodRef& entry, const std::vector<std::int64_t>& args) {
  if (args.size() != entry.arity()) {
    throw UsageError(entry.to_string() + " takes " + std::to_string(entry.arity()) + " arguments, got " +
                     std::to_string(args.size()));
  }
}

struct RunArgs {
  std::string program;
  std::string entry;
  std::vector<std::int64_t> args;
  std::vector<std::string> jit;
  bool jit_all = false;
};

inline void apply_jit(Vm& vm, const RunArgs& a) {
  if (a.jit_all) {
    for (auto* rec : vm.registry().records()) vm.jit_compile(*rec);
  }
  for (const auto& m : a.jit) vm.jit_compile(parse_method_ref(m));
}

inline int cmd_run(const RunArgs& a, std::ostream& out) {
  auto source = read_file(a.program);
  auto program = parse_program(source);
  auto entry = pick_entry(program, a.entry);
  check_args(entry, a.args);
  Vm vm;
  vm.load(program);
  apply_jit(vm, a);
  auto thread = vm.new_thread();
  out << vm.invoke(thread, entry, a.args) << '\n';
  return kExitOk;
}

struct TraceArgs {
  RunArgs run;
  std::string config;
  std::string drain;
  std::size_t calls = 1;
};

inline int cmd_trace(const TraceArgs& a, std::ostream& out, std::ostream& err) {
  auto program = parse_program(read_file(a.run.program));
  auto cfg = parse_config(read_file(a.config));
  auto entry = pick_entry(program, a.run.entry);
  check_args(entry, a.run.args);
  Vm vm;
  vm.load(program);
  apply_jit(vm, a.run);
  EventSink sink;
  Engine engine(vm, sink);
  auto resolution = resolve_targets(cfg, vm.registry());
  for (const auto& w : resolution.warnings) err << "warning: " << w << '\n';
  engine.apply(std::move(resolution.targets));
  auto thread = vm.new_thread();
  std::int64_t result = 0;
  for (std::size_t i = 0; i < a.calls; ++i) result = vm.invoke(thread, entry, a.run.args);
  engine.deactivate_and_restore();
  auto drained = sink.drain();
  auto ndjson = to_ndjson(drained.events);
  if (a.drain.empty()) {
    out << ndjson;
  } else {
    write_file(a.drain, ndjson);
  }
  err << "result " << result << ", " << drained.events.size() << " events, " << drained.drop_count
      << " dropped\n";
  return kExitOk;
}

struct AblateArgs {
  WorkloadSpec spec;
  std::size_t calls = 100'000;
  std::size_t warmup = 10'000;
  std::vector<std::string> modes{"baseline", "full", "global", "interpreter"};
  std::string format = "text";
  std::size_t threads = 0;
};

inline int cmd_ablate(const AblateArgs& a, std::ostream& out, std::ostream& err) {
  std::vector<AblationMode> modes;
  for (const auto& m : a.modes) {
    try {
      modes.push_back(parse_ablation_mode(m));
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }
  if (modes.size() < 2) throw UsageError("--mode needs at least two modes to compare");
  auto wl = gen_workload(a.spec);
  AblationOptions opts;
  opts.calls = a.calls;
  opts.warmup = a.warmup;
  std::vector<AblationMetrics> rows;
  for (auto m : modes) rows.push_back(run_ablation(m, wl, opts));
  auto report = compare_report(rows);
  if (a.format == "json") {
    out << report.to_json().dump(2) << '\n';
  } else if (a.format == "csv") {
    out << report.to_csv();
  } else {
    out << report.to_text();
  }
  if (a.threads > 0) {
    auto stress = run_concurrency_stress(wl, a.threads, 200);
    err << "concurrency: " << a.threads << " threads, " << stress.calls << " calls, " << stress.wrong_results
        << " wrong results, " << stress.torn_entries << " torn entries, " << stress.cycles << " bring-up cycles\n";
    if (stress.wrong_results != 0 || stress.torn_entries != 0) return kExitRuntime;
  }
  return kExitOk;
}

struct FleetArgs {
  std::string config;
  std::size_t sessions = 2000;
  double crash_rate = 0.0;
  double anr_rate = 0.0;
  std::size_t min_sample = 1000;
  std::size_t after_calls = 10'000;
  std::string program;
  std::string entry;
  std::vector<std::int64_t> args;
};

inline int cmd_fleet(const FleetArgs& a, std::ostream& out) {
  auto cfg = parse_config(read_file(a.config));
  SessionWorkload wl;
  if (a.program.empty()) {
    wl.program = std::string(demo::kGhostBugProgram);
    wl.entry = demo::ghost_bug_entry();
    wl.hot = demo::ghost_bug_precompiled();
  } else {
    wl.program = read_file(a.program);
    wl.entry = pick_entry(parse_program(wl.program), a.entry);
    wl.args = a.args;
    check_args(wl.entry, wl.args);
  }
  RolloutPolicy policy;
  policy.min_sample = a.min_sample;
  ConfigManager manager(policy);
  auto id = manager.submit(cfg);
  if (!cfg.approved) throw Error(ErrorCode::kInvalidTransition, "config " + id + " is not approved");
  manager.approve(id);
  manager.start_canary(id);
  FleetOptions opts;
  opts.n_sessions = a.sessions;
  Fleet fleet(manager, id, wl, opts, CrashInjector{a.crash_rate, a.anr_rate});
  auto result = fleet_simulate(manager, fleet, id);
  nlohmann::json report = result.report;
  report["restored_sessions"] = result.restored_sessions;
  if (result.status == ConfigStatus::kRolledBack) {
    report["post_rollback"] = {{"calls", a.after_calls},
                               {"trace_events", fleet.run_calls(a.after_calls)},
                               {"sessions_with_drift", fleet.sessions_with_drift()}};
  }
  report["history"] = nlohmann::json::array();
  for (const auto& h : manager.history()) {
    report["history"].push_back({{"revision", h.revision}, {"status", to_string(h.status)}, {"note", h.note}});
  }
  out << report.dump(2) << '\n';
  return kExitOk;
}

inline int cmd_demo(const std::string& name, std::ostream& out) {
  if (name != "ghost-bug") throw UsageError("unknown demo '" + name + "' (available: ghost-bug)");
  auto run = demo::run_ghost_bug();
  for (const auto& ev : run.events) {
    if (const auto* stack = std::get_if<StackPayload>(&ev.payload)) {
      out << "captured on " << ev.method_ref.short_name() << ":\n" << demo::format_stack(stack->frames);
    }
  }
  return kExitOk;
}

/// Returns 0 on success, 1 on runtime errors, 2 on usage errors.
inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Selective method tracing on a small managed runtime", "xtrace"};
  app.require_subcommand(1);
  std::string log_level = "warn";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Run a program");
  run_cmd->add_option("program", run.program, "Program file")->required();
  run_cmd->add_option("--entry", run.entry, "Entry method as cls.m(sig); defaults to the first method");
  run_cmd->add_option("--args", run.args, "Integer arguments");
  run_cmd->add_option("--jit", run.jit, "Methods to compile first");
  run_cmd->add_flag("--jit-all", run.jit_all, "Compile every method first");

  TraceArgs trace;
  auto* trace_cmd = app.add_subcommand("trace", "Run a program under a trace config and emit NDJSON events");
  trace_cmd->add_option("program", trace.run.program, "Program file")->required();
  trace_cmd->add_option("--config", trace.config, "Trace config file")->required();
  trace_cmd->add_option("--drain", trace.drain, "Write events here instead of stdout");
  trace_cmd->add_option("--entry", trace.run.entry, "Entry method as cls.m(sig)");
  trace_cmd->add_option("--args", trace.run.args, "Integer arguments");
  trace_cmd->add_option("--calls", trace.calls, "How many times to invoke the entry")->check(CLI::PositiveNumber);
  trace_cmd->add_option("--jit", trace.run.jit, "Methods to compile first");
  trace_cmd->add_flag("--jit-all", trace.run.jit_all, "Compile every method first");

  AblateArgs ablate;
  auto* ablate_cmd = app.add_subcommand("ablate", "Compare tracing modes on a generated workload");
  ablate_cmd->add_option("--classes", ablate.spec.n_classes, "Classes")->check(CLI::PositiveNumber);
  ablate_cmd->add_option("--methods", ablate.spec.methods_per_class, "Methods per class")->check(CLI::PositiveNumber);
  ablate_cmd->add_option("--targets", ablate.spec.target_count, "Traced methods")->check(CLI::PositiveNumber);
  ablate_cmd->add_option("--calls", ablate.calls, "Measured calls per method")->check(CLI::PositiveNumber);
  ablate_cmd->add_option("--warmup", ablate.warmup, "Discarded warm-up calls");
  ablate_cmd->add_option("--seed", ablate.spec.seed, "Workload seed");
  ablate_cmd->add_option("--mode", ablate.modes, "Comma-separated: baseline, full, global, interpreter")
      ->delimiter(',');
  ablate_cmd->add_option("--format", ablate.format, "text, json or csv")
      ->check(CLI::IsMember({"text", "json", "csv"}));
  ablate_cmd->add_option("--threads", ablate.threads, "Also run a concurrency check with this many threads");

  FleetArgs fleet;
  auto* fleet_cmd = app.add_subcommand("fleet", "Canary a config over simulated sessions");
  fleet_cmd->add_option("--config", fleet.config, "Trace config file")->required();
  fleet_cmd->add_option("--sessions", fleet.sessions, "Sessions")->check(CLI::PositiveNumber);
  fleet_cmd->add_option("--crash-rate", fleet.crash_rate, "Injected crash rate")->check(CLI::Range(0.0, 1.0));
  fleet_cmd->add_option("--anr-rate", fleet.anr_rate, "Injected ANR rate")->check(CLI::Range(0.0, 1.0));
  fleet_cmd->add_option("--min-sample", fleet.min_sample, "Sessions needed before promotion");
  fleet_cmd->add_option("--after-calls", fleet.after_calls, "Calls replayed after a rollback");
  fleet_cmd->add_option("--program", fleet.program, "Session program (default: the ghost-bug page)");
  fleet_cmd->add_option("--entry", fleet.entry, "Entry method as cls.m(sig)");
  fleet_cmd->add_option("--args", fleet.args, "Integer arguments");

  std::string demo_name;
  auto* demo_cmd = app.add_subcommand("demo", "Run a canned scenario");
  demo_cmd->add_option("name", demo_name, "Scenario name (ghost-bug)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "xtrace: " << e.what() << '\n' << "run 'xtrace --help' for usage\n";
    return kExitUsage;
  }

  auto level = spdlog::level::from_str(log_level);
  spdlog::set_level(level);

  try {
    if (*run_cmd) return cmd_run(run, out);
    if (*trace_cmd) return cmd_trace(trace, out, err);
    if (*ablate_cmd) return cmd_ablate(ablate, out, err);
    if (*fleet_cmd) return cmd_fleet(fleet, out);
    if (*demo_cmd) return cmd_demo(demo_name, out);
  } catch (const UsageError& e) {
    err << "xtrace: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "xtrace: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace xtrace::cli
