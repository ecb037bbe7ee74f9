// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "xtrace/config.hpp"
#include "xtrace/engine.hpp"
#include "xtrace/trace_actions.hpp"
#include "xtrace/vm.hpp"

namespace xtrace {

struct WorkloadSpec {
  std::size_t n_classes = 100;
  std::size_t methods_per_class = 100;
  std::size_t target_count = 5;
  std::uint64_t seed = 7;
  // Share of methods JIT-compiled before measurement.
  double hot_fraction = 0.3;
};

/// A generated program plus the choices measurements depend on.
struct GeneratedWorkload {
  WorkloadSpec spec;
  std::string program;
  std::vector<MethodRef> hot;
  std::vector<MethodRef> targets;
  // Measured methods: a compiled target, an interpreted target, and a
  // compiled method that is never traced.
  MethodRef traced_compiled;
  std::optional<MethodRef> traced_interpreted;
  MethodRef untraced_compiled;
  std::vector<std::int64_t> sample_args{3, 5};
  std::uint64_t fingerprint = 0;

  std::size_t method_count() const { return spec.n_classes * spec.methods_per_class; }
};

namespace detail {

inline std::string bench_class(std::size_t i) { return "bench.pkg" + std::to_string(i % 10) + ".C" + std::to_string(i); }

inline MethodRef bench_method(std::size_t cls, std::size_t m) {
  return MethodRef{bench_class(cls), "m" + std::to_string(m), {"int", "int"}};
}

inline std::string bench_call(std::size_t cls, std::size_t m) { return "call " + bench_method(cls, m).to_string(); }

// Method shapes cycle through: leaf arithmetic, a counted loop calling the
// leaf, a two-call method reaching into the next class, and a branch.
enum class Shape { kLeaf, kLoop, kFanOut, kBranch };

inline Shape shape_of(std::size_t m) { return static_cast<Shape>(m % 4); }

}  // namespace detail

/// Deterministic for a given spec. Every method takes (int,int).
inline GeneratedWorkload gen_workload(const WorkloadSpec& spec) {
  const std::size_t n = spec.n_classes * spec.methods_per_class;
  if (spec.n_classes == 0 || spec.methods_per_class == 0) {
    throw Error(ErrorCode::kBadArgument, "workload needs at least one class and one method per class");
  }
  if (spec.target_count == 0 || spec.target_count > n) {
    throw Error(ErrorCode::kBadArgument, "target count must be in [1, " + std::to_string(n) + "]");
  }
  if (!(spec.hot_fraction >= 0.0 && spec.hot_fraction <= 1.0)) {
    throw Error(ErrorCode::kBadArgument, "hot fraction outside [0,1]");
  }
  std::mt19937_64 rng(spec.seed);
  auto below = [&rng](std::uint64_t bound) { return bound == 0 ? 0 : rng() % bound; };

  GeneratedWorkload wl;
  wl.spec = spec;
  std::string& out = wl.program;
  out.reserve(n * 160);
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    out += "class " + detail::bench_class(c) + "\n";
    std::size_t next = (c + 1) % spec.n_classes;
    for (std::size_t m = 0; m < spec.methods_per_class; ++m) {
      auto k = std::to_string(1 + below(97));
      out += "  method m" + std::to_string(m) + "(int,int)\n";
      switch (detail::shape_of(m)) {
        case detail::Shape::kLeaf:
          out += "    loadarg 0\n    pushconst " + k + "\n    mul\n    loadarg 1\n    add\n    ret\n";
          break;
        case detail::Shape::kLoop:
          out += "    pushconst 0\n    storelocal 0\n    pushconst " + std::to_string(48 + below(64)) +
                 "\n    storelocal 1\n"
                 "    loadlocal 1\n    jz +20\n"
                 "    loadlocal 0\n    loadarg 0\n    loadlocal 1\n    " +
                 detail::bench_call(c, m - 1) +
                 "\n    add\n"
                 "    loadlocal 1\n    mul\n    pushconst " + k +
                 "\n    add\n    loadarg 1\n    sub\n    pushconst 7\n    mul\n"
                 "    storelocal 0\n"
                 "    loadlocal 1\n    pushconst 1\n    sub\n    storelocal 1\n    jmp -20\n"
                 "    loadlocal 0\n    loadarg 1\n    add\n    ret\n";
          break;
        case detail::Shape::kFanOut:
          out += "    loadarg 0\n    loadarg 1\n    " + detail::bench_call(c, m - 2) +
                 "\n    loadarg 1\n    loadarg 0\n    " + detail::bench_call(next, m - 2) + "\n    sub\n    ret\n";
          break;
        case detail::Shape::kBranch:
          out += "    loadarg 0\n    jz +7\n    loadarg 0\n    loadarg 1\n    mul\n    pushconst " + k +
                 "\n    add\n    ret\n    loadarg 1\n    pushconst " + k + "\n    sub\n    ret\n";
          break;
      }
    }
  }

  std::vector<bool> hot(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    hot[i] = static_cast<double>(rng() >> 11) * 0x1.0p-53 < spec.hot_fraction;
  }
  auto index = [&](std::size_t c, std::size_t m) { return c * spec.methods_per_class + m; };

  // Targets prefer loop methods: they call out, so tier differences show.
  std::vector<std::size_t> pool;
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    for (std::size_t m = 0; m < spec.methods_per_class; ++m) {
      if (detail::shape_of(m) == detail::Shape::kLoop) pool.push_back(index(c, m));
    }
  }
  if (pool.size() < spec.target_count + 1) {
    pool.resize(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  }
  for (std::size_t i = 0; i + 1 < pool.size(); ++i) std::swap(pool[i], pool[i + below(pool.size() - i)]);
  std::vector<std::size_t> targets(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.target_count));
  std::size_t untraced = pool.size() > spec.target_count ? pool[spec.target_count] : n;

  hot[targets[0]] = true;
  if (targets.size() > 1) hot[targets[1]] = false;
  if (untraced < n) hot[untraced] = true;
  // A hot loop makes its callee hot too.
  for (std::size_t i = 0; i < n; ++i) {
    if (hot[i] && detail::shape_of(i % spec.methods_per_class) == detail::Shape::kLoop) hot[i - 1] = true;
  }

  auto ref_of = [&](std::size_t i) {
    return detail::bench_method(i / spec.methods_per_class, i % spec.methods_per_class);
  };
  for (std::size_t i = 0; i < n; ++i) {
    if (hot[i]) wl.hot.push_back(ref_of(i));
  }
  for (auto t : targets) wl.targets.push_back(ref_of(t));
  wl.traced_compiled = ref_of(targets[0]);
  if (targets.size() > 1) wl.traced_interpreted = ref_of(targets[1]);
  wl.untraced_compiled = untraced < n ? ref_of(untraced) : ref_of(targets[0]);

  std::uint64_t fp = detail::fnv1a64(wl.program);
  for (const auto& t : wl.targets) fp = detail::fnv1a64(t.to_string(), fp);
  for (const auto& h : wl.hot) fp = detail::fnv1a64(h.to_string(), fp);
  wl.fingerprint = detail::mix64(fp);
  return wl;
}

inline GeneratedWorkload gen_workload(std::size_t n_classes, std::size_t methods_per_class, std::size_t target_count,
                                      std::uint64_t seed) {
  return gen_workload(WorkloadSpec{n_classes, methods_per_class, target_count, seed});
}

/// A fresh Vm with the workload loaded and its hot set compiled.
inline std::unique_ptr<Vm> load_workload(const GeneratedWorkload& wl) {
  auto vm = std::make_unique<Vm>();
  vm->load_program(wl.program);
  for (const auto& ref : wl.hot) vm->jit_compile(ref);
  return vm;
}

inline TargetSet make_target_set(const Vm& vm, std::span<const MethodRef> refs, TraceAction action) {
  TargetSet set;
  for (const auto& ref : refs) set.add(vm.registry().get(ref), {action});
  return set;
}

enum class AblationMode : std::uint8_t { kBaseline, kFull, kGlobal, kInterpreter };

constexpr std::string_view to_string(AblationMode m) {
  switch (m) {
    case AblationMode::kBaseline: return "Baseline";
    case AblationMode::kFull: return "XTrace-Full";
    case AblationMode::kGlobal: return "XTrace-Global";
    case AblationMode::kInterpreter: return "XTrace-Interpreter";
  }
  return "?";
}

/// Accepts baseline, full, global, interpreter (case-insensitive).
inline AblationMode parse_ablation_mode(std::string_view text) {
  std::string s;
  for (char c : text) s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (s == "baseline") return AblationMode::kBaseline;
  if (s == "full") return AblationMode::kFull;
  if (s == "global") return AblationMode::kGlobal;
  if (s == "interpreter") return AblationMode::kInterpreter;
  throw Error(ErrorCode::kBadArgument, "unknown mode '" + std::string(text) + "'");
}

inline EngineOptions engine_options_for(AblationMode mode) {
  EngineOptions o;
  o.targeted_injection = mode != AblationMode::kGlobal;
  o.adaptive_stubs = mode != AblationMode::kInterpreter;
  return o;
}

struct AblationOptions {
  std::size_t calls = 100'000;
  std::size_t warmup = 10'000;
  std::size_t startup_repetitions = 9;
  TraceAction action = TraceAction::kCaptureStack;
};

struct AblationMetrics {
  AblationMode mode = AblationMode::kBaseline;
  std::uint64_t workload_fingerprint = 0;
  std::size_t registry_size = 0;
  std::size_t target_count = 0;
  std::size_t startup_entry_points_modified = 0;
  std::int64_t startup_time_ns = 0;
  double per_call_latency_traced_ns = 0;
  double per_call_latency_untraced_ns = 0;
  std::uint64_t cpu_proxy_metric = 0;
  std::uint64_t trace_events = 0;
  std::uint64_t dropped_events = 0;
  std::uint64_t wrong_results = 0;
  std::size_t samples = 0;
  EntryPoint traced_entry = EntryPoint::kCompiledDirect;
  EntryPoint untraced_entry = EntryPoint::kCompiledDirect;
  bool teardown_clean = false;

  nlohmann::json to_json() const {
    return {{"mode", to_string(mode)},
            {"workload_fingerprint", workload_fingerprint},
            {"registry_size", registry_size},
            {"target_count", target_count},
            {"startup_entry_points_modified", startup_entry_points_modified},
            {"startup_time_ns", startup_time_ns},
            {"per_call_latency_traced_ns", per_call_latency_traced_ns},
            {"per_call_latency_untraced_ns", per_call_latency_untraced_ns},
            {"cpu_proxy_metric", cpu_proxy_metric},
            {"trace_events", trace_events},
            {"dropped_events", dropped_events},
            {"wrong_results", wrong_results},
            {"samples", samples},
            {"traced_entry", to_string(traced_entry)},
            {"untraced_entry", to_string(untraced_entry)},
            {"teardown_clean", teardown_clean}};
  }
};

namespace detail {

template <typename T>
double median(std::vector<T> v) {
  if (v.empty()) return 0;
  auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2) return static_cast<double>(*mid);
  auto lo = *std::max_element(v.begin(), mid);
  return (static_cast<double>(lo) + static_cast<double>(*mid)) / 2.0;
}

}  // namespace detail

/// Brings tracing up per `mode`, measures startup and steady-state per-call
/// latency, and tears everything down again. Each call uses a fresh Vm.
inline AblationMetrics run_ablation(AblationMode mode, const GeneratedWorkload& wl, const AblationOptions& opts = {}) {
  AblationMetrics out;
  out.mode = mode;
  out.workload_fingerprint = wl.fingerprint;
  out.target_count = wl.targets.size();

  auto vm = load_workload(wl);
  out.registry_size = vm->registry().size();
  const auto pristine = vm->registry().snapshot();
  EventSink sink(opts.calls + opts.warmup + 1024);
  Engine engine(*vm, sink, engine_options_for(mode));
  const bool traced = mode != AblationMode::kBaseline;

  auto thread = vm->new_thread();
  auto& traced_rec = vm->registry().get(wl.traced_compiled);
  auto& untraced_rec = vm->registry().get(wl.untraced_compiled);
  std::span<const std::int64_t> args(wl.sample_args);
  const auto expect_traced = vm->dispatch(thread, traced_rec, args);
  const auto expect_untraced = vm->dispatch(thread, untraced_rec, args);

  std::vector<std::int64_t> startup;
  for (std::size_t r = 0; r < std::max<std::size_t>(1, opts.startup_repetitions); ++r) {
    auto targets = make_target_set(*vm, wl.targets, opts.action);
    auto t0 = monotonic_ns();
    if (traced) engine.apply(std::move(targets));
    auto t1 = monotonic_ns();
    startup.push_back(t1 - t0);
    if (r == 0) out.startup_entry_points_modified = diff(pristine, vm->registry().snapshot()).size();
    engine.rollback();
  }
  out.startup_time_ns = static_cast<std::int64_t>(detail::median(startup));

  if (traced) engine.apply(make_target_set(*vm, wl.targets, opts.action));
  out.traced_entry = traced_rec.entry_point();
  out.untraced_entry = untraced_rec.entry_point();

  auto measure = [&](const MethodRecord& rec, std::int64_t expected) {
    for (std::size_t i = 0; i < opts.warmup; ++i) {
      if (vm->dispatch(thread, rec, args) != expected) ++out.wrong_results;
    }
    std::vector<std::int64_t> samples(opts.calls);
    for (std::size_t i = 0; i < opts.calls; ++i) {
      // Collect outside the timed region so retained events do not grow
      // the heap under the measurement.
      if (i % 1024 == 0) sink.drain();
      auto t0 = monotonic_ns();
      auto v = vm->dispatch(thread, rec, args);
      samples[i] = monotonic_ns() - t0;
      if (v != expected) ++out.wrong_results;
    }
    return detail::median(std::move(samples));
  };

  sink.drain();
  auto events_before = vm->instrumentation().events_dispatched();
  auto emitted_before = sink.emitted();
  out.per_call_latency_traced_ns = measure(traced_rec, expect_traced);
  sink.drain();
  out.per_call_latency_untraced_ns = measure(untraced_rec, expect_untraced);
  out.cpu_proxy_metric = vm->instrumentation().events_dispatched() - events_before;
  out.trace_events = sink.emitted() - emitted_before;
  out.dropped_events = sink.drop_count();
  out.samples = opts.calls;

  engine.rollback();
  out.teardown_clean = diff(pristine, vm->registry().snapshot()).empty();
  return out;
}

/// Ablation rows side by side with ratios against XTrace-Full (or the first
/// row when Full was not run).
struct ComparisonReport {
  std::vector<AblationMetrics> rows;
  std::size_t reference = 0;

  static std::optional<double> ratio(double value, double ref) {
    if (ref == 0) return std::nullopt;
    return value / ref;
  }

  struct Column {
    const char* name;
    double (*get)(const AblationMetrics&);
  };

  static const std::vector<Column>& columns() {
    static const std::vector<Column> kColumns = {
        {"startup_entry_points_modified",
         [](const AblationMetrics& m) { return static_cast<double>(m.startup_entry_points_modified); }},
        {"startup_time_ns", [](const AblationMetrics& m) { return static_cast<double>(m.startup_time_ns); }},
        {"per_call_latency_traced_ns", [](const AblationMetrics& m) { return m.per_call_latency_traced_ns; }},
        {"per_call_latency_untraced_ns", [](const AblationMetrics& m) { return m.per_call_latency_untraced_ns; }},
        {"cpu_proxy_metric", [](const AblationMetrics& m) { return static_cast<double>(m.cpu_proxy_metric); }},
    };
    return kColumns;
  }

  std::optional<double> ratio_of(std::size_t row, std::size_t col) const {
    const auto& c = columns()[col];
    return ratio(c.get(rows[row]), c.get(rows[reference]));
  }

  std::optional<double> ratio_of(AblationMode mode, std::string_view column) const {
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].mode != mode) continue;
      for (std::size_t c = 0; c < columns().size(); ++c) {
        if (column == columns()[c].name) return ratio_of(r, c);
      }
    }
    return std::nullopt;
  }

  nlohmann::json to_json() const {
    auto out = nlohmann::json::array();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto row = rows[r].to_json();
      nlohmann::json ratios = nlohmann::json::object();
      for (std::size_t c = 0; c < columns().size(); ++c) {
        auto v = ratio_of(r, c);
        ratios[columns()[c].name] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
      }
      row["ratio_vs_reference"] = ratios;
      out.push_back(row);
    }
    return {{"reference", to_string(rows[reference].mode)}, {"rows", out}};
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "mode";
    for (const auto& c : columns()) os << ',' << c.name << ',' << c.name << "_ratio";
    os << '\n';
    for (std::size_t r = 0; r < rows.size(); ++r) {
      os << to_string(rows[r].mode);
      for (std::size_t c = 0; c < columns().size(); ++c) {
        os << ',' << columns()[c].get(rows[r]) << ',';
        if (auto v = ratio_of(r, c)) os << *v;
      }
      os << '\n';
    }
    return os.str();
  }

  std::string to_text() const {
    std::ostringstream os;
    auto cell = [&os](const std::string& s, std::size_t w) { os << s << std::string(w > s.size() ? w - s.size() : 1, ' '); };
    auto num = [](double v) {
      std::ostringstream s;
      s.precision(v >= 1000 ? 0 : 1);
      s << std::fixed << v;
      return s.str();
    };
    auto rat = [](std::optional<double> v) {
      if (!v) return std::string("-");
      std::ostringstream s;
      s.precision(2);
      s << std::fixed << *v << "x";
      return s.str();
    };
    cell("mode", 20);
    cell("modified", 18);
    cell("startup ns", 22);
    cell("traced ns/call", 20);
    cell("untraced ns/call", 20);
    cell("events", 20);
    os << '\n';
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto& m = rows[r];
      cell(std::string(to_string(m.mode)), 20);
      cell(std::to_string(m.startup_entry_points_modified) + " (" + rat(ratio_of(r, 0)) + ")", 18);
      cell(num(static_cast<double>(m.startup_time_ns)) + " (" + rat(ratio_of(r, 1)) + ")", 22);
      cell(num(m.per_call_latency_traced_ns) + " (" + rat(ratio_of(r, 2)) + ")", 20);
      cell(num(m.per_call_latency_untraced_ns) + " (" + rat(ratio_of(r, 3)) + ")", 20);
      cell(std::to_string(m.cpu_proxy_metric) + " (" + rat(ratio_of(r, 4)) + ")", 20);
      os << '\n';
    }
    os << "ratios are relative to " << to_string(rows[reference].mode) << '\n';
    return os.str();
  }
};

inline ComparisonReport compare_report(std::vector<AblationMetrics> rows) {
  if (rows.size() < 2) throw Error(ErrorCode::kBadArgument, "comparison needs at least two runs");
  for (const auto& r : rows) {
    if (r.workload_fingerprint != rows.front().workload_fingerprint) {
      throw Error(ErrorCode::kBadArgument, "runs used different workloads");
    }
  }
  ComparisonReport rep;
  rep.rows = std::move(rows);
  for (std::size_t i = 0; i < rep.rows.size(); ++i) {
    if (rep.rows[i].mode == AblationMode::kFull) {
      rep.reference = i;
      break;
    }
  }
  return rep;
}

struct StressResult {
  std::uint64_t calls = 0;
  std::uint64_t wrong_results = 0;
  std::uint64_t torn_entries = 0;
  std::uint64_t cycles = 0;
  std::uint64_t errors = 0;
  bool teardown_clean = false;
};

/// `threads` workers call targets and non-targets against precomputed
/// results while the calling thread repeatedly brings tracing up and down,
/// alternating stub policies.
inline StressResult run_concurrency_stress(const GeneratedWorkload& wl, std::size_t threads, std::size_t cycles,
                                           std::size_t min_calls_per_thread = 2000) {
  StressResult out;
  auto vm = load_workload(wl);
  const auto pristine = vm->registry().snapshot();
  std::vector<const MethodRecord*> methods;
  for (const auto& t : wl.targets) methods.push_back(&vm->registry().get(t));
  methods.push_back(&vm->registry().get(wl.untraced_compiled));
  std::vector<std::int64_t> expected;
  {
    auto t = vm->new_thread();
    for (auto* m : methods) expected.push_back(vm->dispatch(t, *m, wl.sample_args));
  }

  EventSink sink(1 << 16);
  std::atomic<bool> stop{false};
  std::atomic<std::uint64_t> calls{0}, wrong{0}, errors{0};
  std::vector<std::jthread> workers;
  for (std::size_t w = 0; w < threads; ++w) {
    workers.emplace_back([&, w] {
      auto thread = vm->new_thread();
      std::size_t done = 0;
      for (std::size_t i = w; !stop.load(std::memory_order_relaxed) || done < min_calls_per_thread; ++i, ++done) {
        auto k = i % methods.size();
        try {
          if (vm->dispatch(thread, *methods[k], wl.sample_args) != expected[k]) wrong.fetch_add(1);
        } catch (const std::exception&) {
          errors.fetch_add(1);
        }
      }
      calls.fetch_add(done);
    });
  }
  {
    Engine full(*vm, sink, engine_options_for(AblationMode::kFull));
    Engine interp(*vm, sink, engine_options_for(AblationMode::kInterpreter));
    for (std::size_t c = 0; c < cycles; ++c) {
      Engine& e = c % 2 ? interp : full;
      e.apply(make_target_set(*vm, wl.targets, TraceAction::kTimeMethod));
      std::this_thread::yield();
      e.rollback();
      std::this_thread::yield();
      if (c % 64 == 0) sink.drain();
      ++out.cycles;
    }
  }
  stop.store(true);
  workers.clear();
  out.calls = calls.load();
  out.wrong_results = wrong.load();
  out.errors = errors.load();
  out.torn_entries = vm->torn_entry_observations();
  out.teardown_clean = diff(pristine, vm->registry().snapshot()).empty();
  return out;
}

}  // namespace xtrace
