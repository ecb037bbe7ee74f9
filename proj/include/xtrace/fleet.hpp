// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <iterator>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "xtrace/config.hpp"
#include "xtrace/engine.hpp"
#include "xtrace/trace_actions.hpp"
#include "xtrace/vm.hpp"

namespace xtrace {

/// What every simulated session runs.
struct SessionWorkload {
  std::string program;
  MethodRef entry;
  std::vector<std::int64_t> args;
  // Compiled before the pristine snapshot is taken.
  std::vector<MethodRef> hot;
};

/// Deterministically marks a fraction of admitted sessions as crashing or
/// hanging, keyed by device id.
struct CrashInjector {
  double crash_rate = 0.0;
  double anr_rate = 0.0;

  bool crashes(std::string_view device_id) const { return session_gate(device_id, "crash", crash_rate); }
  bool hangs(std::string_view device_id) const { return session_gate(device_id, "anr", anr_rate); }
};

struct FleetOptions {
  std::size_t n_sessions = 1000;
  std::size_t calls_per_session = 4;
  std::size_t threads = 1;
  std::string device_prefix = "device-";
};

/// One simulated app process.
struct Session {
  std::string device_id;
  std::unique_ptr<Vm> vm;
  std::unique_ptr<EventSink> sink;
  std::unique_ptr<Engine> engine;
  std::unique_ptr<ThreadContext> thread;
  RegistrySnapshot pristine;
  bool admitted = false;
  bool crashed = false;
  bool hung = false;
  std::uint64_t wrong_results = 0;
  std::int64_t expected = 0;
};

/// A population of independent sessions running one config. Admitted
/// sessions count toward health metrics; gated-out sessions run untraced.
class Fleet {
 public:
  Fleet(ConfigManager& manager, std::string config_id, SessionWorkload workload, FleetOptions options,
        CrashInjector injector = {})
      : manager_(manager),
        config_id_(std::move(config_id)),
        workload_(std::move(workload)),
        options_(std::move(options)),
        injector_(injector) {
    if (options_.n_sessions == 0) throw Error(ErrorCode::kBadArgument, "fleet needs at least one session");
    if (options_.threads == 0) options_.threads = 1;
  }

  ~Fleet() {
    for (auto& s : sessions_) {
      if (s.engine) manager_.detach(config_id_, *s.engine);
    }
  }

  Fleet(const Fleet&) = delete;
  Fleet& operator=(const Fleet&) = delete;

  /// Starts every session, applies the config where admitted, and runs the
  /// workload. Returns metrics over admitted sessions.
  HealthMetrics run() {
    sessions_.clear();
    sessions_.resize(options_.n_sessions);
    auto cfg = manager_.get(config_id_);
    std::atomic<std::uint64_t> admitted{0};
    std::atomic<std::uint64_t> crashes{0};
    std::atomic<std::uint64_t> anrs{0};
    parallel_for(options_.n_sessions, [&](std::size_t i) {
      auto& s = sessions_[i];
      start_session(s, i, cfg);
      if (!s.admitted) return;
      admitted.fetch_add(1, std::memory_order_relaxed);
      if (s.crashed) crashes.fetch_add(1, std::memory_order_relaxed);
      if (s.hung) anrs.fetch_add(1, std::memory_order_relaxed);
    });
    // Attach serially: the manager's lock is the only shared state and the
    // order is reproducible.
    for (auto& s : sessions_) {
      if (s.engine && !manager_.attach(config_id_, *s.engine)) s.engine->deactivate_and_restore();
    }
    HealthMetrics m;
    m.sessions = admitted.load();
    m.crashes = crashes.load();
    m.anrs = anrs.load();
    m.thresholds = manager_.policy().thresholds;
    metrics_ = m;
    return m;
  }

  /// Runs `total_calls` more workload calls spread round-robin over all
  /// sessions. Returns TraceEvents emitted during them.
  std::uint64_t run_calls(std::size_t total_calls) {
    std::uint64_t before = total_events();
    if (sessions_.empty()) return 0;
    for (std::size_t c = 0; c < total_calls; ++c) call_once(sessions_[c % sessions_.size()]);
    return total_events() - before;
  }

  /// Sessions whose registry differs from the snapshot taken before the
  /// config was applied.
  std::size_t sessions_with_drift() const {
    std::size_t n = 0;
    for (const auto& s : sessions_) {
      if (!diff(s.pristine, s.vm->registry().snapshot()).empty()) ++n;
    }
    return n;
  }

  std::uint64_t total_events() const {
    std::uint64_t n = 0;
    for (const auto& s : sessions_) n += s.sink->emitted();
    return n;
  }

  std::uint64_t wrong_results() const {
    std::uint64_t n = 0;
    for (const auto& s : sessions_) n += s.wrong_results;
    return n;
  }

  std::size_t admitted() const {
    return static_cast<std::size_t>(
        std::count_if(sessions_.begin(), sessions_.end(), [](const auto& s) { return s.admitted; }));
  }

  std::size_t active_engines() const {
    return static_cast<std::size_t>(std::count_if(sessions_.begin(), sessions_.end(), [](const auto& s) {
      return s.engine && s.engine->phase() == EnginePhase::kActive;
    }));
  }

  /// Drained events from every session, in session order.
  std::vector<TraceEvent> drain_all() {
    std::vector<TraceEvent> out;
    for (auto& s : sessions_) {
      auto d = s.sink->drain();
      std::move(d.events.begin(), d.events.end(), std::back_inserter(out));
    }
    return out;
  }

  const std::vector<Session>& sessions() const { return sessions_; }

  nlohmann::json report() const {
    return {{"config_id", config_id_},
            {"status", to_string(manager_.status(config_id_))},
            {"sessions", sessions_.size()},
            {"admitted", admitted()},
            {"active_engines", active_engines()},
            {"trace_events", total_events()},
            {"wrong_results", wrong_results()},
            {"sessions_with_drift", sessions_with_drift()},
            {"health", metrics_.to_json()}};
  }

 private:
  template <typename Fn>
  void parallel_for(std::size_t n, Fn fn) {
    if (options_.threads <= 1) {
      for (std::size_t i = 0; i < n; ++i) fn(i);
      return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> workers;
    for (std::size_t t = 0; t < options_.threads; ++t) {
      workers.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
      });
    }
  }

  void start_session(Session& s, std::size_t index, const TraceConfig& cfg) {
    s.device_id = options_.device_prefix + std::to_string(index);
    s.vm = std::make_unique<Vm>();
    s.vm->load_program(workload_.program);
    for (const auto& ref : workload_.hot) s.vm->jit_compile(ref);
    s.pristine = s.vm->registry().snapshot();
    s.sink = std::make_unique<EventSink>();
    s.thread = std::make_unique<ThreadContext>(s.vm->new_thread());
    s.expected = s.vm->invoke(*s.thread, workload_.entry, workload_.args);
    bool live = cfg.status == ConfigStatus::kCanary || cfg.status == ConfigStatus::kFullRollout;
    s.admitted = live && session_gate(s.device_id, cfg);
    if (s.admitted) {
      s.engine = std::make_unique<Engine>(*s.vm, *s.sink);
      s.engine->apply(resolve_targets(cfg, s.vm->registry()).targets);
      s.crashed = injector_.crashes(s.device_id);
      s.hung = injector_.hangs(s.device_id);
    }
    for (std::size_t c = 0; c < options_.calls_per_session; ++c) call_once(s);
  }

  void call_once(Session& s) {
    if (s.vm->invoke(*s.thread, workload_.entry, workload_.args) != s.expected) ++s.wrong_results;
  }

  ConfigManager& manager_;
  std::string config_id_;
  SessionWorkload workload_;
  FleetOptions options_;
  CrashInjector injector_;
  std::vector<Session> sessions_;
  HealthMetrics metrics_;
};

struct FleetResult {
  HealthMetrics metrics;
  ConfigStatus status = ConfigStatus::kDraft;
  std::size_t restored_sessions = 0;
  nlohmann::json report;
};

/// Canary round: run the fleet, judge health, promote or roll back.
inline FleetResult fleet_simulate(ConfigManager& manager, Fleet& fleet, const std::string& config_id) {
  FleetResult out;
  out.metrics = fleet.run();
  std::size_t attached = manager.attached(config_id);
  out.status = manager.lifecycle_advance(config_id, out.metrics);
  if (out.status == ConfigStatus::kRolledBack) out.restored_sessions = attached;
  out.report = fleet.report();
  return out;
}

}  // namespace xtrace
