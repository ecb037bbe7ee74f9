// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "xtrace/error.hpp"
#include "xtrace/instrumentation.hpp"
#include "xtrace/method_ref.hpp"
#include "xtrace/runtime.hpp"
#include "xtrace/trace_actions.hpp"
#include "xtrace/vm.hpp"

namespace xtrace {

/// A target that did not resolve yet. Matched against every later class
/// load; `...` in the class name or a parameter type elides package segments.
struct DeferredTarget {
  std::string class_pattern;
  std::string method_name;
  Signature param_patterns;
  std::vector<TraceAction> actions;

  bool matches(const MethodRef& ref) const {
    return ref.method_name == method_name && matches_elided(class_pattern, ref.class_name) &&
           signature_matches(param_patterns, ref.params);
  }

  std::string describe() const {
    return class_pattern + "." + method_name + "(" + format_signature(param_patterns) + ")";
  }
};

/// The methods to trace and what to do on each. Keyed by record address, so
/// membership costs one hash probe regardless of registry size.
class TargetSet {
 public:
  /// Adds `method`, merging actions with any already configured for it.
  void add(const MethodRecord& method, std::span<const TraceAction> actions) {
    auto& list = members_[&method];
    for (auto a : actions) {
      if (std::find(list.begin(), list.end(), a) == list.end()) list.push_back(a);
    }
  }

  void add(const MethodRecord& method, std::initializer_list<TraceAction> actions) {
    add(method, std::span<const TraceAction>(actions.begin(), actions.size()));
  }

  void add_deferred(DeferredTarget target) { deferred_.push_back(std::move(target)); }

  const std::vector<TraceAction>* find(const MethodRecord* method) const {
    auto it = members_.find(method);
    return it == members_.end() ? nullptr : &it->second;
  }

  bool contains(const MethodRecord* method) const { return members_.count(method) != 0; }
  std::size_t size() const { return members_.size(); }
  bool empty() const { return members_.empty() && deferred_.empty(); }

  /// Members in a stable (name) order.
  std::vector<const MethodRecord*> members() const {
    std::vector<const MethodRecord*> out;
    out.reserve(members_.size());
    for (const auto& [m, actions] : members_) out.push_back(m);
    std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->ref() < b->ref(); });
    return out;
  }

  const std::vector<DeferredTarget>& deferred() const { return deferred_; }

 private:
  std::unordered_map<const MethodRecord*, std::vector<TraceAction>> members_;
  std::vector<DeferredTarget> deferred_;
};

enum class EnginePhase : std::uint8_t { kIdle, kSuppressed, kInjected, kActive };

constexpr std::string_view to_string(EnginePhase p) {
  switch (p) {
    case EnginePhase::kIdle: return "Idle";
    case EnginePhase::kSuppressed: return "Suppressed";
    case EnginePhase::kInjected: return "Injected";
    case EnginePhase::kActive: return "Active";
  }
  return "?";
}

struct InjectedMethod {
  MethodRecord* method = nullptr;
  EntryPoint installed = EntryPoint::kInterpreterStub;
  EntryPoint original = EntryPoint::kInterpreterBridge;
};

/// Hook run inside the interceptor frame after the built-in actions.
using InterceptHook = std::function<void(ThreadContext&, const MethodRecord&)>;

struct EngineOptions {
  // Off: the native global installation is used instead of per-target stubs.
  bool targeted_injection = true;
  // Off: every target gets the interpreter stub.
  bool adaptive_stubs = true;
  std::string proxy_id = "MethodEntryProxy";
  InterceptHook on_intercept;
};

struct BringUpReport {
  std::size_t entry_points_modified = 0;
  std::int64_t duration_ns = 0;
  std::vector<std::string> warnings;
};

/// Selective tracing over one Vm. Administrative calls (everything but the
/// proxy) must come from one caller at a time; the proxy runs on any VM
/// thread.
class Engine {
 public:
  static constexpr std::string_view kSuppressedHandlerName = "EmptyHandler";

  Engine(Vm& vm, EventSink& sink, EngineOptions options = {})
      : vm_(vm), sink_(sink), options_(std::move(options)) {
    swap_targets(TargetSet{});
    hook_id_ = vm_.add_class_load_hook([this](std::span<MethodRecord* const> added) { on_class_load(added); });
  }

  ~Engine() {
    vm_.remove_class_load_hook(hook_id_);
    deactivate_and_restore();
  }

  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  EnginePhase phase() const { return phase_.load(std::memory_order_acquire); }
  const EngineOptions& options() const { return options_; }
  Vm& vm() { return vm_; }

  void suppress_global_tracing() {
    std::lock_guard lock(admin_mu_);
    require_phase("suppress_global_tracing", {EnginePhase::kIdle});
    vm_.instrumentation().replace_activation_handler(std::string(kSuppressedHandlerName),
                                                     [] { return InstallationReport{}; });
    suppressed_ = true;
    phase_.store(EnginePhase::kSuppressed, std::memory_order_release);
  }

  /// Quick stub for compiled methods, interpreter stub otherwise. Reads the
  /// current state on every call.
  EntryPoint select_optimal_entry_point(const MethodRecord& method) const {
    return method.is_compiled() ? EntryPoint::kQuickStub : EntryPoint::kInterpreterStub;
  }

  EntryPoint select_optimal_entry_point(const MethodRef& ref) const {
    return select_optimal_entry_point(vm_.registry().get(ref));
  }

  /// The stub this engine installs on `method` under its options.
  EntryPoint stub_for(const MethodRecord& method) const {
    return options_.adaptive_stubs ? select_optimal_entry_point(method) : EntryPoint::kInterpreterStub;
  }

  void set_entry_point(MethodRecord& method, EntryPoint ep) {
    std::lock_guard lock(admin_mu_);
    require_phase("set_entry_point", {EnginePhase::kSuppressed, EnginePhase::kInjected});
    inject_locked(method, ep);
    phase_.store(EnginePhase::kInjected, std::memory_order_release);
  }

  void set_entry_point(const MethodRef& ref, EntryPoint ep) { set_entry_point(vm_.registry().get(ref), ep); }

  /// Gives the proxy its target set. Every injected method must be a member.
  void install_dispatcher(TargetSet targets) {
    std::lock_guard lock(admin_mu_);
    require_phase("install_dispatcher", {EnginePhase::kInjected});
    if (dispatcher_installed_) throw Error(ErrorCode::kWrongPhase, "dispatcher already installed");
    for (const auto& inj : injected_) {
      if (!targets.contains(inj.method)) {
        throw Error(ErrorCode::kBadArgument,
                    "injected method " + inj.method->ref().to_string() + " is not in the target set");
      }
    }
    swap_targets(std::move(targets));
    dispatcher_installed_ = true;
  }

  /// Turns on event delivery through the native start path. The activation
  /// slot must still hold the no-op handler; if it does not, nothing is
  /// started.
  void activate_event_engine() {
    std::lock_guard lock(admin_mu_);
    require_phase("activate_event_engine", {EnginePhase::kInjected});
    if (!dispatcher_installed_) throw Error(ErrorCode::kWrongPhase, "activate_event_engine before install_dispatcher");
    auto& instr = vm_.instrumentation();
    if (!suppressed_ || instr.activation_handler_is_default()) {
      throw Error(ErrorCode::kWrongPhase, "global tracing is not suppressed; refusing to activate");
    }
    auto report = instr.native_trace_start(proxy_registration());
    listener_registered_ = true;
    if (report.entry_points_replaced != 0) {
      spdlog::error("activation replaced {} entry points", report.entry_points_replaced);
    }
    phase_.store(EnginePhase::kActive, std::memory_order_release);
  }

  /// Undoes everything this engine did, from any phase. Safe to repeat.
  std::size_t deactivate_and_restore() {
    std::lock_guard lock(admin_mu_);
    auto& instr = vm_.instrumentation();
    if (listener_registered_) {
      instr.remove_listener(options_.proxy_id);
      listener_registered_ = false;
    }
    std::size_t restored = 0;
    if (global_mode_) {
      restored = instr.disable_method_tracing_native();
      global_mode_ = false;
    } else {
      for (auto& inj : injected_) {
        if (instr.restore_entry_point(*inj.method)) ++restored;
      }
    }
    injected_.clear();
    if (suppressed_) {
      instr.restore_activation_handler();
      suppressed_ = false;
    }
    dispatcher_installed_ = false;
    swap_targets(TargetSet{});
    phase_.store(EnginePhase::kIdle, std::memory_order_release);
    return restored;
  }

  /// Full bring-up from Idle according to the options. Unresolved targets
  /// stay deferred.
  BringUpReport apply(TargetSet targets) {
    auto start = monotonic_ns();
    BringUpReport report;
    if (phase() != EnginePhase::kIdle) throw Error(ErrorCode::kWrongPhase, "apply requires Idle");
    for (const auto& d : targets.deferred()) {
      report.warnings.push_back("deferred until loaded: " + d.describe());
    }
    try {
      if (!options_.targeted_injection) {
        report.entry_points_modified = apply_global(std::move(targets));
      } else {
        suppress_global_tracing();
        for (const MethodRecord* m : targets.members()) {
          auto* rec = const_cast<MethodRecord*>(m);
          set_entry_point(*rec, stub_for(*rec));
          ++report.entry_points_modified;
        }
        if (phase() == EnginePhase::kSuppressed) {
          // Nothing resolved yet; the dispatcher still goes in so deferred
          // targets can be picked up on load.
          phase_.store(EnginePhase::kInjected, std::memory_order_release);
        }
        install_dispatcher(std::move(targets));
        activate_event_engine();
      }
    } catch (...) {
      // A failed bring-up leaves nothing behind.
      deactivate_and_restore();
      throw;
    }
    report.duration_ns = monotonic_ns() - start;
    return report;
  }

  std::size_t rollback() { return deactivate_and_restore(); }

  nlohmann::json status() const {
    std::lock_guard lock(admin_mu_);
    auto injected = nlohmann::json::array();
    for (const auto& inj : injected_) {
      injected.push_back({{"method", inj.method->ref().to_string()},
                          {"installed", to_string(inj.installed)},
                          {"original", to_string(inj.original)}});
    }
    auto targets = current_targets();
    return {{"phase", to_string(phase())},
            {"mode", global_mode_ ? "global" : "targeted"},
            {"targets", targets ? targets->size() : 0},
            {"deferred", targets ? targets->deferred().size() : 0},
            {"injected", injected},
            {"intercepted_calls", intercepted_calls()}};
  }

  std::vector<InjectedMethod> injected() const {
    std::lock_guard lock(admin_mu_);
    return injected_;
  }

  std::shared_ptr<const TargetSet> current_targets() const {
    std::lock_guard lock(targets_mu_);
    return targets_owner_;
  }

  /// Target entries handled by the proxy.
  std::uint64_t intercepted_calls() const { return intercepted_.load(std::memory_order_relaxed); }
  /// Exits that matched no recorded entry.
  std::uint64_t unmatched_exits() const { return unmatched_exits_.load(std::memory_order_relaxed); }

  /// The dispatcher. Non-targets cost one hash probe.
  void method_entry_proxy(const MethodEventInfo& info) {
    const TargetSet* targets = targets_.load(std::memory_order_acquire);
    if (!targets) return;
    const auto* actions = targets->find(&info.method);
    if (!actions) return;
    auto& state = info.thread.interceptor;
    if (state.active) return;
    state.active = true;
    struct Reset {
      bool& flag;
      ~Reset() { flag = false; }
    } reset{state.active};
    if (info.kind == MethodEvent::kEntered) {
      on_enter(info, *actions);
    } else {
      on_exit(info, *actions);
    }
  }

 private:
  void require_phase(std::string_view op, std::initializer_list<EnginePhase> allowed) const {
    auto p = phase();
    for (auto a : allowed) {
      if (p == a) return;
    }
    throw Error(ErrorCode::kWrongPhase, std::string(op) + " not allowed in phase " + std::string(to_string(p)));
  }

  void inject_locked(MethodRecord& method, EntryPoint ep) {
    EntryPoint before = method.entry_point();
    vm_.instrumentation().install_stubs_for_method(method, ep);
    auto it = std::find_if(injected_.begin(), injected_.end(), [&](const auto& i) { return i.method == &method; });
    if (it != injected_.end()) {
      it->installed = ep;
    } else {
      injected_.push_back(InjectedMethod{&method, ep, method.saved_original().value_or(before)});
    }
  }

  std::size_t apply_global(TargetSet targets) {
    std::lock_guard lock(admin_mu_);
    auto& instr = vm_.instrumentation();
    swap_targets(std::move(targets));
    dispatcher_installed_ = true;
    auto report = instr.native_trace_start(proxy_registration());
    listener_registered_ = true;
    global_mode_ = true;
    // The global pass left every target on the interpreter stub; targets
    // that qualify get the quick stub back.
    for (const MethodRecord* m : current_targets()->members()) {
      auto* rec = const_cast<MethodRecord*>(m);
      auto ep = stub_for(*rec);
      if (ep != rec->entry_point()) instr.install_stubs_for_method(*rec, ep);
      injected_.push_back(InjectedMethod{rec, ep, rec->saved_original().value_or(EntryPoint::kInterpreterBridge)});
    }
    phase_.store(EnginePhase::kActive, std::memory_order_release);
    return report.entry_points_replaced;
  }

  ListenerRegistration proxy_registration() {
    return ListenerRegistration{options_.proxy_id, kAllEventsMask,
                                [this](const MethodEventInfo& info) { method_entry_proxy(info); }};
  }

  void swap_targets(TargetSet next) {
    auto owner = std::make_shared<const TargetSet>(std::move(next));
    std::lock_guard lock(targets_mu_);
    targets_.store(owner.get(), std::memory_order_release);
    retired_targets_.push_back(owner);
    targets_owner_ = std::move(owner);
  }

  void on_class_load(std::span<MethodRecord* const> added) {
    std::lock_guard lock(admin_mu_);
    auto p = phase();
    if (p != EnginePhase::kInjected && p != EnginePhase::kActive) return;
    auto current = current_targets();
    if (!current || current->deferred().empty()) return;
    TargetSet next = *current;
    bool changed = false;
    for (MethodRecord* rec : added) {
      for (const auto& d : current->deferred()) {
        if (!d.matches(rec->ref())) continue;
        next.add(*rec, d.actions);
        if (global_mode_) {
          // Loaded after the global pass, so it still has its own entry.
          auto ep = stub_for(*rec);
          vm_.instrumentation().install_stubs_for_method(*rec, ep);
          injected_.push_back(InjectedMethod{rec, ep, EntryPoint::kInterpreterBridge});
        } else {
          inject_locked(*rec, stub_for(*rec));
        }
        spdlog::info("deferred target resolved: {}", rec->ref().to_string());
        changed = true;
      }
    }
    if (changed) swap_targets(std::move(next));
  }

  void on_enter(const MethodEventInfo& info, const std::vector<TraceAction>& actions) {
    intercepted_.fetch_add(1, std::memory_order_relaxed);
    auto& thread = info.thread;
    std::size_t depth = thread.depth();
    FrameGuard frame(thread, interceptor_frame(), /*synthetic=*/true);
    PendingCall pending{&info.method, depth, 0, std::nullopt};
    bool wait_for_exit = false;
    for (auto action : actions) {
      switch (action) {
        case TraceAction::kCaptureStack:
          sink_.append(action_capture_stack(thread, info.method));
          break;
        case TraceAction::kCaptureArgs:
          pending.args = capture_arg_values(vm_, info.method, info.args);
          wait_for_exit = true;
          break;
        case TraceAction::kTimeMethod:
          wait_for_exit = true;
          break;
      }
    }
    if (options_.on_intercept) options_.on_intercept(thread, info.method);
    if (wait_for_exit) {
      pending.enter_ns = monotonic_ns();
      thread.interceptor.pending.push_back(std::move(pending));
    }
  }

  void on_exit(const MethodEventInfo& info, const std::vector<TraceAction>& actions) {
    auto& thread = info.thread;
    auto exit_ns = monotonic_ns();
    std::size_t depth = thread.depth();
    auto& pending = thread.interceptor.pending;
    // Entries deeper than this exit lost their exits (e.g. tracing was
    // switched on mid-call); discard them.
    while (!pending.empty() && pending.back().depth > depth) pending.pop_back();
    bool wants_exit = std::find_if(actions.begin(), actions.end(), [](auto a) {
                        return a == TraceAction::kCaptureArgs || a == TraceAction::kTimeMethod;
                      }) != actions.end();
    if (!wants_exit) return;
    if (pending.empty() || pending.back().method != &info.method || pending.back().depth != depth) {
      unmatched_exits_.fetch_add(1, std::memory_order_relaxed);
      spdlog::debug("unmatched exit of {} at depth {}", info.method.ref().to_string(), depth);
      return;
    }
    PendingCall call = std::move(pending.back());
    pending.pop_back();
    FrameGuard frame(thread, interceptor_frame(), /*synthetic=*/true);
    for (auto action : actions) {
      if (action == TraceAction::kCaptureArgs && call.args) {
        ArgsPayload payload{std::move(*call.args), std::nullopt, info.abrupt};
        if (info.result) payload.result = *info.result;
        sink_.append(TraceEvent{0, monotonic_ns(), info.method.ref(), thread.id(), TraceAction::kCaptureArgs,
                                std::move(payload)});
        call.args.reset();
      } else if (action == TraceAction::kTimeMethod) {
        CallMark enter{call.method, thread.id(), call.depth, call.enter_ns};
        CallMark exit{&info.method, thread.id(), depth, exit_ns};
        if (auto ev = action_time_method(enter, exit)) sink_.append(std::move(*ev));
      }
    }
  }

  Vm& vm_;
  EventSink& sink_;
  EngineOptions options_;
  std::uint64_t hook_id_ = 0;

  mutable std::recursive_mutex admin_mu_;
  std::atomic<EnginePhase> phase_{EnginePhase::kIdle};
  bool suppressed_ = false;
  bool dispatcher_installed_ = false;
  bool listener_registered_ = false;
  bool global_mode_ = false;
  std::vector<InjectedMethod> injected_;

  // The proxy reads through the raw pointer; superseded sets are kept alive
  // until the engine goes away so a racing dispatch never sees a dead set.
  mutable std::mutex targets_mu_;
  std::atomic<const TargetSet*> targets_{nullptr};
  std::shared_ptr<const TargetSet> targets_owner_;
  std::vector<std::shared_ptr<const TargetSet>> retired_targets_;

  std::atomic<std::uint64_t> intercepted_{0};
  std::atomic<std::uint64_t> unmatched_exits_{0};
};

}  // namespace xtrace
