// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "xtrace/error.hpp"
#include "xtrace/runtime.hpp"

namespace xtrace {

enum class MethodEvent : std::uint8_t { kEntered = 1, kExited = 2 };

constexpr std::string_view to_string(MethodEvent e) {
  return e == MethodEvent::kEntered ? "MethodEntered" : "MethodExited";
}

/// Bit set over MethodEvent values.
using EventMask = std::uint8_t;
inline constexpr EventMask kEnteredMask = static_cast<EventMask>(MethodEvent::kEntered);
inline constexpr EventMask kExitedMask = static_cast<EventMask>(MethodEvent::kExited);
inline constexpr EventMask kAllEventsMask = kEnteredMask | kExitedMask;

/// Which dispatch site raised an event.
enum class EventSource : std::uint8_t { kInterpreterCheckpoint, kInterpreterStub, kQuickStub };

constexpr std::string_view to_string(EventSource s) {
  switch (s) {
    case EventSource::kInterpreterCheckpoint: return "checkpoint";
    case EventSource::kInterpreterStub: return "interpreter-stub";
    case EventSource::kQuickStub: return "quick-stub";
  }
  return "?";
}

struct MethodEventInfo {
  ThreadContext& thread;
  const MethodRecord& method;
  MethodEvent kind;
  EventSource source;
  std::span<const std::int64_t> args;
  std::optional<std::int64_t> result;
  // Exit caused by an error propagating out of the method.
  bool abrupt = false;

  const MethodRef& method_ref() const { return method.ref(); }
};

using ListenerCallback = std::function<void(const MethodEventInfo&)>;

struct ListenerRegistration {
  std::string listener_id;
  EventMask event_mask = kEnteredMask;
  ListenerCallback callback;
};

struct InstallationReport {
  std::size_t methods_visited = 0;
  std::size_t entry_points_replaced = 0;
  std::map<std::string, std::size_t> per_class;

  nlohmann::json to_json() const {
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [cls, n] : per_class) per[cls] = n;
    return {{"methods_visited", methods_visited}, {"entry_points_replaced", entry_points_replaced}, {"per_class", per}};
  }
};

/// A callback that threw during dispatch. Faults are recorded, never rethrown.
struct ListenerFault {
  std::string listener_id;
  std::string method;
  std::string message;
};

/// Listener registry, event dispatch, stub installation, and the replaceable
/// tracing-activation handler.
///
/// Dispatch reads an immutable listener list through one atomic load, so it
/// never blocks on registration. Superseded lists are retired rather than
/// freed, which keeps a dispatch that raced with removal valid until the
/// Instrumentation itself is destroyed.
class Instrumentation {
 public:
  using ActivationHandler = std::function<InstallationReport()>;

  explicit Instrumentation(ClassRegistry& registry) : registry_(registry) {
    publish(std::make_unique<ListenerList>());
    restore_activation_handler();
  }

  Instrumentation(const Instrumentation&) = delete;
  Instrumentation& operator=(const Instrumentation&) = delete;

  void add_listener(ListenerRegistration reg) {
    if (reg.event_mask == 0 || (reg.event_mask & ~kAllEventsMask) != 0) {
      throw Error(ErrorCode::kBadArgument, "listener '" + reg.listener_id + "' has an empty or invalid event mask");
    }
    std::lock_guard lock(registration_mu_);
    const ListenerList& cur = *current_.load(std::memory_order_acquire);
    for (const auto& e : cur.entries) {
      if (e->listener_id == reg.listener_id) throw Error(ErrorCode::kDuplicateListener, reg.listener_id);
    }
    auto next = std::make_unique<ListenerList>(cur);
    next->entries.push_back(std::make_shared<const ListenerRegistration>(std::move(reg)));
    next->recount();
    publish(std::move(next));
  }

  void remove_listener(std::string_view listener_id) {
    std::lock_guard lock(registration_mu_);
    const ListenerList& cur = *current_.load(std::memory_order_acquire);
    auto next = std::make_unique<ListenerList>();
    bool found = false;
    for (const auto& e : cur.entries) {
      if (e->listener_id == listener_id) {
        found = true;
      } else {
        next->entries.push_back(e);
      }
    }
    if (!found) throw Error(ErrorCode::kUnknownListener, std::string(listener_id));
    next->recount();
    publish(std::move(next));
  }

  bool has_listener(std::string_view listener_id) const {
    for (const auto& e : current_.load(std::memory_order_acquire)->entries) {
      if (e->listener_id == listener_id) return true;
    }
    return false;
  }

  std::size_t listener_count() const { return current_.load(std::memory_order_acquire)->entries.size(); }

  bool has_method_entry_listeners() const noexcept {
    return current_.load(std::memory_order_acquire)->entry_listeners > 0;
  }

  bool has_method_exit_listeners() const noexcept {
    return current_.load(std::memory_order_acquire)->exit_listeners > 0;
  }

  void method_enter_event(ThreadContext& thread, const MethodRecord& method, EventSource source,
                          std::span<const std::int64_t> args) {
    MethodEventInfo info{thread, method, MethodEvent::kEntered, source, args, std::nullopt, false};
    dispatch(info);
  }

  void method_exit_event(ThreadContext& thread, const MethodRecord& method, EventSource source,
                         std::span<const std::int64_t> args, std::optional<std::int64_t> result, bool abrupt) {
    MethodEventInfo info{thread, method, MethodEvent::kExited, source, args, result, abrupt};
    dispatch(info);
  }

  /// Points `method` at an instrumentation stub. The original entry point is
  /// saved only by the first installation, so any number of installs followed
  /// by one restore returns to the pre-install state.
  void install_stubs_for_method(MethodRecord& method, EntryPoint stub) {
    if (!is_instrumentation_stub(stub)) {
      throw Error(ErrorCode::kInvalidStub, std::string(to_string(stub)) + " is not an instrumentation stub");
    }
    std::lock_guard lock(slot_mu_);
    if (stub == EntryPoint::kQuickStub && !method.is_compiled()) {
      throw Error(ErrorCode::kInvalidStub, "quick stub requires compiled code: " + method.ref().to_string());
    }
    install_locked(method, stub);
  }

  void install_stubs_for_method(const MethodRef& ref, EntryPoint stub) {
    install_stubs_for_method(registry_.get(ref), stub);
  }

  /// Returns `method` to its saved original entry point. False when nothing
  /// was saved.
  bool restore_entry_point(MethodRecord& method) {
    std::lock_guard lock(slot_mu_);
    return restore_locked(method);
  }

  /// The native global installation: every loaded method, compiled or not,
  /// is pointed at the interpreter stub. Methods transition one at a time.
  InstallationReport enable_method_tracing_native() {
    InstallationReport report;
    std::lock_guard lock(slot_mu_);
    for (MethodRecord* rec : registry_.records()) {
      ++report.methods_visited;
      install_locked(*rec, EntryPoint::kInterpreterStub);
      ++report.entry_points_replaced;
      ++report.per_class[rec->ref().class_name];
    }
    return report;
  }

  /// Restores every method holding a saved original. Returns the count.
  std::size_t disable_method_tracing_native() {
    std::size_t restored = 0;
    std::lock_guard lock(slot_mu_);
    for (MethodRecord* rec : registry_.records()) {
      if (restore_locked(*rec)) ++restored;
    }
    return restored;
  }

  /// Registers `listener`, then runs the activation handler slot. With the
  /// default handler this is the full global installation; with a no-op
  /// handler it only turns on event delivery.
  InstallationReport native_trace_start(ListenerRegistration listener) {
    add_listener(std::move(listener));
    ActivationHandler handler;
    {
      std::lock_guard lock(handler_mu_);
      handler = handler_;
    }
    return handler();
  }

  void replace_activation_handler(std::string name, ActivationHandler handler) {
    std::lock_guard lock(handler_mu_);
    handler_name_ = std::move(name);
    handler_ = std::move(handler);
    handler_is_default_ = false;
  }

  void restore_activation_handler() {
    std::lock_guard lock(handler_mu_);
    handler_name_ = "EnableMethodTracing";
    handler_ = [this] { return enable_method_tracing_native(); };
    handler_is_default_ = true;
  }

  bool activation_handler_is_default() const {
    std::lock_guard lock(handler_mu_);
    return handler_is_default_;
  }

  std::string activation_handler_name() const {
    std::lock_guard lock(handler_mu_);
    return handler_name_;
  }

  /// Events dispatched (entry and exit) since construction.
  std::uint64_t events_dispatched() const { return events_dispatched_.load(std::memory_order_relaxed); }

  std::uint64_t fault_count() const { return fault_count_.load(std::memory_order_relaxed); }

  std::vector<ListenerFault> faults() const {
    std::lock_guard lock(fault_mu_);
    return faults_;
  }

 private:
  struct ListenerList {
    std::vector<std::shared_ptr<const ListenerRegistration>> entries;
    std::size_t entry_listeners = 0;
    std::size_t exit_listeners = 0;

    void recount() {
      entry_listeners = exit_listeners = 0;
      for (const auto& e : entries) {
        if (e->event_mask & kEnteredMask) ++entry_listeners;
        if (e->event_mask & kExitedMask) ++exit_listeners;
      }
    }
  };

  static constexpr std::size_t kMaxRecordedFaults = 1024;

  void publish(std::unique_ptr<ListenerList> list) {
    current_.store(list.get(), std::memory_order_release);
    lists_.push_back(std::move(list));
  }

  void dispatch(const MethodEventInfo& info) {
    const ListenerList* list = current_.load(std::memory_order_acquire);
    events_dispatched_.fetch_add(1, std::memory_order_relaxed);
    const auto bit = static_cast<EventMask>(info.kind);
    for (const auto& e : list->entries) {
      if (!(e->event_mask & bit)) continue;
      try {
        e->callback(info);
      } catch (const std::exception& ex) {
        record_fault(*e, info, ex.what());
      } catch (...) {
        record_fault(*e, info, "unknown exception");
      }
    }
  }

  void record_fault(const ListenerRegistration& reg, const MethodEventInfo& info, std::string message) {
    fault_count_.fetch_add(1, std::memory_order_relaxed);
    spdlog::warn("listener '{}' failed on {} of {}: {}", reg.listener_id, to_string(info.kind),
                 info.method.ref().to_string(), message);
    std::lock_guard lock(fault_mu_);
    if (faults_.size() < kMaxRecordedFaults) {
      faults_.push_back(ListenerFault{reg.listener_id, info.method.ref().to_string(), std::move(message)});
    }
  }

  void install_locked(MethodRecord& method, EntryPoint stub) {
    if (!method.has_saved_.load(std::memory_order_relaxed)) {
      method.original_.store(method.entry_.load(std::memory_order_relaxed), std::memory_order_relaxed);
      method.has_saved_.store(true, std::memory_order_release);
    }
    method.entry_.store(stub, std::memory_order_release);
  }

  bool restore_locked(MethodRecord& method) {
    if (!method.has_saved_.load(std::memory_order_relaxed)) return false;
    EntryPoint original = method.original_.load(std::memory_order_relaxed);
    if (original == EntryPoint::kInterpreterBridge && method.is_compiled()) {
      spdlog::warn("{} was compiled while traced; restoring its saved interpreter entry",
                   method.ref().to_string());
    }
    method.entry_.store(original, std::memory_order_release);
    method.has_saved_.store(false, std::memory_order_release);
    return true;
  }

  friend class Vm;

  ClassRegistry& registry_;

  std::mutex registration_mu_;
  std::atomic<const ListenerList*> current_{nullptr};
  std::vector<std::unique_ptr<const ListenerList>> lists_;

  // Serializes entry-point slot writers (stub installs, restores, JIT).
  std::mutex slot_mu_;

  mutable std::mutex handler_mu_;
  ActivationHandler handler_;
  std::string handler_name_;
  bool handler_is_default_ = true;

  std::atomic<std::uint64_t> events_dispatched_{0};
  std::atomic<std::uint64_t> fault_count_{0};
  mutable std::mutex fault_mu_;
  std::vector<ListenerFault> faults_;
};

}  // namespace xtrace
