// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <mutex>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "xtrace/runtime.hpp"
#include "xtrace/vm.hpp"

namespace xtrace {

/// Per-interception behaviours. The numeric codes are part of the config wire
/// format.
enum class TraceAction : int {
  kCaptureStack = 1,
  kCaptureArgs = 2,
  kTimeMethod = 3,
};

inline std::optional<TraceAction> action_from_code(std::int64_t code) {
  switch (code) {
    case 1: return TraceAction::kCaptureStack;
    case 2: return TraceAction::kCaptureArgs;
    case 3: return TraceAction::kTimeMethod;
    default: return std::nullopt;
  }
}

constexpr std::string_view to_string(TraceAction a) {
  switch (a) {
    case TraceAction::kCaptureStack: return "capture-stack";
    case TraceAction::kCaptureArgs: return "capture-args";
    case TraceAction::kTimeMethod: return "time-method";
  }
  return "?";
}

inline std::int64_t monotonic_ns() {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

/// The frame pushed around action execution.
inline const MethodRef& interceptor_frame() {
  static const MethodRef kFrame{"XTrace", "intercept", {}};
  return kFrame;
}

// ---------------------------------------------------------------------------
// Redaction

inline constexpr std::string_view kEmailToken = "[REDACTED:email]";
inline constexpr std::string_view kDigitsToken = "[REDACTED:digits]";
/// Digit runs at least this long are masked.
inline constexpr std::size_t kMinDigitRun = 9;

namespace detail {

inline const std::regex& email_pattern() {
  static const std::regex kEmail(R"([A-Za-z0-9._%+\-]+@[A-Za-z0-9.\-]+\.[A-Za-z]{2,})");
  return kEmail;
}

inline std::string mask_digit_runs(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    if (std::isdigit(static_cast<unsigned char>(s[i]))) {
      std::size_t j = i;
      while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
      if (j - i >= kMinDigitRun) {
        out += kDigitsToken;
      } else {
        out.append(s.substr(i, j - i));
      }
      i = j;
    } else {
      out.push_back(s[i++]);
    }
  }
  return out;
}

}  // namespace detail

/// Masks email-shaped substrings, then digit runs of length >= 9. The tokens
/// contain neither digits nor characters an address can contain next to
/// `@`, so the result is a fixed point.
inline std::string redact_text(std::string_view text) {
  std::string emails = std::regex_replace(std::string(text), detail::email_pattern(), std::string(kEmailToken));
  return detail::mask_digit_runs(emails);
}

inline ArgValue redact(const ArgValue& value) {
  if (const auto* s = std::get_if<std::string>(&value)) return redact_text(*s);
  return value;
}

inline std::vector<ArgValue> redact(std::span<const ArgValue> values) {
  std::vector<ArgValue> out;
  out.reserve(values.size());
  for (const auto& v : values) out.push_back(redact(v));
  return out;
}

/// True if `text` still contains something the redactor would mask.
inline bool contains_pii(std::string_view text) {
  std::string s(text);
  if (std::regex_search(s, detail::email_pattern())) return true;
  std::size_t run = 0;
  for (char c : s) {
    run = std::isdigit(static_cast<unsigned char>(c)) ? run + 1 : 0;
    if (run >= kMinDigitRun) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Events

struct StackPayload {
  std::vector<CallFrame> frames;
};

struct ArgsPayload {
  std::vector<ArgValue> args;
  std::optional<ArgValue> result;
  bool abrupt = false;
};

struct TimingPayload {
  std::int64_t duration_ns = 0;
  std::size_t depth = 0;
};

using EventPayload = std::variant<StackPayload, ArgsPayload, TimingPayload>;

struct TraceEvent {
  std::uint64_t sequence_no = 0;
  std::int64_t timestamp_ns = 0;
  MethodRef method_ref;
  std::uint32_t thread_id = 0;
  TraceAction action_kind = TraceAction::kCaptureStack;
  EventPayload payload;
};

inline nlohmann::json to_json(const ArgValue& v) {
  if (const auto* s = std::get_if<std::string>(&v)) return *s;
  return std::get<std::int64_t>(v);
}

/// One NDJSON line: {"seq","ts_ns","method","action","payload"}.
inline nlohmann::json to_json(const TraceEvent& ev) {
  nlohmann::json payload;
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, StackPayload>) {
          auto frames = nlohmann::json::array();
          for (const auto& f : p.frames) frames.push_back(f.method_ref.to_string());
          payload = {{"frames", frames}};
        } else if constexpr (std::is_same_v<T, ArgsPayload>) {
          auto args = nlohmann::json::array();
          for (const auto& a : p.args) args.push_back(to_json(a));
          payload = {{"args", args}};
          if (p.result) payload["return"] = to_json(*p.result);
          if (p.abrupt) payload["abrupt"] = true;
        } else {
          payload = {{"duration_ns", p.duration_ns}, {"depth", p.depth}};
        }
      },
      ev.payload);
  return {{"seq", ev.sequence_no},
          {"ts_ns", ev.timestamp_ns},
          {"method", ev.method_ref.to_string()},
          {"action", static_cast<int>(ev.action_kind)},
          {"payload", payload}};
}

inline std::string to_ndjson(std::span<const TraceEvent> events) {
  std::string out;
  for (const auto& ev : events) {
    out += to_json(ev).dump();
    out.push_back('\n');
  }
  return out;
}

struct DrainResult {
  std::vector<TraceEvent> events;
  std::uint64_t drop_count = 0;
};

/// Bounded in-memory event buffer. Appends never wait on anything but the
/// buffer lock; overflow is counted, never silent. Sequence numbers are
/// assigned to accepted events only, so they are gap-free.
class EventSink {
 public:
  static constexpr std::size_t kDefaultCapacity = 65'536;

  explicit EventSink(std::size_t capacity = kDefaultCapacity) : capacity_(capacity) {}

  /// Returns false when the event was dropped.
  bool append(TraceEvent ev) {
    std::lock_guard lock(mu_);
    ++emitted_;
    if (buffer_.size() >= capacity_) {
      ++dropped_;
      return false;
    }
    ev.sequence_no = next_seq_++;
    buffer_.push_back(std::move(ev));
    return true;
  }

  DrainResult drain() {
    std::lock_guard lock(mu_);
    DrainResult out;
    out.events.assign(std::make_move_iterator(buffer_.begin()), std::make_move_iterator(buffer_.end()));
    buffer_.clear();
    drained_ += out.events.size();
    out.drop_count = dropped_;
    return out;
  }

  std::size_t capacity() const { return capacity_; }

  std::size_t buffered() const {
    std::lock_guard lock(mu_);
    return buffer_.size();
  }
  std::uint64_t emitted() const {
    std::lock_guard lock(mu_);
    return emitted_;
  }
  std::uint64_t drained() const {
    std::lock_guard lock(mu_);
    return drained_;
  }
  std::uint64_t drop_count() const {
    std::lock_guard lock(mu_);
    return dropped_;
  }

 private:
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::deque<TraceEvent> buffer_;
  std::uint64_t next_seq_ = 0;
  std::uint64_t emitted_ = 0;
  std::uint64_t drained_ = 0;
  std::uint64_t dropped_ = 0;
};

// ---------------------------------------------------------------------------
// Actions

/// Stack as seen from inside the interceptor: the synthetic frame, the
/// traced method, then its callers outward.
inline TraceEvent action_capture_stack(const ThreadContext& thread, const MethodRecord& method) {
  return TraceEvent{0, monotonic_ns(), method.ref(), thread.id(), TraceAction::kCaptureStack,
                    StackPayload{thread.current_stack()}};
}

/// Decodes arguments by parameter type and redacts them. `args` is not
/// modified.
inline std::vector<ArgValue> capture_arg_values(const Vm& vm, const MethodRecord& method,
                                                std::span<const std::int64_t> args) {
  std::vector<ArgValue> values;
  values.reserve(args.size());
  const auto& params = method.ref().params;
  for (std::size_t i = 0; i < args.size(); ++i) {
    values.push_back(redact(vm.decode(i < params.size() ? params[i] : "int", args[i])));
  }
  return values;
}

inline TraceEvent action_capture_args(const Vm& vm, const ThreadContext& thread, const MethodRecord& method,
                                      std::span<const std::int64_t> args) {
  return TraceEvent{0, monotonic_ns(), method.ref(), thread.id(), TraceAction::kCaptureArgs,
                    ArgsPayload{capture_arg_values(vm, method, args), std::nullopt, false}};
}

/// One side of a timed call. Entry and exit match when they come from the
/// same thread, the same method and the same stack depth.
struct CallMark {
  const MethodRecord* method = nullptr;
  std::uint32_t thread_id = 0;
  std::size_t depth = 0;
  std::int64_t timestamp_ns = 0;
};

/// Pairs an entry with its exit. Returns nullopt (and the caller drops the
/// exit) when they do not belong to the same call instance.
inline std::optional<TraceEvent> action_time_method(const CallMark& enter, const CallMark& exit) {
  if (enter.method != exit.method || enter.thread_id != exit.thread_id || enter.depth != exit.depth ||
      enter.method == nullptr) {
    return std::nullopt;
  }
  std::int64_t duration = exit.timestamp_ns - enter.timestamp_ns;
  if (duration < 0) duration = 0;
  return TraceEvent{0, exit.timestamp_ns, enter.method->ref(), exit.thread_id, TraceAction::kTimeMethod,
                    TimingPayload{duration, exit.depth}};
}

}  // namespace xtrace
