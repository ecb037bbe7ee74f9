// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "xtrace/bytecode.hpp"
#include "xtrace/error.hpp"
#include "xtrace/method_ref.hpp"

namespace xtrace {

/// How a call to a method is dispatched. Only the instrumentation layer and
/// the trace engine install the two stub variants.
enum class EntryPoint : std::uint8_t {
  kInterpreterBridge,
  kCompiledDirect,
  kInterpreterStub,
  kQuickStub,
};

constexpr std::string_view to_string(EntryPoint ep) {
  switch (ep) {
    case EntryPoint::kInterpreterBridge: return "InterpreterBridge";
    case EntryPoint::kCompiledDirect: return "CompiledDirect";
    case EntryPoint::kInterpreterStub: return "InstrumentationInterpreterStub";
    case EntryPoint::kQuickStub: return "InstrumentationQuickStub";
  }
  return "?";
}

constexpr bool is_instrumentation_stub(EntryPoint ep) {
  return ep == EntryPoint::kInterpreterStub || ep == EntryPoint::kQuickStub;
}

enum class CompilationState : std::uint8_t { kInterpreted, kCompiled };

constexpr std::string_view to_string(CompilationState s) {
  return s == CompilationState::kCompiled ? "Compiled" : "Interpreted";
}

/// Argument or return value as seen by capture actions: plain integers, or the
/// text behind an interned string handle.
using ArgValue = std::variant<std::int64_t, std::string>;

class Vm;
class ThreadContext;
class MethodRecord;

/// Lowered operations. Suffixes name operand kinds: S = frame slot,
/// I = immediate.
enum class LoweredKind : std::uint8_t {
  kSet,
  kMove,
  kAddSS,
  kAddSI,
  kSubSS,
  kSubSI,
  kSubIS,
  kMulSS,
  kMulSI,
  kJz,
  kJmp,
  kCall,
  kRetS,
  kRetI,
  kUnreachable,
};

/// A call target in compiled code. Resolved on first execution and cached;
/// registry records are never replaced, so the cache never goes stale.
struct CallSite {
  explicit CallSite(MethodRef r) : ref(std::move(r)) {}
  MethodRef ref;
  mutable std::atomic<MethodRecord*> resolved{nullptr};
};

struct LoweredOp {
  LoweredKind kind = LoweredKind::kUnreachable;
  std::int32_t dst = 0;
  std::int32_t a = 0;
  std::int32_t b = 0;
  // Jump destination as an index from the first op.
  std::int32_t target = 0;
  std::int64_t imm = 0;
  CallSite* call = nullptr;
  // Address of the op's handler, bound when the code is installed.
  const void* handler = nullptr;
};

/// Register-form code produced by the JIT: every operand-stack position is a
/// fixed frame slot, so execution needs no stack pointer. Ops are executed as
/// direct-threaded code: straight-line ops fall through to the next element,
/// only jumps carry a target.
struct LoweredCode {
  std::vector<LoweredOp> ops;
  std::vector<std::unique_ptr<CallSite>> call_sites;
  std::int32_t frame_size = 0;
  std::int32_t arity = 0;
  std::int32_t locals_begin = 0;
  std::int32_t locals_end = 0;
};

/// A loaded method: bytecode, compilation state and the mutable entry-point
/// slot every call dispatches through.
class MethodRecord {
 public:
  MethodRecord(MethodRef ref, std::vector<Instruction> code, CodeShape shape)
      : ref_(std::move(ref)), code_(std::move(code)), shape_(std::move(shape)) {}

  MethodRecord(const MethodRecord&) = delete;
  MethodRecord& operator=(const MethodRecord&) = delete;

  const MethodRef& ref() const { return ref_; }
  const std::vector<Instruction>& bytecode() const { return code_; }
  const CodeShape& shape() const { return shape_; }

  EntryPoint entry_point() const { return entry_.load(std::memory_order_acquire); }

  /// The entry point saved by the first stub installation, if one is pending
  /// restoration.
  std::optional<EntryPoint> saved_original() const {
    if (!has_saved_.load(std::memory_order_acquire)) return std::nullopt;
    return original_.load(std::memory_order_acquire);
  }

  const LoweredCode* lowered_code() const { return lowered_.load(std::memory_order_acquire); }

  CompilationState compilation_state() const {
    return lowered_code() ? CompilationState::kCompiled : CompilationState::kInterpreted;
  }
  bool is_compiled() const { return lowered_code() != nullptr; }

 private:
  friend class Vm;
  friend class Instrumentation;

  MethodRef ref_;
  std::vector<Instruction> code_;
  CodeShape shape_;
  std::atomic<EntryPoint> entry_{EntryPoint::kInterpreterBridge};
  std::atomic<EntryPoint> original_{EntryPoint::kInterpreterBridge};
  std::atomic<bool> has_saved_{false};
  std::atomic<const LoweredCode*> lowered_{nullptr};
  std::unique_ptr<const LoweredCode> lowered_owner_;
};

/// Observable per-method state used for whole-registry diffs.
struct MethodState {
  EntryPoint entry_point;
  CompilationState compilation;
  std::optional<EntryPoint> saved_original;

  friend bool operator==(const MethodState&, const MethodState&) = default;
};

using RegistrySnapshot = std::map<std::string, MethodState>;

/// Names of methods whose state differs between two snapshots (including
/// methods present in only one of them).
inline std::vector<std::string> diff(const RegistrySnapshot& before, const RegistrySnapshot& after) {
  std::vector<std::string> out;
  auto a = before.begin();
  auto b = after.begin();
  while (a != before.end() || b != after.end()) {
    if (b == after.end() || (a != before.end() && a->first < b->first)) {
      out.push_back(a->first);
      ++a;
    } else if (a == before.end() || b->first < a->first) {
      out.push_back(b->first);
      ++b;
    } else {
      if (!(a->second == b->second)) out.push_back(a->first);
      ++a;
      ++b;
    }
  }
  return out;
}

/// All loaded methods. Records are append-only and address-stable; lookups
/// take a shared lock so classes may be loaded while other threads run.
class ClassRegistry {
 public:
  ClassRegistry() = default;
  ClassRegistry(const ClassRegistry&) = delete;
  ClassRegistry& operator=(const ClassRegistry&) = delete;

  MethodRecord* find(const MethodRef& ref) const {
    std::shared_lock lock(mu_);
    auto it = by_ref_.find(ref);
    return it == by_ref_.end() ? nullptr : it->second;
  }

  MethodRecord& get(const MethodRef& ref) const {
    auto* rec = find(ref);
    if (!rec) throw Error(ErrorCode::kMethodNotFound, ref.to_string());
    return *rec;
  }

  std::size_t size() const {
    std::shared_lock lock(mu_);
    return records_.size();
  }

  /// Stable pointers to every record, in load order.
  std::vector<MethodRecord*> records() const {
    std::shared_lock lock(mu_);
    std::vector<MethodRecord*> out;
    out.reserve(records_.size());
    for (auto& r : records_) out.push_back(const_cast<MethodRecord*>(&r));
    return out;
  }

  /// Records with the given simple method name (for elided-name matching).
  std::vector<MethodRecord*> with_method_name(std::string_view name) const {
    std::shared_lock lock(mu_);
    std::vector<MethodRecord*> out;
    for (auto& r : records_) {
      if (r.ref().method_name == name) out.push_back(const_cast<MethodRecord*>(&r));
    }
    return out;
  }

  RegistrySnapshot snapshot() const {
    std::shared_lock lock(mu_);
    RegistrySnapshot snap;
    for (const auto& r : records_) {
      snap.emplace(r.ref().to_string(), MethodState{r.entry_point(), r.compilation_state(), r.saved_original()});
    }
    return snap;
  }

 private:
  friend class Vm;

  MethodRecord& add(MethodRef ref, std::vector<Instruction> code, CodeShape shape) {
    std::unique_lock lock(mu_);
    if (by_ref_.count(ref)) {
      throw Error(ErrorCode::kValidation, "duplicate method signature " + ref.to_string());
    }
    auto& rec = records_.emplace_back(ref, std::move(code), std::move(shape));
    by_ref_.emplace(std::move(ref), &rec);
    return rec;
  }

  mutable std::shared_mutex mu_;
  std::deque<MethodRecord> records_;
  std::unordered_map<MethodRef, MethodRecord*> by_ref_;
};

/// Interned string constants. Handles are small non-negative integers.
class StringPool {
 public:
  std::int64_t intern(std::string_view s) {
    std::lock_guard lock(mu_);
    auto it = index_.find(std::string(s));
    if (it != index_.end()) return it->second;
    auto handle = static_cast<std::int64_t>(strings_.size());
    strings_.emplace_back(s);
    index_.emplace(strings_.back(), handle);
    return handle;
  }

  std::optional<std::string> lookup(std::int64_t handle) const {
    std::lock_guard lock(mu_);
    if (handle < 0 || handle >= static_cast<std::int64_t>(strings_.size())) return std::nullopt;
    return strings_[static_cast<std::size_t>(handle)];
  }

 private:
  mutable std::mutex mu_;
  std::deque<std::string> strings_;
  std::unordered_map<std::string, std::int64_t> index_;
};

struct CallFrame {
  MethodRef method_ref;
  // Frames pushed by an interceptor rather than by a call.
  bool synthetic = false;

  friend bool operator==(const CallFrame&, const CallFrame&) = default;
};

/// An in-flight traced call awaiting its exit event.
struct PendingCall {
  const MethodRecord* method = nullptr;
  std::size_t depth = 0;
  std::int64_t enter_ns = 0;
  std::optional<std::vector<ArgValue>> args;
};

/// Per-thread interceptor bookkeeping, owned by whichever proxy is active.
struct InterceptorState {
  bool active = false;
  std::vector<PendingCall> pending;
};

/// A VM thread: its call stack and per-thread tracing state. Only the owning
/// OS thread may touch it.
class ThreadContext {
 public:
  ThreadContext(std::uint32_t id, std::size_t max_depth) : id_(id), max_depth_(max_depth) {
    frames_.reserve(256);
  }

  std::uint32_t id() const { return id_; }
  std::size_t depth() const { return frames_.size(); }
  std::size_t max_depth() const { return max_depth_; }

  void push_frame(const MethodRef& ref, bool synthetic = false) {
    if (frames_.size() >= max_depth_) {
      throw Error(ErrorCode::kStackOverflow,
                  "depth " + std::to_string(max_depth_) + " exceeded calling " + ref.to_string());
    }
    frames_.push_back(Frame{&ref, synthetic});
  }

  void pop_frame() { frames_.pop_back(); }

  /// Innermost frame first.
  std::vector<CallFrame> current_stack() const {
    std::vector<CallFrame> out;
    out.reserve(frames_.size());
    for (auto it = frames_.rbegin(); it != frames_.rend(); ++it) out.push_back(CallFrame{*it->ref, it->synthetic});
    return out;
  }

  // Bodies executed per tier on this thread.
  std::uint64_t interpreted_bodies = 0;
  std::uint64_t compiled_bodies = 0;

  InterceptorState interceptor;

 private:
  struct Frame {
    const MethodRef* ref;
    bool synthetic;
  };

  std::uint32_t id_;
  std::size_t max_depth_;
  std::vector<Frame> frames_;
};

/// Pushes a frame for the lifetime of the guard; pops on any exit path.
class FrameGuard {
 public:
  FrameGuard(ThreadContext& thread, const MethodRef& ref, bool synthetic = false) : thread_(thread) {
    thread_.push_frame(ref, synthetic);
  }
  ~FrameGuard() { thread_.pop_frame(); }
  FrameGuard(const FrameGuard&) = delete;
  FrameGuard& operator=(const FrameGuard&) = delete;

 private:
  ThreadContext& thread_;
};

}  // namespace xtrace
