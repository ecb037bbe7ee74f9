// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xtrace/bytecode.hpp"
#include "xtrace/error.hpp"
#include "xtrace/instrumentation.hpp"
#include "xtrace/runtime.hpp"

namespace xtrace {

struct VmOptions {
  std::size_t max_stack_depth = 10'000;
};

// Stub handlers; defined in stubs.hpp.
std::int64_t quick_instrumentation_entry(Vm& vm, ThreadContext& thread, const MethodRecord& method,
                                         std::span<const std::int64_t> args);
std::int64_t interpreter_stub_entry(Vm& vm, ThreadContext& thread, const MethodRecord& method,
                                    std::span<const std::int64_t> args);

namespace detail {

[[noreturn]] inline void fatal(const char* what, const MethodRef& ref) {
  std::fprintf(stderr, "xtrace: fatal: %s in %s\n", what, ref.to_string().c_str());
  std::abort();
}

inline std::int64_t wrap_add(std::int64_t a, std::int64_t b) {
  return static_cast<std::int64_t>(static_cast<std::uint64_t>(a) + static_cast<std::uint64_t>(b));
}
inline std::int64_t wrap_sub(std::int64_t a, std::int64_t b) {
  return static_cast<std::int64_t>(static_cast<std::uint64_t>(a) - static_cast<std::uint64_t>(b));
}
inline std::int64_t wrap_mul(std::int64_t a, std::int64_t b) {
  return static_cast<std::int64_t>(static_cast<std::uint64_t>(a) * static_cast<std::uint64_t>(b));
}

}  // namespace detail

/// The virtual machine: class registry, instrumentation, two execution tiers,
/// and the entry-point dispatch that joins them.
class Vm {
 public:
  using ClassLoadHook = std::function<void(std::span<MethodRecord* const>)>;

  explicit Vm(VmOptions options = {}) : options_(options), instrumentation_(registry_) {}

  Vm(const Vm&) = delete;
  Vm& operator=(const Vm&) = delete;

  const VmOptions& options() const { return options_; }
  ClassRegistry& registry() { return registry_; }
  const ClassRegistry& registry() const { return registry_; }
  Instrumentation& instrumentation() { return instrumentation_; }
  StringPool& strings() { return strings_; }
  const StringPool& strings() const { return strings_; }

  ThreadContext new_thread() { return ThreadContext(next_thread_id_.fetch_add(1), options_.max_stack_depth); }

  /// Parses, verifies and loads `source`; returns the number of methods
  /// added. All-or-nothing: a parse or verification error loads nothing.
  std::size_t load_program(std::string_view source) { return load(parse_program(source)); }

  std::size_t load(const Program& program) {
    struct Pending {
      MethodRef ref;
      std::vector<Instruction> code;
      CodeShape shape;
    };
    std::vector<Pending> pending;
    std::set<MethodRef> seen;
    for (const auto& cls : program.classes) {
      for (const auto& m : cls.methods) {
        if (registry_.find(m.ref) || !seen.insert(m.ref).second) {
          throw Error(ErrorCode::kValidation, "duplicate method signature " + m.ref.to_string());
        }
        Pending p{m.ref, m.code, verify_method(m.ref, m.code)};
        for (auto& ins : p.code) {
          if (ins.opcode == Opcode::kPushConst && ins.literal) ins.operand = strings_.intern(*ins.literal);
        }
        pending.push_back(std::move(p));
      }
    }
    std::vector<MethodRecord*> added;
    added.reserve(pending.size());
    for (auto& p : pending) {
      added.push_back(&registry_.add(std::move(p.ref), std::move(p.code), std::move(p.shape)));
    }
    std::vector<ClassLoadHook> hooks;
    {
      std::lock_guard lock(hooks_mu_);
      for (const auto& [id, hook] : hooks_) hooks.push_back(hook);
    }
    for (auto& hook : hooks) hook(added);
    return added.size();
  }

  /// Called with the newly loaded records after every successful load.
  /// Returns an id for remove_class_load_hook.
  std::uint64_t add_class_load_hook(ClassLoadHook hook) {
    std::lock_guard lock(hooks_mu_);
    auto id = next_hook_id_++;
    hooks_.emplace(id, std::move(hook));
    return id;
  }

  void remove_class_load_hook(std::uint64_t id) {
    std::lock_guard lock(hooks_mu_);
    hooks_.erase(id);
  }

  /// Lowers `method` to register form. The entry point moves to
  /// CompiledDirect only if it was the interpreter bridge; an installed stub
  /// is left in place.
  void jit_compile(MethodRecord& method) {
    std::lock_guard lock(instrumentation_.slot_mu_);
    if (!method.lowered_owner_) {
      auto code = lower(method);
      bind_handlers(*code);
      method.lowered_owner_ = std::move(code);
      method.lowered_.store(method.lowered_owner_.get(), std::memory_order_release);
    }
    EntryPoint expected = EntryPoint::kInterpreterBridge;
    method.entry_.compare_exchange_strong(expected, EntryPoint::kCompiledDirect, std::memory_order_acq_rel);
  }

  void jit_compile(const MethodRef& ref) { jit_compile(registry_.get(ref)); }

  std::int64_t invoke(ThreadContext& thread, const MethodRef& ref, std::span<const std::int64_t> args) {
    const MethodRecord& method = registry_.get(ref);
    return dispatch(thread, method, args);
  }

  std::int64_t invoke(ThreadContext& thread, const MethodRef& ref, std::initializer_list<std::int64_t> args) {
    return invoke(thread, ref, std::span<const std::int64_t>(args.begin(), args.size()));
  }

  /// Pushes a frame for `method` and runs it through its current entry
  /// point. The frame is popped on every exit path.
  std::int64_t dispatch(ThreadContext& thread, const MethodRecord& method, std::span<const std::int64_t> args) {
    if (args.size() != method.ref().arity()) {
      throw Error(ErrorCode::kArityMismatch, method.ref().to_string() + " takes " +
                                                 std::to_string(method.ref().arity()) + " arguments, got " +
                                                 std::to_string(args.size()));
    }
    FrameGuard frame(thread, method.ref());
    switch (method.entry_point()) {
      case EntryPoint::kInterpreterBridge:
        return interpret(thread, method, args);
      case EntryPoint::kCompiledDirect:
        return execute_compiled(thread, method, args);
      case EntryPoint::kInterpreterStub:
        return interpreter_stub_entry(*this, thread, method, args);
      case EntryPoint::kQuickStub:
        return quick_instrumentation_entry(*this, thread, method, args);
    }
    torn_entry_observations_.fetch_add(1, std::memory_order_relaxed);
    detail::fatal("unnamed entry point", method.ref());
  }

  /// Interpreter tier. Runs the entry checkpoint (listener test, then entry
  /// event) before the first instruction and the exit checkpoint after the
  /// last; stub handlers that already fired events pass `checkpoint = false`.
  std::int64_t interpret(ThreadContext& thread, const MethodRecord& method, std::span<const std::int64_t> args,
                         bool checkpoint = true) {
    if (checkpoint && instrumentation_.has_method_entry_listeners()) {
      instrumentation_.method_enter_event(thread, method, EventSource::kInterpreterCheckpoint, args);
    }
    std::int64_t result;
    try {
      result = run_interpreter(thread, method, args);
    } catch (...) {
      if (checkpoint && instrumentation_.has_method_exit_listeners()) {
        instrumentation_.method_exit_event(thread, method, EventSource::kInterpreterCheckpoint, args, std::nullopt,
                                           true);
      }
      throw;
    }
    if (checkpoint && instrumentation_.has_method_exit_listeners()) {
      instrumentation_.method_exit_event(thread, method, EventSource::kInterpreterCheckpoint, args, result, false);
    }
    return result;
  }

  /// Compiled tier. No listener test: compiled code never reaches the
  /// interpreter checkpoint.
  std::int64_t execute_compiled(ThreadContext& thread, const MethodRecord& method,
                                std::span<const std::int64_t> args) {
    const LoweredCode* code = method.lowered_code();
    if (!code) throw Error(ErrorCode::kNotCompiled, method.ref().to_string());
    return run_lowered(thread, *code, args);
  }

  std::int64_t run_lowered(ThreadContext& thread, const LoweredCode& code, std::span<const std::int64_t> args) {
    ++thread.compiled_bodies;
    constexpr std::int32_t kInlineSlots = 24;
    std::array<std::int64_t, kInlineSlots> inline_slots;
    std::unique_ptr<std::int64_t[]> heap_slots;
    std::int64_t* slots = inline_slots.data();
    if (code.frame_size > kInlineSlots) {
      heap_slots = std::make_unique<std::int64_t[]>(static_cast<std::size_t>(code.frame_size));
      slots = heap_slots.get();
    }
    for (std::int32_t i = 0; i < code.arity; ++i) slots[i] = args[static_cast<std::size_t>(i)];
    for (std::int32_t i = code.locals_begin; i < code.locals_end; ++i) slots[i] = 0;
    return run_ops(&thread, code.ops.data(), slots);
  }

  std::vector<CallFrame> current_stack(const ThreadContext& thread) const { return thread.current_stack(); }

  std::uint64_t torn_entry_observations() const { return torn_entry_observations_.load(std::memory_order_relaxed); }

  /// Decodes a value for display: string-typed parameters carry handles.
  ArgValue decode(std::string_view type, std::int64_t value) const {
    if (is_string_type(type)) {
      if (auto s = strings_.lookup(value)) return *s;
    }
    return value;
  }

 private:
  std::int64_t run_interpreter(ThreadContext& thread, const MethodRecord& method, std::span<const std::int64_t> args) {
    ++thread.interpreted_bodies;
    const auto& code = method.bytecode();
    const auto& shape = method.shape();
    std::vector<std::int64_t> stack;
    stack.reserve(static_cast<std::size_t>(shape.max_stack));
    std::vector<std::int64_t> locals(static_cast<std::size_t>(shape.num_locals), 0);

    auto pop = [&]() {
      if (stack.empty()) detail::fatal("operand stack underflow", method.ref());
      std::int64_t v = stack.back();
      stack.pop_back();
      return v;
    };

    std::size_t pc = 0;
    while (true) {
      if (pc >= code.size()) detail::fatal("pc out of bounds", method.ref());
      const Instruction& ins = code[pc];
      switch (ins.opcode) {
        case Opcode::kPushConst:
          stack.push_back(ins.operand);
          ++pc;
          break;
        case Opcode::kLoadArg:
          stack.push_back(args[static_cast<std::size_t>(ins.operand)]);
          ++pc;
          break;
        case Opcode::kLoadLocal:
          stack.push_back(locals[static_cast<std::size_t>(ins.operand)]);
          ++pc;
          break;
        case Opcode::kStoreLocal:
          locals[static_cast<std::size_t>(ins.operand)] = pop();
          ++pc;
          break;
        case Opcode::kAdd: {
          auto b = pop();
          auto a = pop();
          stack.push_back(detail::wrap_add(a, b));
          ++pc;
          break;
        }
        case Opcode::kSub: {
          auto b = pop();
          auto a = pop();
          stack.push_back(detail::wrap_sub(a, b));
          ++pc;
          break;
        }
        case Opcode::kMul: {
          auto b = pop();
          auto a = pop();
          stack.push_back(detail::wrap_mul(a, b));
          ++pc;
          break;
        }
        case Opcode::kJumpIfZero:
          pc = pop() == 0 ? static_cast<std::size_t>(static_cast<std::int64_t>(pc) + ins.operand) : pc + 1;
          break;
        case Opcode::kJump:
          pc = static_cast<std::size_t>(static_cast<std::int64_t>(pc) + ins.operand);
          break;
        case Opcode::kCall: {
          // Late binding: resolved on every execution.
          const MethodRecord* target = registry_.find(*ins.callee);
          if (!target) throw Error(ErrorCode::kMethodNotFound, ins.callee->to_string());
          const std::size_t n = ins.callee->arity();
          if (stack.size() < n) detail::fatal("operand stack underflow", method.ref());
          std::int64_t r = dispatch(thread, *target, std::span<const std::int64_t>(stack.data() + stack.size() - n, n));
          stack.resize(stack.size() - n);
          stack.push_back(r);
          ++pc;
          break;
        }
        case Opcode::kReturn:
          return pop();
      }
    }
  }

  MethodRecord& resolve_call_site(const CallSite& site) {
    MethodRecord* target = site.resolved.load(std::memory_order_acquire);
    if (!target) {
      target = registry_.find(site.ref);
      if (!target) throw Error(ErrorCode::kMethodNotFound, site.ref.to_string());
      site.resolved.store(target, std::memory_order_release);
    }
    return *target;
  }

  /// Direct-threaded execution: every handler jumps straight to the handler
  /// of the next op. `op` is the method's first op; called with none,
  /// returns the handler table.
  std::int64_t run_ops(ThreadContext* thread, const LoweredOp* op, std::int64_t* s) {
#if defined(__GNUC__)
    static const void* const kLabels[] = {
        &&l_set, &&l_move, &&l_add_ss, &&l_add_si, &&l_sub_ss, &&l_sub_si, &&l_sub_is, &&l_mul_ss,
        &&l_mul_si, &&l_jz, &&l_jmp, &&l_call, &&l_ret_s, &&l_ret_i, &&l_unreachable,
    };
    static_assert(std::size(kLabels) == static_cast<std::size_t>(LoweredKind::kUnreachable) + 1);
    if (!op) return static_cast<std::int64_t>(reinterpret_cast<std::intptr_t>(kLabels));
    const LoweredOp* const base = op;
#define XTRACE_GOTO(to)  \
  do {                   \
    op = (to);           \
    goto* op->handler;   \
  } while (0)
#define XTRACE_NEXT() XTRACE_GOTO(op + 1)
    goto* op->handler;
  l_set:
    s[op->dst] = op->imm;
    XTRACE_NEXT();
  l_move:
    s[op->dst] = s[op->a];
    XTRACE_NEXT();
  l_add_ss:
    s[op->dst] = detail::wrap_add(s[op->a], s[op->b]);
    XTRACE_NEXT();
  l_add_si:
    s[op->dst] = detail::wrap_add(s[op->a], op->imm);
    XTRACE_NEXT();
  l_sub_ss:
    s[op->dst] = detail::wrap_sub(s[op->a], s[op->b]);
    XTRACE_NEXT();
  l_sub_si:
    s[op->dst] = detail::wrap_sub(s[op->a], op->imm);
    XTRACE_NEXT();
  l_sub_is:
    s[op->dst] = detail::wrap_sub(op->imm, s[op->b]);
    XTRACE_NEXT();
  l_mul_ss:
    s[op->dst] = detail::wrap_mul(s[op->a], s[op->b]);
    XTRACE_NEXT();
  l_mul_si:
    s[op->dst] = detail::wrap_mul(s[op->a], op->imm);
    XTRACE_NEXT();
  l_jz:
    if (s[op->a] == 0) XTRACE_GOTO(base + op->target);
    XTRACE_NEXT();
  l_jmp:
    XTRACE_GOTO(base + op->target);
  l_call:
    s[op->dst] = dispatch(*thread, resolve_call_site(*op->call),
                          std::span<const std::int64_t>(s + op->a, static_cast<std::size_t>(op->b)));
    XTRACE_NEXT();
  l_ret_s:
    return s[op->a];
  l_ret_i:
    return op->imm;
  l_unreachable:
    std::fprintf(stderr, "xtrace: fatal: reached unreachable lowered op\n");
    std::abort();
#undef XTRACE_NEXT
#undef XTRACE_GOTO
#else
    if (!op) return 0;
    const LoweredOp* const base = op;
    for (;;) {
      switch (op->kind) {
        case LoweredKind::kSet: s[op->dst] = op->imm; break;
        case LoweredKind::kMove: s[op->dst] = s[op->a]; break;
        case LoweredKind::kAddSS: s[op->dst] = detail::wrap_add(s[op->a], s[op->b]); break;
        case LoweredKind::kAddSI: s[op->dst] = detail::wrap_add(s[op->a], op->imm); break;
        case LoweredKind::kSubSS: s[op->dst] = detail::wrap_sub(s[op->a], s[op->b]); break;
        case LoweredKind::kSubSI: s[op->dst] = detail::wrap_sub(s[op->a], op->imm); break;
        case LoweredKind::kSubIS: s[op->dst] = detail::wrap_sub(op->imm, s[op->b]); break;
        case LoweredKind::kMulSS: s[op->dst] = detail::wrap_mul(s[op->a], s[op->b]); break;
        case LoweredKind::kMulSI: s[op->dst] = detail::wrap_mul(s[op->a], op->imm); break;
        case LoweredKind::kJz:
          if (s[op->a] == 0) {
            op = base + op->target;
            continue;
          }
          break;
        case LoweredKind::kJmp: op = base + op->target; continue;
        case LoweredKind::kCall:
          s[op->dst] = dispatch(*thread, resolve_call_site(*op->call),
                                std::span<const std::int64_t>(s + op->a, static_cast<std::size_t>(op->b)));
          break;
        case LoweredKind::kRetS: return s[op->a];
        case LoweredKind::kRetI: return op->imm;
        case LoweredKind::kUnreachable: std::abort();
      }
      ++op;
    }
#endif
  }

  void bind_handlers(LoweredCode& code) {
    const auto* labels = reinterpret_cast<const void* const*>(static_cast<std::intptr_t>(run_ops(nullptr, nullptr, nullptr)));
    for (auto& op : code.ops) {
      op.handler = labels ? labels[static_cast<std::size_t>(op.kind)] : nullptr;
    }
  }

  /// Lowers verified bytecode to register form.
  ///
  /// Frame layout is [args | locals | operand stack]; the verifier's per-pc
  /// depths give every stack position a fixed slot. Within a basic block the
  /// operand stack is tracked symbolically (slot references and constants),
  /// so loads and constants become operands of the op that consumes them
  /// instead of separate moves. At block boundaries and calls the symbolic
  /// stack is written back to its canonical slots.
  static std::unique_ptr<LoweredCode> lower(const MethodRecord& method) {
    const auto& code = method.bytecode();
    const auto& shape = method.shape();
    auto out = std::make_unique<LoweredCode>();
    const auto arity = static_cast<std::int32_t>(method.ref().arity());
    const std::int32_t locals = arity;
    const std::int32_t stack = arity + shape.num_locals;
    out->arity = arity;
    out->locals_begin = locals;
    out->locals_end = stack;
    out->frame_size = stack + shape.max_stack;

    const std::size_t n = code.size();
    std::vector<bool> leader(n, false);
    leader[0] = true;
    for (std::size_t pc = 0; pc < n; ++pc) {
      const auto op = code[pc].opcode;
      if (op == Opcode::kJump || op == Opcode::kJumpIfZero) {
        leader[static_cast<std::size_t>(static_cast<std::int64_t>(pc) + code[pc].operand)] = true;
        if (pc + 1 < n) leader[pc + 1] = true;
      } else if (op == Opcode::kReturn && pc + 1 < n) {
        leader[pc + 1] = true;
      }
    }

    struct Operand {
      bool imm = false;
      std::int64_t value = 0;  // immediate value
      std::int32_t slot = 0;
    };
    std::vector<Operand> sym;
    std::vector<std::int32_t> op_at(n, -1);
    // Ops whose `target` still holds a bytecode pc.
    std::vector<std::size_t> fixups;
    auto& ops = out->ops;
    // Index of the last op that may have its destination retargeted.
    std::int64_t retargetable = -1;

    auto emit = [&](LoweredOp op) {
      ops.push_back(op);
      retargetable = -1;
      return ops.size() - 1;
    };
    auto write_slot = [&](std::int32_t dst, const Operand& v) {
      if (!v.imm && v.slot == dst) return;
      LoweredOp op;
      if (v.imm) {
        op.kind = LoweredKind::kSet;
        op.imm = v.value;
      } else {
        op.kind = LoweredKind::kMove;
        op.a = v.slot;
      }
      op.dst = dst;
      emit(op);
    };
    auto materialize = [&]() {
      for (std::size_t i = 0; i < sym.size(); ++i) {
        auto canonical = stack + static_cast<std::int32_t>(i);
        write_slot(canonical, sym[i]);
        sym[i] = Operand{false, 0, canonical};
      }
    };
    auto pop = [&]() {
      Operand v = sym.back();
      sym.pop_back();
      return v;
    };

    bool reachable = false;
    for (std::size_t pc = 0; pc < n; ++pc) {
      const auto& ins = code[pc];
      const std::int32_t d = shape.depth_before[pc];
      if (leader[pc]) {
        if (reachable) materialize();
        op_at[pc] = static_cast<std::int32_t>(ops.size());
        retargetable = -1;
        sym.clear();
        for (std::int32_t i = 0; i < std::max(d, 0); ++i) sym.push_back(Operand{false, 0, stack + i});
      }
      reachable = d >= 0;
      if (!reachable) {
        if (leader[pc]) {
          LoweredOp op;
          op.kind = LoweredKind::kUnreachable;
          emit(op);
        }
        continue;
      }
      switch (ins.opcode) {
        case Opcode::kPushConst:
          sym.push_back(Operand{true, ins.operand, 0});
          break;
        case Opcode::kLoadArg:
          sym.push_back(Operand{false, 0, static_cast<std::int32_t>(ins.operand)});
          break;
        case Opcode::kLoadLocal:
          sym.push_back(Operand{false, 0, locals + static_cast<std::int32_t>(ins.operand)});
          break;
        case Opcode::kStoreLocal: {
          const std::int32_t dst = locals + static_cast<std::int32_t>(ins.operand);
          Operand v = pop();
          bool aliased = false;
          for (const auto& e : sym) aliased |= !e.imm && e.slot == dst;
          if (aliased) {
            for (std::size_t i = 0; i < sym.size(); ++i) {
              if (!sym[i].imm && sym[i].slot == dst) {
                auto canonical = stack + static_cast<std::int32_t>(i);
                write_slot(canonical, sym[i]);
                sym[i] = Operand{false, 0, canonical};
              }
            }
          }
          if (!v.imm && retargetable >= 0 && ops[static_cast<std::size_t>(retargetable)].dst == v.slot) {
            ops[static_cast<std::size_t>(retargetable)].dst = dst;
            retargetable = -1;
          } else {
            write_slot(dst, v);
          }
          break;
        }
        case Opcode::kAdd:
        case Opcode::kSub:
        case Opcode::kMul: {
          Operand b = pop();
          Operand a = pop();
          const std::int32_t dst = stack + d - 2;
          if (a.imm && b.imm) {
            std::int64_t v = ins.opcode == Opcode::kAdd   ? detail::wrap_add(a.value, b.value)
                             : ins.opcode == Opcode::kSub ? detail::wrap_sub(a.value, b.value)
                                                          : detail::wrap_mul(a.value, b.value);
            sym.push_back(Operand{true, v, 0});
            break;
          }
          LoweredOp op;
          op.dst = dst;
          const bool commutes = ins.opcode != Opcode::kSub;
          if (a.imm && commutes) std::swap(a, b);
          if (!a.imm && !b.imm) {
            op.kind = ins.opcode == Opcode::kAdd   ? LoweredKind::kAddSS
                      : ins.opcode == Opcode::kSub ? LoweredKind::kSubSS
                                                   : LoweredKind::kMulSS;
            op.a = a.slot;
            op.b = b.slot;
          } else if (!a.imm) {
            op.kind = ins.opcode == Opcode::kAdd   ? LoweredKind::kAddSI
                      : ins.opcode == Opcode::kSub ? LoweredKind::kSubSI
                                                   : LoweredKind::kMulSI;
            op.a = a.slot;
            op.imm = b.value;
          } else {
            op.kind = LoweredKind::kSubIS;
            op.imm = a.value;
            op.b = b.slot;
          }
          retargetable = static_cast<std::int64_t>(emit(op));
          sym.push_back(Operand{false, 0, dst});
          break;
        }
        case Opcode::kJumpIfZero: {
          Operand c = pop();
          materialize();
          const auto target = static_cast<std::size_t>(static_cast<std::int64_t>(pc) + ins.operand);
          LoweredOp op;
          if (c.imm) {
            if (c.value != 0) break;  // never taken: fall through
            op.kind = LoweredKind::kJmp;
          } else {
            op.kind = LoweredKind::kJz;
            op.a = c.slot;
          }
          op.target = static_cast<std::int32_t>(target);
          fixups.push_back(emit(op));
          break;
        }
        case Opcode::kJump: {
          materialize();
          LoweredOp op;
          op.kind = LoweredKind::kJmp;
          op.target = static_cast<std::int32_t>(static_cast<std::int64_t>(pc) + ins.operand);
          fixups.push_back(emit(op));
          reachable = false;
          break;
        }
        case Opcode::kCall: {
          materialize();
          const auto k = static_cast<std::int32_t>(ins.callee->arity());
          out->call_sites.push_back(std::make_unique<CallSite>(*ins.callee));
          LoweredOp op;
          op.kind = LoweredKind::kCall;
          op.call = out->call_sites.back().get();
          op.a = stack + d - k;
          op.b = k;
          op.dst = stack + d - k;
          emit(op);
          sym.resize(sym.size() - static_cast<std::size_t>(k));
          sym.push_back(Operand{false, 0, stack + d - k});
          break;
        }
        case Opcode::kReturn: {
          Operand v = pop();
          LoweredOp op;
          if (v.imm) {
            op.kind = LoweredKind::kRetI;
            op.imm = v.value;
          } else {
            op.kind = LoweredKind::kRetS;
            op.a = v.slot;
          }
          emit(op);
          reachable = false;
          break;
        }
      }
    }
    for (auto i : fixups) ops[i].target = op_at[static_cast<std::size_t>(ops[i].target)];
    // Thread jumps: jumps whose target is an unconditional jump go straight
    // to its destination.
    auto chase = [&](std::int32_t idx) {
      for (int hops = 0; hops < 8 && idx >= 0 && static_cast<std::size_t>(idx) < ops.size() &&
                         ops[static_cast<std::size_t>(idx)].kind == LoweredKind::kJmp;
           ++hops) {
        idx = ops[static_cast<std::size_t>(idx)].target;
      }
      return idx;
    };
    for (auto& op : ops) {
      if (op.kind == LoweredKind::kJz || op.kind == LoweredKind::kJmp) op.target = chase(op.target);
    }
    return out;
  }

  VmOptions options_;
  ClassRegistry registry_;
  Instrumentation instrumentation_;
  StringPool strings_;
  std::atomic<std::uint32_t> next_thread_id_{1};
  std::atomic<std::uint64_t> torn_entry_observations_{0};
  std::mutex hooks_mu_;
  std::map<std::uint64_t, ClassLoadHook> hooks_;
  std::uint64_t next_hook_id_ = 0;
};

}  // namespace xtrace

#include "xtrace/stubs.hpp"
