// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "xtrace/error.hpp"
#include "xtrace/method_ref.hpp"

namespace xtrace {

enum class Opcode : std::uint8_t {
  kPushConst,
  kLoadArg,
  kLoadLocal,
  kStoreLocal,
  kAdd,
  kSub,
  kMul,
  kJumpIfZero,
  kJump,
  kCall,
  kReturn,
};

constexpr std::string_view mnemonic(Opcode op) {
  switch (op) {
    case Opcode::kPushConst: return "pushconst";
    case Opcode::kLoadArg: return "loadarg";
    case Opcode::kLoadLocal: return "loadlocal";
    case Opcode::kStoreLocal: return "storelocal";
    case Opcode::kAdd: return "add";
    case Opcode::kSub: return "sub";
    case Opcode::kMul: return "mul";
    case Opcode::kJumpIfZero: return "jz";
    case Opcode::kJump: return "jmp";
    case Opcode::kCall: return "call";
    case Opcode::kReturn: return "ret";
  }
  return "?";
}

/// Local slots a method may address.
inline constexpr std::int64_t kMaxLocals = 256;

struct Instruction {
  Opcode opcode = Opcode::kReturn;
  // Constant, argument index, local slot or relative jump offset.
  std::int64_t operand = 0;
  // Set for kCall.
  std::shared_ptr<const MethodRef> callee;
  // Set for a string-valued kPushConst; interned into a handle at load time.
  std::optional<std::string> literal;

  static Instruction push(std::int64_t v) { return {Opcode::kPushConst, v, nullptr, std::nullopt}; }
  static Instruction push_string(std::string s) { return {Opcode::kPushConst, 0, nullptr, std::move(s)}; }
  static Instruction load_arg(std::int64_t i) { return {Opcode::kLoadArg, i, nullptr, std::nullopt}; }
  static Instruction load_local(std::int64_t i) { return {Opcode::kLoadLocal, i, nullptr, std::nullopt}; }
  static Instruction store_local(std::int64_t i) { return {Opcode::kStoreLocal, i, nullptr, std::nullopt}; }
  static Instruction add() { return {Opcode::kAdd, 0, nullptr, std::nullopt}; }
  static Instruction sub() { return {Opcode::kSub, 0, nullptr, std::nullopt}; }
  static Instruction mul() { return {Opcode::kMul, 0, nullptr, std::nullopt}; }
  static Instruction jump_if_zero(std::int64_t off) { return {Opcode::kJumpIfZero, off, nullptr, std::nullopt}; }
  static Instruction jump(std::int64_t off) { return {Opcode::kJump, off, nullptr, std::nullopt}; }
  static Instruction call(MethodRef ref) {
    return {Opcode::kCall, 0, std::make_shared<const MethodRef>(std::move(ref)), std::nullopt};
  }
  static Instruction ret() { return {Opcode::kReturn, 0, nullptr, std::nullopt}; }
};

std::string format_instruction(const Instruction& ins);

struct MethodDecl {
  MethodRef ref;
  std::vector<Instruction> code;
  int line = 0;
};

struct ClassDecl {
  std::string name;
  std::vector<MethodDecl> methods;
};

struct Program {
  std::vector<ClassDecl> classes;

  std::size_t method_count() const {
    std::size_t n = 0;
    for (const auto& c : classes) n += c.methods.size();
    return n;
  }
};

/// Result of the load-time verifier.
struct CodeShape {
  // Operand stack depth before each instruction; -1 when unreachable.
  std::vector<std::int32_t> depth_before;
  std::int32_t max_stack = 0;
  std::int32_t num_locals = 0;
};

/// Checks jump targets, argument and local indices, stack discipline, and
/// that no path runs off the end of the method without `ret`.
inline CodeShape verify_method(const MethodRef& ref, const std::vector<Instruction>& code) {
  auto fail = [&](std::size_t pc, const std::string& what) -> Error {
    return Error(ErrorCode::kValidation, ref.to_string() + " @" + std::to_string(pc) + ": " + what);
  };
  if (code.empty()) throw fail(0, "missing ret");

  CodeShape shape;
  shape.depth_before.assign(code.size(), -1);
  const auto n = static_cast<std::int64_t>(code.size());

  for (std::size_t pc = 0; pc < code.size(); ++pc) {
    const auto& ins = code[pc];
    switch (ins.opcode) {
      case Opcode::kJumpIfZero:
      case Opcode::kJump: {
        auto target = static_cast<std::int64_t>(pc) + ins.operand;
        if (target < 0 || target >= n) throw fail(pc, "jump target out of bounds");
        break;
      }
      case Opcode::kLoadArg:
        if (ins.operand < 0 || ins.operand >= static_cast<std::int64_t>(ref.arity())) {
          throw fail(pc, "argument index out of range");
        }
        break;
      case Opcode::kLoadLocal:
      case Opcode::kStoreLocal:
        if (ins.operand < 0 || ins.operand >= kMaxLocals) throw fail(pc, "local slot out of range");
        shape.num_locals = std::max<std::int32_t>(shape.num_locals, static_cast<std::int32_t>(ins.operand) + 1);
        break;
      case Opcode::kCall:
        if (!ins.callee) throw fail(pc, "call without target");
        break;
      default:
        break;
    }
  }

  std::vector<std::size_t> work{0};
  shape.depth_before[0] = 0;
  auto flow = [&](std::size_t from, std::int64_t to, std::int32_t depth) {
    if (to >= n) throw fail(from, "missing ret: control falls off the end");
    auto& slot = shape.depth_before[static_cast<std::size_t>(to)];
    if (slot == -1) {
      slot = depth;
      work.push_back(static_cast<std::size_t>(to));
    } else if (slot != depth) {
      throw fail(static_cast<std::size_t>(to), "inconsistent stack depth at merge");
    }
  };

  while (!work.empty()) {
    auto pc = work.back();
    work.pop_back();
    const auto& ins = code[pc];
    std::int32_t depth = shape.depth_before[pc];
    auto need = [&](std::int32_t k) {
      if (depth < k) throw fail(pc, "operand stack underflow");
    };
    auto next = static_cast<std::int64_t>(pc) + 1;
    switch (ins.opcode) {
      case Opcode::kPushConst:
      case Opcode::kLoadArg:
      case Opcode::kLoadLocal:
        flow(pc, next, depth + 1);
        shape.max_stack = std::max(shape.max_stack, depth + 1);
        break;
      case Opcode::kStoreLocal:
        need(1);
        flow(pc, next, depth - 1);
        break;
      case Opcode::kAdd:
      case Opcode::kSub:
      case Opcode::kMul:
        need(2);
        flow(pc, next, depth - 1);
        break;
      case Opcode::kJumpIfZero:
        need(1);
        flow(pc, next, depth - 1);
        flow(pc, static_cast<std::int64_t>(pc) + ins.operand, depth - 1);
        break;
      case Opcode::kJump:
        flow(pc, static_cast<std::int64_t>(pc) + ins.operand, depth);
        break;
      case Opcode::kCall: {
        auto arity = static_cast<std::int32_t>(ins.callee->arity());
        need(arity);
        flow(pc, next, depth - arity + 1);
        shape.max_stack = std::max(shape.max_stack, depth - arity + 1);
        break;
      }
      case Opcode::kReturn:
        need(1);
        break;
    }
  }
  return shape;
}

namespace detail {

inline std::int64_t parse_int(std::string_view text, int line) {
  std::string_view digits = text;
  if (!digits.empty() && digits.front() == '+') digits.remove_prefix(1);
  std::int64_t value = 0;
  auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), value);
  if (digits.empty() || ec != std::errc() || ptr != digits.data() + digits.size()) {
    throw Error(ErrorCode::kParse, "line " + std::to_string(line) + ": expected integer, got '" +
                                       std::string(text) + "'");
  }
  return value;
}

inline std::string parse_string_literal(std::string_view text, int line) {
  if (text.size() < 2 || text.back() != '"') {
    throw Error(ErrorCode::kParse, "line " + std::to_string(line) + ": unterminated string literal");
  }
  std::string out;
  for (std::size_t i = 1; i + 1 < text.size(); ++i) {
    char c = text[i];
    if (c == '\\' && i + 2 < text.size()) {
      char e = text[++i];
      out.push_back(e == 'n' ? '\n' : e == 't' ? '\t' : e);
    } else {
      out.push_back(c);
    }
  }
  return out;
}

inline std::string quote(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

}  // namespace detail

/// Parses program text:
///
///     class a.b.Cls
///       method name(int,int)
///         loadarg 0
///         ret
///
/// Blank lines and lines starting with `#` are ignored. Every method is
/// verified; duplicate (class, name, signature) triples are rejected.
inline Program parse_program(std::string_view source) {
  Program program;
  std::set<std::string> seen;
  std::istringstream in{std::string(source)};
  std::string raw;
  int line_no = 0;
  MethodDecl* method = nullptr;

  auto finish = [&]() {
    if (method) {
      verify_method(method->ref, method->code);
      method = nullptr;
    }
  };

  while (std::getline(in, raw)) {
    ++line_no;
    auto line = detail::trim(raw);
    if (line.empty() || line.front() == '#') continue;
    auto err = [&](const std::string& what) {
      return Error(ErrorCode::kParse, "line " + std::to_string(line_no) + ": " + what);
    };
    auto space = line.find_first_of(" \t");
    auto word = line.substr(0, space);
    auto rest = space == std::string_view::npos ? std::string_view{} : detail::trim(line.substr(space));

    if (word == "class") {
      finish();
      if (!is_dotted_identifier(rest)) throw err("bad class name '" + std::string(rest) + "'");
      program.classes.push_back(ClassDecl{std::string(rest), {}});
      continue;
    }
    if (word == "method") {
      finish();
      if (program.classes.empty()) throw err("method outside of a class");
      auto& cls = program.classes.back();
      auto open = rest.find('(');
      if (open == std::string_view::npos || rest.back() != ')') throw err("expected method name(sig)");
      MethodRef ref;
      try {
        ref = make_method_ref(cls.name, std::string(detail::trim(rest.substr(0, open))),
                              parse_signature(rest.substr(open + 1, rest.size() - open - 2)));
      } catch (const Error& e) {
        throw err(e.what());
      }
      if (!seen.insert(ref.to_string()).second) {
        throw Error(ErrorCode::kValidation, "line " + std::to_string(line_no) +
                                                ": duplicate method signature " + ref.to_string());
      }
      cls.methods.push_back(MethodDecl{std::move(ref), {}, line_no});
      method = &cls.methods.back();
      continue;
    }

    if (!method) throw err("instruction outside of a method");
    Instruction ins;
    auto want_operand = [&]() {
      if (rest.empty()) throw err(std::string(word) + " needs an operand");
    };
    auto no_operand = [&]() {
      if (!rest.empty()) throw err(std::string(word) + " takes no operand");
    };
    if (word == "pushconst") {
      want_operand();
      ins = rest.front() == '"' ? Instruction::push_string(detail::parse_string_literal(rest, line_no))
                                : Instruction::push(detail::parse_int(rest, line_no));
    } else if (word == "loadarg") {
      want_operand();
      ins = Instruction::load_arg(detail::parse_int(rest, line_no));
    } else if (word == "loadlocal") {
      want_operand();
      ins = Instruction::load_local(detail::parse_int(rest, line_no));
    } else if (word == "storelocal") {
      want_operand();
      ins = Instruction::store_local(detail::parse_int(rest, line_no));
    } else if (word == "add") {
      no_operand();
      ins = Instruction::add();
    } else if (word == "sub") {
      no_operand();
      ins = Instruction::sub();
    } else if (word == "mul") {
      no_operand();
      ins = Instruction::mul();
    } else if (word == "jz") {
      want_operand();
      ins = Instruction::jump_if_zero(detail::parse_int(rest, line_no));
    } else if (word == "jmp") {
      want_operand();
      ins = Instruction::jump(detail::parse_int(rest, line_no));
    } else if (word == "call") {
      want_operand();
      try {
        ins = Instruction::call(parse_method_ref(rest));
      } catch (const Error& e) {
        throw err(e.what());
      }
    } else if (word == "ret") {
      no_operand();
      ins = Instruction::ret();
    } else {
      throw err("unknown opcode '" + std::string(word) + "'");
    }
    method->code.push_back(std::move(ins));
  }
  finish();
  return program;
}

inline std::string format_instruction(const Instruction& ins) {
  std::string out(mnemonic(ins.opcode));
  switch (ins.opcode) {
    case Opcode::kPushConst:
      out += " " + (ins.literal ? detail::quote(*ins.literal) : std::to_string(ins.operand));
      break;
    case Opcode::kLoadArg:
    case Opcode::kLoadLocal:
    case Opcode::kStoreLocal:
      out += " " + std::to_string(ins.operand);
      break;
    case Opcode::kJumpIfZero:
    case Opcode::kJump:
      out += ins.operand >= 0 ? " +" + std::to_string(ins.operand) : " " + std::to_string(ins.operand);
      break;
    case Opcode::kCall:
      out += " " + ins.callee->to_string();
      break;
    default:
      break;
  }
  return out;
}

inline std::string format_program(const Program& program) {
  std::string out;
  for (const auto& cls : program.classes) {
    out += "class " + cls.name + "\n";
    for (const auto& m : cls.methods) {
      out += "  method " + m.ref.method_name + "(" + format_signature(m.ref.params) + ")\n";
      for (const auto& ins : m.code) out += "    " + format_instruction(ins) + "\n";
    }
  }
  return out;
}

}  // namespace xtrace
