// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cctype>
#include <compare>
#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "xtrace/error.hpp"

namespace xtrace {

using Signature = std::vector<std::string>;

namespace detail {

inline bool is_ident_start(char c) {
  return std::isalpha(static_cast<unsigned char>(c)) || c == '_' || c == '$';
}

inline bool is_ident_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '$';
}

inline bool is_identifier(std::string_view s) {
  if (s.empty() || !is_ident_start(s.front())) return false;
  for (char c : s) {
    if (!is_ident_char(c)) return false;
  }
  return true;
}

inline std::string strip_spaces(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    if (!std::isspace(static_cast<unsigned char>(c))) out.push_back(c);
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace detail

/// True for a dotted name made of identifier segments (`a.b.C`).
inline bool is_dotted_identifier(std::string_view s) {
  if (s.empty()) return false;
  std::size_t start = 0;
  while (true) {
    auto dot = s.find('.', start);
    auto seg = s.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start);
    if (!detail::is_identifier(seg)) return false;
    if (dot == std::string_view::npos) return true;
    start = dot + 1;
  }
}

/// Parses a comma-separated parameter list. Whitespace anywhere is dropped;
/// an empty string is the empty signature. Type names are otherwise opaque.
inline Signature parse_signature(std::string_view text) {
  std::string flat = detail::strip_spaces(text);
  Signature sig;
  if (flat.empty()) return sig;
  std::size_t start = 0;
  while (true) {
    auto comma = flat.find(',', start);
    std::string type = flat.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (type.empty()) {
      throw Error(ErrorCode::kParse, "empty type name in signature '" + std::string(text) + "'");
    }
    sig.push_back(std::move(type));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return sig;
}

inline std::string format_signature(const Signature& sig) {
  std::string out;
  for (std::size_t i = 0; i < sig.size(); ++i) {
    if (i) out.push_back(',');
    out += sig[i];
  }
  return out;
}

/// Parameters of these types carry interned string handles rather than
/// plain integers.
inline bool is_string_type(std::string_view type) {
  return type == "String" || type == "java.lang.String";
}

struct MethodRef {
  std::string class_name;
  std::string method_name;
  Signature params;

  std::size_t arity() const { return params.size(); }

  /// `cls.name(t1,t2)`
  std::string to_string() const {
    return class_name + "." + method_name + "(" + format_signature(params) + ")";
  }

  /// `cls.name` without the parameter list, as a stack trace prints it.
  std::string short_name() const { return class_name + "." + method_name; }

  friend auto operator<=>(const MethodRef&, const MethodRef&) = default;
  friend bool operator==(const MethodRef&, const MethodRef&) = default;
};

inline MethodRef make_method_ref(std::string class_name, std::string method_name, Signature params) {
  if (!is_dotted_identifier(class_name)) {
    throw Error(ErrorCode::kParse, "bad class name '" + class_name + "'");
  }
  if (!detail::is_identifier(method_name)) {
    throw Error(ErrorCode::kParse, "bad method name '" + method_name + "'");
  }
  return MethodRef{std::move(class_name), std::move(method_name), std::move(params)};
}

/// Parses `pkg.Cls.method(t1,t2)`.
inline MethodRef parse_method_ref(std::string_view text) {
  text = detail::trim(text);
  auto open = text.find('(');
  if (open == std::string_view::npos || text.back() != ')') {
    throw Error(ErrorCode::kParse, "expected cls.method(sig), got '" + std::string(text) + "'");
  }
  auto qualified = detail::trim(text.substr(0, open));
  auto dot = qualified.rfind('.');
  if (dot == std::string_view::npos) {
    throw Error(ErrorCode::kParse, "method reference lacks a class: '" + std::string(text) + "'");
  }
  auto sig = text.substr(open + 1, text.size() - open - 2);
  return make_method_ref(std::string(qualified.substr(0, dot)), std::string(qualified.substr(dot + 1)),
                         parse_signature(sig));
}

/// Matches a dotted name against a pattern in which `...` stands for zero or
/// more elided package segments, e.g. `androidx.window...Impl` matches both
/// `androidx.window.Impl` and `androidx.window.extensions.layout.Impl`.
/// Without `...` this is plain equality.
inline bool matches_elided(std::string_view pattern, std::string_view name) {
  auto ell = pattern.find("...");
  if (ell == std::string_view::npos) return pattern == name;
  auto head = pattern.substr(0, ell);
  auto tail = pattern.substr(ell + 3);
  std::string prefix = head.empty() ? std::string() : std::string(head) + ".";
  if (name.substr(0, prefix.size()) != prefix) return false;
  auto rest = name.substr(prefix.size());
  // Position 0 is the zero-segment case; otherwise resume at a segment boundary.
  for (std::size_t pos = 0; pos <= rest.size(); ++pos) {
    if (pos != 0 && rest[pos - 1] != '.') continue;
    if (matches_elided(tail, rest.substr(pos))) return true;
  }
  return false;
}

inline bool signature_matches(const Signature& pattern, const Signature& sig) {
  if (pattern.size() != sig.size()) return false;
  for (std::size_t i = 0; i < sig.size(); ++i) {
    if (!matches_elided(pattern[i], sig[i])) return false;
  }
  return true;
}

}  // namespace xtrace

template <>
struct std::hash<xtrace::MethodRef> {
  std::size_t operator()(const xtrace::MethodRef& ref) const noexcept {
    std::hash<std::string> h;
    std::size_t seed = h(ref.class_name);
    auto mix = [&seed](std::size_t v) { seed ^= v + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2); };
    mix(h(ref.method_name));
    for (const auto& p : ref.params) mix(h(p));
    return seed;
  }
};
