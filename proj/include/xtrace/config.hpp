// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "xtrace/engine.hpp"
#include "xtrace/error.hpp"
#include "xtrace/method_ref.hpp"
#include "xtrace/runtime.hpp"
#include "xtrace/trace_actions.hpp"

namespace xtrace {

enum class ConfigStatus : std::uint8_t { kDraft, kCanary, kFullRollout, kRolledBack };

constexpr std::string_view to_string(ConfigStatus s) {
  switch (s) {
    case ConfigStatus::kDraft: return "Draft";
    case ConfigStatus::kCanary: return "Canary";
    case ConfigStatus::kFullRollout: return "FullRollout";
    case ConfigStatus::kRolledBack: return "RolledBack";
  }
  return "?";
}

inline constexpr double kDefaultCanaryFraction = 0.001;

struct ConfigEntry {
  TraceAction action = TraceAction::kCaptureStack;
  std::string class_name;
  std::string method_name;
  Signature method_sign;

  friend bool operator==(const ConfigEntry&, const ConfigEntry&) = default;
};

struct TraceConfig {
  std::string config_id;
  std::vector<ConfigEntry> entries;
  double rollout_fraction = kDefaultCanaryFraction;
  bool approved = false;
  ConfigStatus status = ConfigStatus::kDraft;

  friend bool operator==(const TraceConfig&, const TraceConfig&) = default;
};

namespace detail {

/// A dotted type or class name in which `...` may stand for elided
/// segments. Array suffixes are allowed on types.
inline bool is_name_pattern(std::string_view s, bool allow_array) {
  std::string flat(s);
  if (allow_array) {
    while (flat.size() >= 2 && flat.compare(flat.size() - 2, 2, "[]") == 0) flat.resize(flat.size() - 2);
  }
  std::string dotted;
  for (std::size_t i = 0; i < flat.size();) {
    if (flat.compare(i, 3, "...") == 0) {
      dotted += ".x.";
      i += 3;
    } else {
      dotted.push_back(flat[i++]);
    }
  }
  if (dotted.starts_with(".")) dotted.erase(0, 1);
  if (dotted.ends_with(".")) dotted.pop_back();
  return is_dotted_identifier(dotted);
}

inline const nlohmann::json& require_field(const nlohmann::json& obj, const char* key, std::size_t index) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw Error(ErrorCode::kConfig, "entry " + std::to_string(index) + " lacks \"" + key + "\"");
  }
  return *it;
}

inline std::string require_string(const nlohmann::json& obj, const char* key, std::size_t index) {
  const auto& v = require_field(obj, key, index);
  if (!v.is_string()) {
    throw Error(ErrorCode::kConfig, "entry " + std::to_string(index) + ": \"" + key + "\" must be a string");
  }
  return v.get<std::string>();
}

}  // namespace detail

/// Parses the wire format. `//` and `/* */` comments are accepted, as is the
/// bare `"dynamic_trace_config": [...]` member without enclosing braces.
inline TraceConfig parse_config(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& first) {
    std::string wrapped = "{" + std::string(text) + "}";
    try {
      doc = nlohmann::json::parse(wrapped, nullptr, true, true);
    } catch (const nlohmann::json::parse_error&) {
      throw Error(ErrorCode::kParse, std::string("malformed config: ") + first.what());
    }
  }
  if (!doc.is_object()) throw Error(ErrorCode::kParse, "config must be a JSON object");
  auto list = doc.find("dynamic_trace_config");
  if (list == doc.end() || !list->is_array()) {
    throw Error(ErrorCode::kConfig, "missing \"dynamic_trace_config\" array");
  }
  if (list->empty()) throw Error(ErrorCode::kConfig, "config has no entries");

  TraceConfig cfg;
  for (std::size_t i = 0; i < list->size(); ++i) {
    const auto& e = (*list)[i];
    if (!e.is_object()) throw Error(ErrorCode::kConfig, "entry " + std::to_string(i) + " is not an object");
    const auto& code = detail::require_field(e, "action", i);
    if (!code.is_number_integer()) throw Error(ErrorCode::kConfig, "entry " + std::to_string(i) + ": bad action");
    auto action = action_from_code(code.get<std::int64_t>());
    if (!action) {
      throw Error(ErrorCode::kConfig, "unknown action " + std::to_string(code.get<std::int64_t>()));
    }
    ConfigEntry entry;
    entry.action = *action;
    entry.class_name = detail::strip_spaces(detail::require_string(e, "className", i));
    entry.method_name = detail::strip_spaces(detail::require_string(e, "methodName", i));
    if (!detail::is_name_pattern(entry.class_name, false)) {
      throw Error(ErrorCode::kConfig, "bad className '" + entry.class_name + "'");
    }
    if (!detail::is_identifier(entry.method_name)) {
      throw Error(ErrorCode::kConfig, "bad methodName '" + entry.method_name + "'");
    }
    auto sign = e.contains("methodSign") ? detail::require_string(e, "methodSign", i) : std::string();
    try {
      entry.method_sign = parse_signature(sign);
    } catch (const Error& err) {
      throw Error(ErrorCode::kConfig, err.what());
    }
    for (const auto& t : entry.method_sign) {
      if (!detail::is_name_pattern(t, true)) throw Error(ErrorCode::kConfig, "bad type '" + t + "' in methodSign");
    }
    cfg.entries.push_back(std::move(entry));
  }

  if (auto it = doc.find("config_id"); it != doc.end()) {
    if (!it->is_string()) throw Error(ErrorCode::kConfig, "config_id must be a string");
    cfg.config_id = it->get<std::string>();
  }
  if (auto it = doc.find("rollout_fraction"); it != doc.end()) {
    if (!it->is_number()) throw Error(ErrorCode::kConfig, "rollout_fraction must be a number");
    cfg.rollout_fraction = it->get<double>();
    if (!(cfg.rollout_fraction >= 0.0 && cfg.rollout_fraction <= 1.0)) {
      throw Error(ErrorCode::kConfig, "rollout_fraction outside [0,1]");
    }
  }
  if (auto it = doc.find("approved"); it != doc.end()) {
    if (!it->is_boolean()) throw Error(ErrorCode::kConfig, "approved must be a boolean");
    cfg.approved = it->get<bool>();
  }
  return cfg;
}

/// Canonical wire form. Status is runtime state and is not serialized.
inline std::string format_config(const TraceConfig& cfg) {
  auto list = nlohmann::json::array();
  for (const auto& e : cfg.entries) {
    list.push_back({{"action", static_cast<int>(e.action)},
                    {"className", e.class_name},
                    {"methodName", e.method_name},
                    {"methodSign", format_signature(e.method_sign)}});
  }
  nlohmann::json doc = {{"dynamic_trace_config", list},
                        {"rollout_fraction", cfg.rollout_fraction},
                        {"approved", cfg.approved}};
  if (!cfg.config_id.empty()) doc["config_id"] = cfg.config_id;
  return doc.dump(2);
}

struct Resolution {
  TargetSet targets;
  std::vector<std::string> warnings;
};

/// Maps entries onto loaded methods. Names without `...` must match exactly;
/// entries that match nothing become deferred targets plus a warning.
inline Resolution resolve_targets(const TraceConfig& cfg, const ClassRegistry& registry) {
  Resolution out;
  // Merge entries naming the same pattern so each target carries all its
  // actions.
  std::map<std::tuple<std::string, std::string, Signature>, std::vector<TraceAction>> merged;
  std::vector<std::tuple<std::string, std::string, Signature>> order;
  for (const auto& e : cfg.entries) {
    auto key = std::make_tuple(e.class_name, e.method_name, e.method_sign);
    auto [it, inserted] = merged.try_emplace(key);
    if (inserted) order.push_back(key);
    if (std::find(it->second.begin(), it->second.end(), e.action) == it->second.end()) it->second.push_back(e.action);
  }
  for (const auto& key : order) {
    const auto& [cls, name, sig] = key;
    const auto& actions = merged[key];
    DeferredTarget pattern{cls, name, sig, actions};
    std::size_t hits = 0;
    bool elided = cls.find("...") != std::string::npos ||
                  std::any_of(sig.begin(), sig.end(), [](const auto& t) { return t.find("...") != std::string::npos; });
    if (!elided) {
      if (auto* rec = registry.find(MethodRef{cls, name, sig})) {
        out.targets.add(*rec, actions);
        ++hits;
      }
    } else {
      for (MethodRecord* rec : registry.with_method_name(name)) {
        if (pattern.matches(rec->ref())) {
          out.targets.add(*rec, actions);
          ++hits;
        }
      }
    }
    if (hits == 0) {
      out.warnings.push_back("target not loaded: " + pattern.describe());
      out.targets.add_deferred(std::move(pattern));
    }
  }
  return out;
}

namespace detail {

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Stable 64-bit bucket for a (device, config) pair.
inline std::uint64_t gate_hash(std::string_view device_id, std::string_view config_id) {
  std::uint64_t h = detail::fnv1a64(device_id);
  h = detail::fnv1a64(std::string_view("\x1f", 1), h);
  h = detail::fnv1a64(config_id, h);
  return detail::mix64(h);
}

/// Admits a device when its bucket falls below fraction * 2^64.
inline bool session_gate(std::string_view device_id, std::string_view config_id, double fraction) {
  if (!(fraction > 0.0)) return false;
  if (fraction >= 1.0) return true;
  auto threshold = static_cast<std::uint64_t>(std::ldexp(static_cast<long double>(fraction), 64));
  return gate_hash(device_id, config_id) < threshold;
}

inline bool session_gate(std::string_view device_id, const TraceConfig& cfg) {
  if (cfg.status == ConfigStatus::kRolledBack) return false;
  return session_gate(device_id, cfg.config_id, cfg.rollout_fraction);
}

struct HealthThresholds {
  double crash_rate_max = 0.01;
  double anr_rate_max = 0.01;
};

struct HealthMetrics {
  std::uint64_t sessions = 0;
  std::uint64_t crashes = 0;
  std::uint64_t anrs = 0;
  HealthThresholds thresholds;

  std::optional<double> crash_rate() const {
    if (sessions == 0) return std::nullopt;
    return static_cast<double>(crashes) / static_cast<double>(sessions);
  }
  std::optional<double> anr_rate() const {
    if (sessions == 0) return std::nullopt;
    return static_cast<double>(anrs) / static_cast<double>(sessions);
  }
  bool healthy() const {
    return sessions > 0 && *crash_rate() <= thresholds.crash_rate_max && *anr_rate() <= thresholds.anr_rate_max;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = {{"sessions", sessions},
                        {"crashes", crashes},
                        {"anrs", anrs},
                        {"thresholds", {{"crash_rate_max", thresholds.crash_rate_max},
                                        {"anr_rate_max", thresholds.anr_rate_max}}}};
    j["crash_rate"] = crash_rate() ? nlohmann::json(*crash_rate()) : nlohmann::json(nullptr);
    j["anr_rate"] = anr_rate() ? nlohmann::json(*anr_rate()) : nlohmann::json(nullptr);
    return j;
  }
};

struct RolloutPolicy {
  std::uint64_t min_sample = 1000;
  HealthThresholds thresholds;
};

struct HistoryEntry {
  std::uint64_t revision = 0;
  std::string config_id;
  ConfigStatus status = ConfigStatus::kDraft;
  std::string note;
};

/// Versioned configs and their release lifecycle. Every status change is
/// appended to the history.
class ConfigManager {
 public:
  explicit ConfigManager(RolloutPolicy policy = {}) : policy_(policy) {}

  const RolloutPolicy& policy() const { return policy_; }

  /// Stores `cfg` as a new Draft. An empty id gets a generated one.
  std::string submit(TraceConfig cfg) {
    std::lock_guard lock(mu_);
    if (cfg.entries.empty()) throw Error(ErrorCode::kConfig, "config has no entries");
    if (cfg.config_id.empty()) cfg.config_id = "cfg-" + std::to_string(configs_.size() + 1);
    if (configs_.count(cfg.config_id)) throw Error(ErrorCode::kConfig, "config id in use: " + cfg.config_id);
    cfg.status = ConfigStatus::kDraft;
    auto id = cfg.config_id;
    configs_.emplace(id, Slot{std::move(cfg), {}});
    record(id, ConfigStatus::kDraft, "submitted");
    return id;
  }

  /// The compliance sign-off.
  void approve(const std::string& id) {
    std::lock_guard lock(mu_);
    auto& cfg = slot(id).config;
    if (cfg.status != ConfigStatus::kDraft) {
      throw Error(ErrorCode::kInvalidTransition, "only a Draft can be approved");
    }
    cfg.approved = true;
    record(id, cfg.status, "approved");
  }

  ConfigStatus start_canary(const std::string& id) {
    std::lock_guard lock(mu_);
    auto& cfg = slot(id).config;
    if (cfg.status != ConfigStatus::kDraft) {
      throw Error(ErrorCode::kInvalidTransition,
                  std::string("canary from ") + std::string(to_string(cfg.status)));
    }
    if (!cfg.approved) throw Error(ErrorCode::kInvalidTransition, "config " + id + " is not approved");
    cfg.status = ConfigStatus::kCanary;
    record(id, cfg.status, "canary at fraction " + std::to_string(cfg.rollout_fraction));
    return cfg.status;
  }

  /// Promotes a healthy canary, rolls back an unhealthy one, and leaves a
  /// canary with too few sessions where it is.
  ConfigStatus lifecycle_advance(const std::string& id, const HealthMetrics& metrics) {
    std::unique_lock lock(mu_);
    auto& cfg = slot(id).config;
    if (cfg.status != ConfigStatus::kCanary) {
      throw Error(ErrorCode::kInvalidTransition,
                  std::string("advance from ") + std::string(to_string(cfg.status)));
    }
    if (metrics.sessions < policy_.min_sample) {
      spdlog::info("config {}: {} sessions, need {}; staying in canary", id, metrics.sessions, policy_.min_sample);
      return cfg.status;
    }
    HealthMetrics judged = metrics;
    judged.thresholds = policy_.thresholds;
    if (judged.healthy()) {
      cfg.status = ConfigStatus::kFullRollout;
      cfg.rollout_fraction = 1.0;
      record(id, cfg.status, "health ok");
      return cfg.status;
    }
    lock.unlock();
    rollback(id);
    return ConfigStatus::kRolledBack;
  }

  /// Stops delivery and tears down the config on every attached session.
  /// Returns the number of engines restored.
  std::size_t rollback(const std::string& id) {
    std::vector<Engine*> engines;
    {
      std::lock_guard lock(mu_);
      auto& s = slot(id);
      if (s.config.status != ConfigStatus::kRolledBack) {
        s.config.status = ConfigStatus::kRolledBack;
        record(id, s.config.status, "rollback");
      }
      engines.assign(s.engines.begin(), s.engines.end());
      s.engines.clear();
    }
    for (Engine* e : engines) e->deactivate_and_restore();
    return engines.size();
  }

  TraceConfig get(const std::string& id) const {
    std::lock_guard lock(mu_);
    return slot(id).config;
  }

  ConfigStatus status(const std::string& id) const { return get(id).status; }

  /// Whether a device should receive the config right now.
  bool admits(const std::string& id, std::string_view device_id) const {
    auto cfg = get(id);
    if (cfg.status != ConfigStatus::kCanary && cfg.status != ConfigStatus::kFullRollout) return false;
    return session_gate(device_id, cfg);
  }

  /// Registers a session engine running `id`, so rollback can reach it.
  /// Refused (false) once the config is rolled back.
  bool attach(const std::string& id, Engine& engine) {
    std::lock_guard lock(mu_);
    auto& s = slot(id);
    if (s.config.status == ConfigStatus::kRolledBack) return false;
    s.engines.insert(&engine);
    return true;
  }

  void detach(const std::string& id, Engine& engine) {
    std::lock_guard lock(mu_);
    auto it = configs_.find(id);
    if (it != configs_.end()) it->second.engines.erase(&engine);
  }

  std::size_t attached(const std::string& id) const {
    std::lock_guard lock(mu_);
    return slot(id).engines.size();
  }

  std::vector<HistoryEntry> history() const {
    std::lock_guard lock(mu_);
    return history_;
  }

 private:
  struct Slot {
    TraceConfig config;
    std::set<Engine*> engines;
  };

  Slot& slot(const std::string& id) {
    auto it = configs_.find(id);
    if (it == configs_.end()) throw Error(ErrorCode::kUnknownConfig, id);
    return it->second;
  }
  const Slot& slot(const std::string& id) const { return const_cast<ConfigManager*>(this)->slot(id); }

  void record(const std::string& id, ConfigStatus status, std::string note) {
    history_.push_back(HistoryEntry{history_.size() + 1, id, status, std::move(note)});
  }

  RolloutPolicy policy_;
  mutable std::mutex mu_;
  std::map<std::string, Slot> configs_;
  std::vector<HistoryEntry> history_;
};

}  // namespace xtrace
