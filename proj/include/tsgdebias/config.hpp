#pragma once

// Run configuration for the command-line workflow: JSON files plus dotted
// `key=value` overrides. A run config is a TrainConfig with two path fields.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsgdebias/errors.hpp"
#include "tsgdebias/training.hpp"

namespace tsgdb {

struct RunConfig {
  TrainConfig train;
  std::string data_dir;
  std::string out_dir;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = c.train;
  j["data_dir"] = c.data_dir;
  j["out_dir"] = c.out_dir;
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  nlohmann::json t = j;
  c.data_dir = t.value("data_dir", std::string{});
  c.out_dir = t.value("out_dir", std::string{});
  t.erase("data_dir");
  t.erase("out_dir");
  c.train = t.get<TrainConfig>();
}

inline void validate(const RunConfig& c) { validate(c.train); }

/// Sets `key=value` in `j`, where key is a dotted path to an existing field.
/// The value is parsed as JSON when possible and taken as a string otherwise.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  *node = std::move(value);
}

/// Merges defaults, an optional JSON file and overrides into T, then validates.
/// Every failure surfaces as ConfigError naming the cause.
template <class T>
T resolve_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides) {
  nlohmann::json j = T{};
  if (file) {
    std::ifstream is(*file);
    if (!is) throw ConfigError("cannot open config file " + file->string());
    const nlohmann::json patch = nlohmann::json::parse(is, nullptr, false);
    if (patch.is_discarded() || !patch.is_object()) throw ConfigError("config file is not a JSON object: " + file->string());
    for (const auto& [k, v] : patch.items()) {
      if (!j.contains(k)) throw ConfigError("unknown config key '" + k + "' in " + file->string());
      if (j[k].is_object() && v.is_object())
        j[k].merge_patch(v);
      else
        j[k] = v;
    }
  }
  for (const std::string& o : overrides) apply_override(j, o);
  T out;
  try {
    out = j.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config type error: ") + e.what());
  }
  validate(out);
  return out;
}

}  // namespace tsgdb
