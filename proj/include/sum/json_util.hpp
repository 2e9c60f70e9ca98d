// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <set>
#include <string>

#include "json.hpp"
#include "sum/error.hpp"

namespace sum {

// Reads fields from a JSON object and rejects any key that was never read.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename V>
  V get(const std::string& key, const V& fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    return convert<V>(key);
  }

  template <typename V>
  V require(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(where_ + ": missing key '" + key + "'");
    return convert<V>(key);
  }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
    }
  }

 private:
  template <typename V>
  V convert(const std::string& key) const {
    try {
      return j_.at(key).get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace sum
