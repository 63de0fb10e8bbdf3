#pragma once

#include "surfmap/error.hpp"

#include "json.hpp"

#include <initializer_list>
#include <string>
#include <string_view>

namespace surfmap::config {

// Rejects keys of `j` that are not listed in `known`; `where` names the
// section in the error message.
inline void reject_unknown(const nlohmann::json& j, std::initializer_list<std::string_view> known,
                           std::string_view where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool found = false;
    for (auto k : known) found = found || k == key;
    if (!found) throw ConfigError(std::string(where) + ": unknown field \"" + key + "\"");
  }
}

// Overwrites `out` when `key` is present; type mismatches become ConfigError.
template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("field \"") + key + "\": " + e.what());
  }
}

}  // namespace surfmap::config
