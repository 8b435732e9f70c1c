#pragma once

#include <fstream>
#include <initializer_list>
#include <string>

#include <json.hpp>

#include "poseprior/common.hpp"

namespace poseprior {

using json = nlohmann::json;

/// Strict-parsing guard: any key outside `allowed` is a schema error, so a
/// misspelled hyperparameter cannot be silently ignored.
inline void check_keys(const json& j, std::initializer_list<const char*> allowed,
                       const std::string& context) {
  require(j.is_object(), ErrorCode::schema, context + ": expected a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* key : allowed) {
      if (item.key() == key) {
        known = true;
        break;
      }
    }
    require(known, ErrorCode::schema,
            context + ": unknown key '" + item.key() + "'");
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorCode::schema, std::string("bad value for '") + key + "': " + e.what());
  }
}

inline json parse_json_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::missing_file, "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::schema, path + ": " + e.what());
  }
}

}  // namespace poseprior
