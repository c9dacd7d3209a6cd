#pragma once

#include <json.hpp>

#include <iosfwd>
#include <string>
#include <vector>

namespace exprclone {

/// Applies `key=value` overrides; dotted keys descend into objects and values parse as JSON when they can.
void apply_overrides(nlohmann::json& config, const std::vector<std::string>& overrides);

/// Reads a JSON config file (empty object when `path` is empty) and applies overrides.
nlohmann::json load_config(const std::string& path, const std::vector<std::string>& overrides);

/// Exit codes: 0 success, 1 runtime error, 2 usage error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace exprclone
