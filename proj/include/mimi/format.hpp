#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace mimi {

/// Shortest decimal text that parses back to the identical double.
std::string format_double(double value);
double parse_double(std::string_view text, std::string_view context);
std::uint64_t parse_u64(std::string_view text, std::string_view context);
bool parse_bool(std::string_view text, std::string_view context);

std::string_view trim(std::string_view text);
std::vector<std::string> split_list(std::string_view text, char sep = ',');

/// Parses "key=value" lines; '#' starts a comment, blank lines are skipped.
std::map<std::string, std::string> parse_kv_text(std::string_view text);

}  // namespace mimi
