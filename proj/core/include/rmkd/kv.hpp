#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace rmkd {

// Shortest round-trip-safe text for a double (%.17g).
std::string format_double(double v);

// Strict parsers; the whole string must be consumed. Errors name `key`.
double parse_double(const std::string& key, const std::string& value);
std::uint64_t parse_u64(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);
// Comma-separated list of numbers.
std::vector<double> parse_double_list(const std::string& key, const std::string& value);
std::vector<std::uint64_t> parse_u64_list(const std::string& key, const std::string& value);

// "key=value" lines; blank lines and lines starting with '#' are skipped,
// whitespace around keys and values is trimmed. Later keys win. Malformed
// lines throw ConfigError naming the line number.
std::map<std::string, std::string> parse_kv_text(std::string_view text);

}  // namespace rmkd
