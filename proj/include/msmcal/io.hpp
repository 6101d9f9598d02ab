#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace msmcal::io {

// Shortest decimal representation that parses back to the same double.
std::string format_double(double x);

// Strict decimal parse; nullopt on trailing garbage or empty input.
std::optional<double> parse_double(std::string_view text);
std::optional<long long> parse_int(std::string_view text);

std::string_view trim(std::string_view s);

// Split one CSV line on commas. No quoting: ids and headers may not contain commas.
std::vector<std::string_view> split_csv(std::string_view line);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);

}  // namespace msmcal::io
