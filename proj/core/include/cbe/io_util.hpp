// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cbe::io {

/// Shortest decimal text that parses back to the identical double.
std::string format_double(double value);

double parse_double(std::string_view text, std::string_view context);
long long parse_int(std::string_view text, std::string_view context);

std::vector<std::string_view> split(std::string_view line, char sep);

std::string read_file(const std::filesystem::path& path);

/// Writes to `<path>.tmp` and renames over `path` once the write succeeded.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace cbe::io
