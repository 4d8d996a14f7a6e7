#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace ragopt {

// Throws ParseError when the file cannot be read.
std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temporary file and renames it over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace ragopt
