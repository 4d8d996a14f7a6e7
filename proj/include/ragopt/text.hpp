#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace ragopt::text {

// Lowercased words made of ASCII alphanumerics and any non-ASCII bytes;
// every other character separates words.
std::vector<std::string> words(std::string_view s);

// words() joined by single spaces.
std::string normalize(std::string_view s);

std::string join(const std::vector<std::string>& parts, std::string_view sep);

bool is_word_byte(unsigned char c);

}  // namespace ragopt::text
