#pragma once

#include <charconv>
#include <istream>
#include <string>
#include <string_view>
#include <system_error>

#include "gspt/errors.hpp"

namespace gspt::detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_value(const std::string& text, const std::string& where) {
    T value{};
    const char* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc() || ptr != end) throw ConfigError(where + ": cannot parse \"" + text + "\"");
    return value;
}

inline bool parse_flag(const std::string& text, const std::string& where) {
    const int v = parse_value<int>(text, where);
    if (v != 0 && v != 1) throw ConfigError(where + ": expected 0 or 1, got \"" + text + "\"");
    return v == 1;
}

/// Calls set(key, value, where) for every key=value line; blank lines and '#'
/// comments are skipped.
template <typename Setter>
void for_each_entry(std::istream& in, const std::string& source, Setter set) {
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string body = trim(line);
        if (body.empty() || body.front() == '#') continue;
        const std::string where = source + ":" + std::to_string(line_no);
        const auto eq = body.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key=value");
        set(trim(std::string_view(body).substr(0, eq)), trim(std::string_view(body).substr(eq + 1)), where);
    }
}

} // namespace gspt::detail
