#pragma once

#include <iostream>
#include <string_view>

namespace gspull {

enum class LogLevel { Quiet = 0, Warn, Info };

inline LogLevel& log_level() {
    static LogLevel level = LogLevel::Warn;
    return level;
}

inline void log_warning(std::string_view msg) {
    if (log_level() >= LogLevel::Warn) std::cerr << "warning: " << msg << '\n';
}

inline void log_info(std::string_view msg) {
    if (log_level() >= LogLevel::Info) std::cerr << msg << '\n';
}

} // namespace gspull
