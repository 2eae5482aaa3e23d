#pragma once

#include <cstdlib>
#include <iostream>
#include <string>
#include <string_view>

namespace taxengine::log {

enum class Level { Error = 0, Info = 1, Debug = 2 };

inline Level level_from_env()
{
    const char* raw = std::getenv("TAXENGINE_LOG");
    if (raw == nullptr) {
        return Level::Info;
    }
    const std::string_view v(raw);
    if (v == "error") return Level::Error;
    if (v == "debug") return Level::Debug;
    return Level::Info;
}

inline Level& threshold()
{
    static Level current = level_from_env();
    return current;
}

inline void write(Level lvl, std::string_view tag, std::string_view msg)
{
    if (static_cast<int>(lvl) <= static_cast<int>(threshold())) {
        std::cerr << "[taxengine " << tag << "] " << msg << '\n';
    }
}

inline void error(std::string_view msg) { write(Level::Error, "error", msg); }
inline void warn(std::string_view msg) { write(Level::Error, "warn", msg); }
inline void info(std::string_view msg) { write(Level::Info, "info", msg); }
inline void debug(std::string_view msg) { write(Level::Debug, "debug", msg); }

} // namespace taxengine::log
