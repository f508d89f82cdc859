#pragma once

// Tiny leveled logger controlled by the FIT_LOG environment variable
// (error|warn|info|debug, default warn).  Writes to stderr so stdout
// stays clean for machine-readable output.

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>

namespace fit::log {

enum class Level { Error = 0, Warn = 1, Info = 2, Debug = 3 };

inline Level level_from_env() {
    const char* v = std::getenv("FIT_LOG");
    if (v == nullptr) return Level::Warn;
    std::string s(v);
    if (s == "error") return Level::Error;
    if (s == "warn") return Level::Warn;
    if (s == "info") return Level::Info;
    if (s == "debug") return Level::Debug;
    return Level::Warn;
}

inline Level threshold() {
    static Level lvl = level_from_env();
    return lvl;
}

inline void emit(Level lvl, const char* tag, const std::string& msg) {
    if (lvl > threshold()) return;
    std::cerr << "[fit][" << tag << "] " << msg << "\n";
}

inline void error(const std::string& msg) { emit(Level::Error, "error", msg); }
inline void warn(const std::string& msg) { emit(Level::Warn, "warn", msg); }
inline void info(const std::string& msg) { emit(Level::Info, "info", msg); }
inline void debug(const std::string& msg) { emit(Level::Debug, "debug", msg); }

}  // namespace fit::log
