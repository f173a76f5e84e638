#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace dpke::log {

enum class Level { kError = 0, kInfo = 1, kDebug = 2 };

/// Read once from DPKE_LOG (error|info|debug); defaults to info.
inline Level level() {
  static const Level lvl = [] {
    const char* env = std::getenv("DPKE_LOG");
    if (!env) return Level::kInfo;
    if (std::strcmp(env, "error") == 0) return Level::kError;
    if (std::strcmp(env, "debug") == 0) return Level::kDebug;
    return Level::kInfo;
  }();
  return lvl;
}

inline void write(Level at, const char* tag, const std::string& msg) {
  if (static_cast<int>(at) > static_cast<int>(level())) return;
  std::fprintf(stderr, "[dpke %s] %s\n", tag, msg.c_str());
}

inline void error(const std::string& msg) { write(Level::kError, "error", msg); }
inline void info(const std::string& msg) { write(Level::kInfo, "info", msg); }
inline void debug(const std::string& msg) { write(Level::kDebug, "debug", msg); }

}  // namespace dpke::log
