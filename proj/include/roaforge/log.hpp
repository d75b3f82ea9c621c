#pragma once

#include <sstream>
#include <string>

namespace roaforge::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

// Threshold comes from ROAFORGE_LOG (debug|info|warn|error|off); default info.
Level threshold();
void set_threshold(Level lvl);
void write(Level lvl, const std::string& msg);

template <typename... Args>
void emit(Level lvl, Args&&... args) {
  if (lvl < threshold()) return;
  std::ostringstream os;
  (os << ... << args);
  write(lvl, os.str());
}

template <typename... Args>
void debug(Args&&... args) { emit(Level::debug, std::forward<Args>(args)...); }
template <typename... Args>
void info(Args&&... args) { emit(Level::info, std::forward<Args>(args)...); }
template <typename... Args>
void warn(Args&&... args) { emit(Level::warn, std::forward<Args>(args)...); }
template <typename... Args>
void error(Args&&... args) { emit(Level::error, std::forward<Args>(args)...); }

}  // namespace roaforge::log
