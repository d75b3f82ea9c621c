#include "roaforge/log.hpp"

#include <cstdlib>
#include <iostream>
#include <mutex>

namespace roaforge::log {

namespace {

Level parse_env() {
  const char* env = std::getenv("ROAFORGE_LOG");
  if (env == nullptr) return Level::info;
  std::string s(env);
  if (s == "debug") return Level::debug;
  if (s == "info") return Level::info;
  if (s == "warn") return Level::warn;
  if (s == "error") return Level::error;
  if (s == "off") return Level::off;
  return Level::info;
}

Level g_threshold = parse_env();
std::mutex g_mutex;

const char* tag(Level lvl) {
  switch (lvl) {
    case Level::debug: return "debug";
    case Level::info: return "info";
    case Level::warn: return "warn";
    case Level::error: return "error";
    default: return "?";
  }
}

}  // namespace

Level threshold() { return g_threshold; }
void set_threshold(Level lvl) { g_threshold = lvl; }

void write(Level lvl, const std::string& msg) {
  std::scoped_lock lock(g_mutex);
  std::cerr << "[" << tag(lvl) << "] " << msg << "\n";
}

}  // namespace roaforge::log
