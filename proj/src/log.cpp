#include "prima/log.hpp"

#include <atomic>
#include <cstdio>

namespace prima::log {

namespace {
std::atomic<Level> current{Level::Warn};

void emit(const char* tag, const std::string& message) {
  std::fprintf(stderr, "[%s] %s\n", tag, message.c_str());
}
}  // namespace

void set_level(Level l) { current = l; }
Level level() { return current; }

void warn(const std::string& m) {
  if (current >= Level::Warn) emit("warn", m);
}
void info(const std::string& m) {
  if (current >= Level::Info) emit("info", m);
}
void debug(const std::string& m) {
  if (current >= Level::Debug) emit("debug", m);
}

}  // namespace prima::log
