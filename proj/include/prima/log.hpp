#pragma once

#include <string>

namespace prima::log {

enum class Level { Quiet = 0, Warn = 1, Info = 2, Debug = 3 };

void set_level(Level level);
Level level();

void warn(const std::string& message);
void info(const std::string& message);
void debug(const std::string& message);

}  // namespace prima::log
