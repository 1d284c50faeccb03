#pragma once

#include <string>

namespace dcar::log {

enum class Level { debug, info, warn, error, off };

void set_level(Level level);
void debug(const std::string& msg);
void info(const std::string& msg);
void warn(const std::string& msg);
void error(const std::string& msg);

}  // namespace dcar::log
