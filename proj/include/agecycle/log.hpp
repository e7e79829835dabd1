#pragma once

#include <iostream>
#include <string_view>

namespace agecycle::log {

inline void info(std::string_view msg) { std::clog << "[info] " << msg << '\n'; }
inline void warn(std::string_view msg) { std::clog << "[warn] " << msg << '\n'; }

}  // namespace agecycle::log
