#pragma once

#include <iostream>
#include <string>

namespace fairseg {

inline void log_warn(const std::string& msg) { std::cerr << "[warn] " << msg << std::endl; }
inline void log_info(const std::string& msg) { std::cerr << "[info] " << msg << std::endl; }

}  // namespace fairseg
