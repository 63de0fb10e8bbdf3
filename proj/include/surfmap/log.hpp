#pragma once

#include <atomic>
#include <cstdint>
#include <iostream>
#include <string_view>

namespace surfmap::log {

inline std::atomic<bool>& quiet() {
  static std::atomic<bool> flag{false};
  return flag;
}

inline std::atomic<int64_t>& warning_count() {
  static std::atomic<int64_t> n{0};
  return n;
}

// Prints the first few warnings, then every 1000th.
inline void warn(std::string_view message) {
  const int64_t n = warning_count().fetch_add(1);
  if (quiet()) return;
  if (n < 5 || n % 1000 == 0) std::cerr << "warning: " << message << " (#" << n + 1 << ")\n";
}

}  // namespace surfmap::log
