#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace voltran {

struct check_error : std::runtime_error {
  explicit check_error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
[[noreturn]] inline void check_fail(const char* expr, const char* file, int line,
                                    const std::string& msg) {
  std::ostringstream os;
  os << "check failed: " << expr << " at " << file << ":" << line;
  if (!msg.empty()) os << " -- " << msg;
  throw check_error(os.str());
}

template <typename... Ts>
std::string cat_msg(const Ts&... ts) {
  if constexpr (sizeof...(Ts) == 0) {
    return {};
  } else {
    std::ostringstream os;
    (os << ... << ts);
    return os.str();
  }
}
}  // namespace detail

}  // namespace voltran

#define VT_CHECK(cond, ...)                                                      \
  do {                                                                           \
    if (!(cond))                                                                 \
      ::voltran::detail::check_fail(#cond, __FILE__, __LINE__,                   \
                                    ::voltran::detail::cat_msg(__VA_ARGS__));    \
  } while (0)
