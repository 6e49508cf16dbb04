#pragma once

// Strict scalar parsing for config values. Every failure is a ConfigError
// naming the key.

#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <string>
#include <string_view>

#include "caft/errors.hpp"

namespace caft::parse {

inline std::size_t size(std::string_view key, std::string_view value) {
  std::size_t out = 0;
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (value.empty() || ec != std::errc() || ptr != end) {
    throw ConfigError("invalid non-negative integer for " + std::string(key) + ": '" +
                      std::string(value) + "'");
  }
  return out;
}

inline std::uint64_t u64(std::string_view key, std::string_view value) {
  std::uint64_t out = 0;
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (value.empty() || ec != std::errc() || ptr != end) {
    throw ConfigError("invalid unsigned integer for " + std::string(key) + ": '" +
                      std::string(value) + "'");
  }
  return out;
}

inline int integer(std::string_view key, std::string_view value) {
  int out = 0;
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (value.empty() || ec != std::errc() || ptr != end) {
    throw ConfigError("invalid integer for " + std::string(key) + ": '" + std::string(value) +
                      "'");
  }
  return out;
}

inline double real(std::string_view key, std::string_view value) {
  const std::string text(value);
  char* end = nullptr;
  errno = 0;
  const double out = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size() || errno == ERANGE ||
      !std::isfinite(out)) {
    throw ConfigError("invalid number for " + std::string(key) + ": '" + text + "'");
  }
  return out;
}

inline bool boolean(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("invalid boolean for " + std::string(key) + ": '" + std::string(value) +
                    "'");
}

// Shortest text that parses back to exactly `v`.
inline std::string real_text(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace caft::parse
