#pragma once

#include <charconv>
#include <string>
#include <string_view>

#include "otbkg/error.hpp"

namespace otbkg {

/// Shortest representation that round-trips exactly.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw NumericalError("format_double: conversion failed");
  return std::string(buf, ptr);
}

inline double parse_double(std::string_view s, const std::string& where) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (!s.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last)
    throw DataError(where + ": cannot parse number '" + std::string(s) + "'");
  return v;
}

inline std::size_t parse_index(std::string_view s, const std::string& where) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty())
    throw DataError(where + ": cannot parse index '" + std::string(s) + "'");
  return v;
}

}  // namespace otbkg
