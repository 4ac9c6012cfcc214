#pragma once

// Small shared utilities.

#include <charconv>
#include <stdexcept>
#include <string>

namespace simul {

/// Shortest decimal string that round-trips the double exactly.
inline std::string number_str(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc())
    throw std::runtime_error("number_str: conversion failed");
  return std::string(buf, ptr);
}

}  // namespace simul
