// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace hfp {

/// Engine-wide exception. Messages are single-line and name the offending
/// entity (layer id, dimension, file offset, ...).
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename Head, typename... Tail>
void format_into(std::ostringstream& os, Head&& head, Tail&&... tail) {
  os << std::forward<Head>(head);
  format_into(os, std::forward<Tail>(tail)...);
}
}  // namespace detail

template <typename... Args>
[[noreturn]] void fail(Args&&... args) {
  std::ostringstream os;
  detail::format_into(os, std::forward<Args>(args)...);
  throw Error(os.str());
}

template <typename... Args>
void require(bool cond, Args&&... args) {
  if (!cond) fail(std::forward<Args>(args)...);
}

}  // namespace hfp
