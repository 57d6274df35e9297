#pragma once

#include <stdexcept>
#include <sstream>
#include <string>
#include <vector>
#include <cstdint>

namespace bissm {

// Shape-incompatible operands, bad axes, malformed dimensions.
class ShapeError : public std::runtime_error {
public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Out-of-domain arguments (empty mask, bad ratio, unknown scheme, ...).
class ValueError : public std::runtime_error {
public:
  explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finiteness is required (NaN grads, NaN loss).
class NumericError : public std::runtime_error {
public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed config file or CLI arguments; carries the offending field path.
class ConfigError : public std::runtime_error {
public:
  ConfigError(const std::string& field, const std::string& msg)
      : std::runtime_error(field + ": " + msg), field_(field) {}
  const std::string& field() const { return field_; }

private:
  std::string field_;
};

// I/O and format violations (bad magic, truncated file, ...).
class IoError : public std::runtime_error {
public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

inline std::string shape_str(const std::vector<std::int64_t>& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << " x ";
    os << s[i];
  }
  os << ')';
  return os.str();
}

}  // namespace detail

}  // namespace bissm
