#pragma once

#include <stdexcept>
#include <string>

namespace audioslots {

// Error classes. Anything a caller can trigger with bad input derives from
// std::runtime_error or std::invalid_argument so the CLI can map it to a
// nonzero exit with a message.

using InvalidArgument = std::invalid_argument;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct UnsupportedFormat : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NotFound : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

inline void require_shape(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace detail
}  // namespace audioslots
