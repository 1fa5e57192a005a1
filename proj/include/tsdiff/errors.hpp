#pragma once

#include <stdexcept>
#include <string>

namespace tsdiff {

/// Tensor shapes that do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed or unreadable input data (RAW containers, config files, checkpoints).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A NaN or Inf appeared where finite values are required.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operation not permitted in the model's current lifecycle stage.
class ModeError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

} // namespace tsdiff
