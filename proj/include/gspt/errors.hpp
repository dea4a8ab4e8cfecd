#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gspt {

/// Precondition on an argument was violated (bad k, empty batch, ...).
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Input data is unusable (non-finite coordinates, empty file, ...).
class InvalidInput : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A file could not be parsed. `line()` is 1-based for text formats, 0 for binary;
/// `offset()` is the byte offset for binary formats.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::size_t line, std::size_t offset = 0)
        : std::runtime_error(what), line_(line), offset_(offset) {}

    std::size_t line() const noexcept { return line_; }
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t line_;
    std::size_t offset_;
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace gspt
