#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace urbanform {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input file. `line()` is 0 when the format has no line notion.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : Error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Arguments or configuration that violate an operation's preconditions.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// A numerical procedure that could not produce a result (collapse, no data).
class ComputeError : public Error {
public:
    using Error::Error;
};

}  // namespace urbanform
