#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace evmorph {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Malformed input file. Carries the 1-based line (text formats) or byte offset (binary formats).
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t location)
        : Error(what + " (at " + std::to_string(location) + ")"), location_(location) {}

    std::size_t location() const noexcept { return location_; }

private:
    std::size_t location_;
};

class BoundsError : public Error {
public:
    using Error::Error;
};

/// Meshes or offsets that do not share a vertex count.
class TopologyError : public Error {
public:
    using Error::Error;
};

/// Rank-deficient camera configuration or linear system.
class SingularError : public Error {
public:
    using Error::Error;
};

class DegenerateDataError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// Non-finite loss during optimization.
class DivergenceError : public Error {
public:
    using Error::Error;
};

}  // namespace evmorph
