#ifndef EMGNET_ERRORS_HPP
#define EMGNET_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace emgnet {

// Error taxonomy mirrored by the CLI exit codes: usage/shape errors exit 1,
// data errors 2, numeric errors 3.

class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public UsageError {
public:
    explicit ShapeError(const std::string& msg) : UsageError(msg) {}
};

class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace emgnet

#endif
