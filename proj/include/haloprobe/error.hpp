#pragma once

#include <stdexcept>
#include <string>

namespace haloprobe {

/// Failure categories. Each maps onto one CLI exit code.
enum class ErrorKind {
    config,      // bad flag, missing file, invalid configuration
    validation,  // malformed or out-of-contract data
    divergence,  // training produced a non-finite loss
    protocol,    // generator protocol violation or timeout
    io,          // read/write failure on an existing path
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

/// 0 ok, 2 config, 3 data validation, 4 training divergence, 5 protocol.
int exit_code(ErrorKind kind) noexcept;

const char* to_string(ErrorKind kind) noexcept;

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

}  // namespace haloprobe
