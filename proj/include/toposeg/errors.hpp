#pragma once

#include <stdexcept>
#include <string>

namespace toposeg {

// I/O failures. The CLI maps these to exit code 2.
struct io_error : std::runtime_error {
    explicit io_error(const std::string& what) : std::runtime_error(what) {}
};

// Bad configuration files or option values. CLI exit code 3.
struct config_error : std::runtime_error {
    explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

// Numeric failures: non-finite losses, undefined fractal dimension,
// gradient checks above threshold. CLI exit code 4.
struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

} // namespace toposeg
