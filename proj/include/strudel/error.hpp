#pragma once

#include <stdexcept>
#include <string>

namespace strudel {

/// Base of every error raised by the library. `module()` names the component
/// that detected the violation so the CLI can attribute failures.
class Error : public std::runtime_error {
public:
    Error(std::string module, const std::string& what)
        : std::runtime_error(module + ": " + what), module_(std::move(module)) {}

    const std::string& module() const noexcept { return module_; }

private:
    std::string module_;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class RoutingError : public Error {
public:
    using Error::Error;
};

class ExhaustionError : public Error {
public:
    ExhaustionError(const std::string& module, const std::string& what, std::size_t remaining)
        : Error(module, what), remaining_(remaining) {}
    std::size_t remaining() const noexcept { return remaining_; }

private:
    std::size_t remaining_;
};

class NonFiniteLossError : public Error {
public:
    using Error::Error;
};

class DegenerateSampleError : public Error {
public:
    using Error::Error;
};

/// Raised when a training path tries to read a quarantined target mask.
class QuarantineError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class ReportError : public Error {
public:
    using Error::Error;
};

/// Invalid invocation: unknown method, missing flag, occupied output
/// directory.
class UsageError : public Error {
public:
    using Error::Error;
};

}  // namespace strudel
