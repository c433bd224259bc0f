#pragma once

#include <stdexcept>
#include <string>

namespace marl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or out-of-range user input (configs, specs, arguments).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A game or table exceeds the desk-scale size cap.
class SizeError : public Error {
public:
    using Error::Error;
};

/// The chain induced by a policy has no unique stationary distribution,
/// or power iteration did not converge.
class ErgodicityError : public Error {
public:
    using Error::Error;
};

/// Malformed serialized input. `where` carries a location hint.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::string where = {})
        : Error(where.empty() ? what : what + " (at " + where + ")"), where_(std::move(where)) {}
    const std::string& where() const noexcept { return where_; }

private:
    std::string where_;
};

} // namespace marl
