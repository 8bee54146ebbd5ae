#pragma once

#include <stdexcept>
#include <string>

namespace mossfloq {

/// Argument outside the supported domain of a numerical routine.
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// A quadrature or iterative solver failed to reach its tolerance.
class ConvergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent configuration / input data.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// File could not be read or written.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Linear system without full rank.
class RankError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace mossfloq
