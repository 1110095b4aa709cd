#pragma once

#include <stdexcept>
#include <string>

namespace lowent {

/// Malformed or out-of-range caller input (unknown token id, negative mass, empty corpus).
class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Invalid run parameters (gamma out of range, missing tagger head).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A file that parses but violates its declared layout.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InsufficientDataError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Raised when the threshold scorer fails; carries the threshold being scored.
class NavigationError : public std::runtime_error {
public:
    NavigationError(double tau, const std::string& what)
        : std::runtime_error("navigation failed at tau=" + std::to_string(tau) + ": " + what), tau_(tau) {}

    double tau() const noexcept { return tau_; }

private:
    double tau_;
};

}  // namespace lowent
