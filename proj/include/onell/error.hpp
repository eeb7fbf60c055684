#pragma once

#include <stdexcept>
#include <string>

namespace onell {

/// A precondition of a library call was not met by the caller.
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// A file or stream could not be parsed into a valid object.
class LoadError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A configuration or manifest has invalid fields.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad command-line usage or unknown identifiers.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
    if (!condition) throw ContractViolation(message);
}

}  // namespace onell
