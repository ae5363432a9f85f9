#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tca {

// Precondition violated by the caller.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Input is well-formed but mathematically unusable (zero vector, zero mean).
class DegenerateInput : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class SchemaError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class MissingClass : public std::out_of_range {
public:
    explicit MissingClass(const std::string& name)
        : std::out_of_range("unknown class: '" + name + "'"), class_name_(name) {}
    const std::string& class_name() const noexcept { return class_name_; }

private:
    std::string class_name_;
};

class CorruptionError : public std::runtime_error {
public:
    CorruptionError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class VersionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite loss or gradient during tuning.
class NumericFailure : public std::runtime_error {
public:
    NumericFailure(const std::string& what, std::size_t step)
        : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

}  // namespace tca
