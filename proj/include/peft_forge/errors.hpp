#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace peft {

// Root of every error thrown by the library. The CLI maps these to exit code 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid numeric input to a quantizer (NaN, Inf, bad block size).
class QuantError : public Error {
public:
    using Error::Error;
};

// Stored data does not satisfy its own invariants (corrupt codes, size mismatch).
class IntegrityError : public Error {
public:
    using Error::Error;
};

// A configuration violates a documented precondition.
class ConfigError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

// Training produced a non-finite loss, gradient, or update.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, std::uint64_t step)
        : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
    explicit DivergenceError(const std::string& what) : Error(what) {}

    std::uint64_t step() const noexcept { return step_; }

private:
    std::uint64_t step_ = 0;
};

// A conversation record or log line failed schema validation.
class SchemaError : public Error {
public:
    SchemaError(std::string field, const std::string& rule)
        : Error(field + ": " + rule), field_(std::move(field)), rule_(rule) {}

    const std::string& field() const noexcept { return field_; }
    const std::string& rule() const noexcept { return rule_; }

private:
    std::string field_;
    std::string rule_;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace peft
