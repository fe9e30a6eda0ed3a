#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace atm {

// Base for all library errors. The category string is what the CLI prints
// on its diagnostic stream and embeds in error records.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& message)
        : std::runtime_error(message), category_(std::move(category)) {}

    const std::string& category() const noexcept { return category_; }

private:
    std::string category_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& m) : Error("shape", m) {}
};

struct DegenerateInputError : Error {
    explicit DegenerateInputError(const std::string& m) : Error("degenerate-input", m) {}
};

struct ParseError : Error {
    explicit ParseError(const std::string& m) : Error("parse", m) {}
};

struct BoundsError : Error {
    explicit BoundsError(const std::string& m) : Error("bounds", m) {}
};

struct InvariantViolation : Error {
    explicit InvariantViolation(const std::string& m) : Error("invariant", m) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error("config", m) {}
};

struct InfeasibleError : Error {
    explicit InfeasibleError(const std::string& m) : Error("infeasible", m) {}
};

}  // namespace atm
