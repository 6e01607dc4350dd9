#pragma once

#include <stdexcept>
#include <string>

namespace dollar {

/// Raised when a caller breaks an operation's precondition (bad shape,
/// timestep out of range, frozen-model misuse, ...).
class ContractViolation : public std::logic_error {
public:
    explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

/// Raised when a numerical run cannot continue (NaN loss, diverged model).
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& what) {
    if (!cond) {
        throw ContractViolation(what);
    }
}

}  // namespace dollar
