#pragma once

#include <stdexcept>
#include <string>

namespace mixcaps {

// Error taxonomy shared by the whole library. The CLI maps each class to a
// distinct exit code, so new categories belong here rather than ad-hoc
// runtime_errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/extent disagreement between tensors or between a tensor and a config.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Non-finite values produced or consumed where finite math is required.
class NumericError : public Error {
public:
    using Error::Error;
};

// A caller violated an operation's stated precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

// Malformed or incompatible on-disk artifacts (datasets, checkpoints, configs).
class FormatError : public Error {
public:
    using Error::Error;
};

// Mixture posterior update with an all-zero weighted likelihood.
class DegenerateLikelihoodError : public Error {
public:
    using Error::Error;
};

}  // namespace mixcaps
