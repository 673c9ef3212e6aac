// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace amfd {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeMismatch : public Error {
public:
    using Error::Error;
};

class NonFiniteValue : public Error {
public:
    using Error::Error;
};

class EmptyInput : public Error {
public:
    using Error::Error;
};

class BadAxis : public Error {
public:
    using Error::Error;
};

class NotScalar : public Error {
public:
    using Error::Error;
};

class PyramidMismatch : public Error {
public:
    using Error::Error;
};

class WrongMode : public Error {
public:
    using Error::Error;
};

class BadSpec : public Error {
public:
    using Error::Error;
};

class NoGroundTruth : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class UsageError : public Error {
public:
    using Error::Error;
};

/// Raised by the training loop when a step produces a NaN/Inf loss.
class NonFiniteLoss : public Error {
public:
    NonFiniteLoss(std::size_t step, const std::string& what)
        : Error("non-finite loss at step " + std::to_string(step) + ": " + what), step_(step) {}

    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

} // namespace amfd
