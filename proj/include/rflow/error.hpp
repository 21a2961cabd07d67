#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rflow {

// Stable error codes surfaced through exceptions and CLI exit messages.
enum class Err {
    ShapeMismatch,
    InvalidStride,
    NotScalar,
    NoTape,
    OddDim,
    IndivisibleExtent,
    BadMagic,
    UnsupportedDatatype,
    UnsupportedDims,
    InvalidSpacing,
    NoForeground,
    OutOfBounds,
    ZeroReference,
    ZeroVariance,
    TooSmall,
    TooFewSamples,
    TOutOfRange,
    DataMissing,
    ConfigInvalid,
    CheckpointMismatch,
    MissingPrediction,
    Internal,
};

std::string_view err_name(Err code);

// True for errors caused by bad user input/config (CLI exit code 2),
// false for internal/logic failures (exit code 1).
bool err_is_user_input(Err code);

class Error : public std::runtime_error {
public:
    Error(Err code, const std::string& msg)
        : std::runtime_error(std::string(err_name(code)) + ": " + msg), code_(code) {}

    Err code() const { return code_; }

private:
    Err code_;
};

[[noreturn]] inline void fail(Err code, const std::string& msg) { throw Error(code, msg); }

inline void check(bool ok, Err code, const std::string& msg) {
    if (!ok) fail(code, msg);
}

}  // namespace rflow
