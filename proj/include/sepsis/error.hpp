#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sepsis {

enum class ErrorCode {
    EmptyCohort,
    Validation,
    InsufficientData,
    DegenerateQuantiles,
    NonContractive,
    NoOverlap,
    UnsupportedState,
    RankDeficient,
    Separation,
    NonConvergence,
    UnknownCase,
    NotFound,
    Io,
};

std::string_view to_string(ErrorCode code);

// Every failure the library reports carries a machine-readable code; the
// message names the offending entity (row, patient, channel, column...).
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace sepsis
