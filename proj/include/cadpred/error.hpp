#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cadpred {

enum class Errc {
    MissingColumn,
    UnparseableCell,
    MissingOutcome,
    NonBinaryOutcome,
    TooFewRows,
    TooFewObserved,
    SingularRegression,
    LengthMismatch,
    OutOfRange,
    DomainError,
    ConstantColumn,
    DegenerateMatrix,
    DimensionMismatch,
    SingularInformation,
    NoClassVariation,
    NoConvergence,
    FoldTooSmall,
    EmptyNode,
    GridEmpty,
    NoSplits,
    OneClassOnly,
    EmptyInput,
    InfeasibleConfig,
    InvalidConfig,
    Io,
};

inline std::string_view errc_name(Errc c)
{
    switch (c) {
    case Errc::MissingColumn: return "MissingColumn";
    case Errc::UnparseableCell: return "UnparseableCell";
    case Errc::MissingOutcome: return "MissingOutcome";
    case Errc::NonBinaryOutcome: return "NonBinaryOutcome";
    case Errc::TooFewRows: return "TooFewRows";
    case Errc::TooFewObserved: return "TooFewObserved";
    case Errc::SingularRegression: return "SingularRegression";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::OutOfRange: return "OutOfRange";
    case Errc::DomainError: return "DomainError";
    case Errc::ConstantColumn: return "ConstantColumn";
    case Errc::DegenerateMatrix: return "DegenerateMatrix";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::SingularInformation: return "SingularInformation";
    case Errc::NoClassVariation: return "NoClassVariation";
    case Errc::NoConvergence: return "NoConvergence";
    case Errc::FoldTooSmall: return "FoldTooSmall";
    case Errc::EmptyNode: return "EmptyNode";
    case Errc::GridEmpty: return "GridEmpty";
    case Errc::NoSplits: return "NoSplits";
    case Errc::OneClassOnly: return "OneClassOnly";
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::InfeasibleConfig: return "InfeasibleConfig";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::Io: return "Io";
    }
    return "Unknown";
}

/// Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code)
    {
    }

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

} // namespace cadpred
