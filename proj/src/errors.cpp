#include "msmm/errors.hpp"

namespace msmm {

const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::MissingColumn: return "MissingColumn";
        case ErrorCode::NonIntegerOutcome: return "NonIntegerOutcome";
        case ErrorCode::NegativeOutcome: return "NegativeOutcome";
        case ErrorCode::MissingValue: return "MissingValue";
        case ErrorCode::MalformedCsv: return "MalformedCsv";
        case ErrorCode::InvalidDataset: return "InvalidDataset";
        case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
        case ErrorCode::InvalidSpec: return "InvalidSpec";
        case ErrorCode::RankDeficientDesign: return "RankDeficientDesign";
        case ErrorCode::NoConvergence: return "NoConvergence";
        case ErrorCode::SeparationSuspected: return "SeparationSuspected";
        case ErrorCode::NonBinaryTreatment: return "NonBinaryTreatment";
        case ErrorCode::OverflowGuard: return "OverflowGuard";
        case ErrorCode::ContrastOutsideSpan: return "ContrastOutsideSpan";
        case ErrorCode::SingularBread: return "SingularBread";
        case ErrorCode::TooManyRefitFailures: return "TooManyRefitFailures";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::ScenarioParse: return "ScenarioParse";
    }
    return "Unknown";
}

}  // namespace msmm
