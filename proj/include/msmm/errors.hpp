#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace msmm {

enum class ErrorCode {
    MissingColumn,
    NonIntegerOutcome,
    NegativeOutcome,
    MissingValue,
    MalformedCsv,
    InvalidDataset,
    IndexOutOfRange,
    InvalidSpec,
    RankDeficientDesign,
    NoConvergence,
    SeparationSuspected,
    NonBinaryTreatment,
    OverflowGuard,
    ContrastOutsideSpan,
    SingularBread,
    TooManyRefitFailures,
    InvalidArgument,
    ScenarioParse,
};

const char* to_string(ErrorCode code);

/// Every failure raised by the library carries a code so callers can branch
/// without parsing messages. Data errors additionally carry a 1-based row and
/// a column name.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message,
          std::optional<std::size_t> row = std::nullopt, std::string column = {})
        : std::runtime_error(std::string(to_string(code)) + ": " + message),
          code_(code), row_(row), column_(std::move(column)) {}

    ErrorCode code() const noexcept { return code_; }
    std::optional<std::size_t> row() const noexcept { return row_; }
    const std::string& column() const noexcept { return column_; }

private:
    ErrorCode code_;
    std::optional<std::size_t> row_;
    std::string column_;
};

}  // namespace msmm
