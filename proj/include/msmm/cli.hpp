#pragma once

#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

namespace msmm::cli {

inline constexpr int kExitSuccess = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitWeakIdentification = 2;

inline constexpr unsigned long long kDefaultSeed = 20240401ULL;

/// A rendered report is a header of key/value pairs plus named tables. The
/// three output formats are projections of the same object.
using Cell = std::variant<std::string, double, long long>;

struct Table {
    std::string name;
    std::vector<std::string> columns;
    std::vector<std::vector<Cell>> rows;
};

struct Report {
    std::string command;
    std::vector<std::pair<std::string, std::string>> header;
    std::vector<Table> tables;
    std::vector<std::string> warnings;
};

enum class Format { Table, Csv, Json };

/// Human table: 6 significant digits. CSV and JSON: shortest round-trip.
void render(std::ostream& out, const Report& report, Format format);

/// Entry point behind the `msmm` executable. Returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace msmm::cli
