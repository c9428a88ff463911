#include "msmm/data.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "msmm/errors.hpp"

namespace msmm {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
        s.remove_suffix(1);
    return s;
}

// Splits one CSV record. Double-quoted fields may contain commas; "" is an
// escaped quote.
std::vector<std::string> split_record(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cell.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cell.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            cells.emplace_back(trim(cell));
            cell.clear();
        } else {
            cell.push_back(c);
        }
    }
    cells.emplace_back(trim(cell));
    return cells;
}

bool is_missing(std::string_view cell) {
    return cell.empty() || cell == "NA" || cell == "NaN" || cell == "nan" || cell == "N/A";
}

std::optional<double> parse_number(std::string_view cell) {
    if (!cell.empty() && cell.front() == '+') cell.remove_prefix(1);
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
    if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(value))
        return std::nullopt;
    return value;
}

std::string format_number(double value) {
    std::array<char, 64> buf{};
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
    return std::string(buf.data(), ptr);
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

std::size_t resolve_covariate(std::string_view name, const std::vector<std::string>& names) {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end())
        throw Error(ErrorCode::InvalidSpec,
                    "unknown covariate '" + std::string(name) + "' in term");
    return static_cast<std::size_t>(it - names.begin());
}

}  // namespace

// ---------------------------------------------------------------------------
// Dataset

Dataset::Dataset(VectorXd outcome, VectorXd treatment, VectorXd mediator, MatrixXd covariates,
                 std::vector<std::string> covariate_names, std::string outcome_name,
                 std::string treatment_name, std::string mediator_name)
    : outcome_(std::move(outcome)),
      treatment_(std::move(treatment)),
      mediator_(std::move(mediator)),
      covariates_(std::move(covariates)),
      covariate_names_(std::move(covariate_names)),
      outcome_name_(std::move(outcome_name)),
      treatment_name_(std::move(treatment_name)),
      mediator_name_(std::move(mediator_name)) {
    const auto rows = outcome_.size();
    if (rows < 1) throw Error(ErrorCode::InvalidDataset, "dataset needs at least one record");
    if (treatment_.size() != rows || mediator_.size() != rows || covariates_.rows() != rows)
        throw Error(ErrorCode::InvalidDataset, "columns have different lengths");
    if (static_cast<std::size_t>(covariates_.cols()) != covariate_names_.size())
        throw Error(ErrorCode::InvalidDataset, "covariate names do not match covariate columns");
    for (Eigen::Index i = 0; i < rows; ++i) {
        const auto row = static_cast<std::size_t>(i) + 1;
        const double y = outcome_[i];
        if (!std::isfinite(y)) throw Error(ErrorCode::MissingValue, "outcome", row, outcome_name_);
        if (y < 0) throw Error(ErrorCode::NegativeOutcome, "outcome below zero", row, outcome_name_);
        if (y != std::floor(y))
            throw Error(ErrorCode::NonIntegerOutcome, "outcome is not an integer", row,
                        outcome_name_);
        if (!std::isfinite(treatment_[i]))
            throw Error(ErrorCode::MissingValue, "treatment", row, treatment_name_);
        if (!std::isfinite(mediator_[i]))
            throw Error(ErrorCode::MissingValue, "mediator", row, mediator_name_);
        for (Eigen::Index j = 0; j < covariates_.cols(); ++j)
            if (!std::isfinite(covariates_(i, j)))
                throw Error(ErrorCode::MissingValue, "covariate", row,
                            covariate_names_[static_cast<std::size_t>(j)]);
    }
}

std::optional<std::size_t> Dataset::covariate_index(std::string_view name) const {
    auto it = std::find(covariate_names_.begin(), covariate_names_.end(), name);
    if (it == covariate_names_.end()) return std::nullopt;
    return static_cast<std::size_t>(it - covariate_names_.begin());
}

bool Dataset::has_binary_treatment() const {
    bool zero = false, one = false;
    for (Eigen::Index i = 0; i < treatment_.size(); ++i) {
        if (treatment_[i] == 0.0)
            zero = true;
        else if (treatment_[i] == 1.0)
            one = true;
        else
            return false;
    }
    return zero && one;
}

void Dataset::require_binary_treatment() const {
    if (!has_binary_treatment())
        throw Error(ErrorCode::NonBinaryTreatment,
                    "treatment must take values in {0,1} with both levels present");
}

Dataset Dataset::select_rows(std::span<const std::size_t> rows) const {
    const auto m = static_cast<Eigen::Index>(rows.size());
    VectorXd y(m), z(m), med(m);
    MatrixXd x(m, covariates_.cols());
    for (Eigen::Index r = 0; r < m; ++r) {
        const auto src = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)]);
        if (src >= outcome_.size())
            throw Error(ErrorCode::IndexOutOfRange, "row index beyond dataset");
        y[r] = outcome_[src];
        z[r] = treatment_[src];
        med[r] = mediator_[src];
        x.row(r) = covariates_.row(src);
    }
    return Dataset(std::move(y), std::move(z), std::move(med), std::move(x), covariate_names_,
                   outcome_name_, treatment_name_, mediator_name_);
}

Dataset Dataset::with_columns(const VectorXd& outcome, const VectorXd& treatment,
                              const VectorXd& mediator) const {
    return Dataset(outcome, treatment, mediator, covariates_, covariate_names_, outcome_name_,
                   treatment_name_, mediator_name_);
}

Dataset Dataset::with_covariates(const MatrixXd& covariates) const {
    return Dataset(outcome_, treatment_, mediator_, covariates, covariate_names_, outcome_name_,
                   treatment_name_, mediator_name_);
}

// ---------------------------------------------------------------------------
// CSV

LoadResult read_csv(std::istream& in, const ColumnMapping& mapping, bool drop_incomplete) {
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::MalformedCsv, "missing header row");
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    const auto header = split_record(line);

    auto locate = [&](const std::string& name) {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end())
            throw Error(ErrorCode::MissingColumn, "column '" + name + "' not in header",
                        std::nullopt, name);
        return static_cast<std::size_t>(it - header.begin());
    };

    std::vector<std::string> names;
    names.push_back(mapping.outcome);
    names.push_back(mapping.treatment);
    names.push_back(mapping.mediator);
    names.insert(names.end(), mapping.covariates.begin(), mapping.covariates.end());
    std::vector<std::size_t> positions;
    for (const auto& name : names) positions.push_back(locate(name));

    const std::size_t width = names.size();
    std::vector<std::vector<double>> columns(width);
    std::size_t row = 0, dropped = 0;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        ++row;
        const auto cells = split_record(line);
        if (cells.size() != header.size())
            throw Error(ErrorCode::MalformedCsv,
                        "expected " + std::to_string(header.size()) + " cells, found " +
                            std::to_string(cells.size()),
                        row);

        std::vector<double> values(width);
        bool incomplete = false;
        for (std::size_t c = 0; c < width && !incomplete; ++c) {
            const std::string_view cell = cells[positions[c]];
            if (is_missing(cell)) {
                if (!drop_incomplete)
                    throw Error(ErrorCode::MissingValue, "empty cell in column '" + names[c] + "'",
                                row, names[c]);
                incomplete = true;
                break;
            }
            auto value = parse_number(cell);
            if (c == 0) {
                if (!value)
                    throw Error(ErrorCode::NonIntegerOutcome,
                                "outcome '" + std::string(cell) + "' is not an integer", row,
                                names[c]);
                if (*value < 0)
                    throw Error(ErrorCode::NegativeOutcome, "outcome below zero", row, names[c]);
                if (*value != std::floor(*value))
                    throw Error(ErrorCode::NonIntegerOutcome,
                                "outcome '" + std::string(cell) + "' is not an integer", row,
                                names[c]);
            } else if (!value) {
                throw Error(ErrorCode::MalformedCsv,
                            "cannot parse '" + std::string(cell) + "' in column '" + names[c] +
                                "'",
                            row, names[c]);
            }
            values[c] = *value;
        }
        if (incomplete) {
            ++dropped;
            continue;
        }
        for (std::size_t c = 0; c < width; ++c) columns[c].push_back(values[c]);
    }

    const auto n = static_cast<Eigen::Index>(columns[0].size());
    if (n == 0) throw Error(ErrorCode::InvalidDataset, "no complete data rows");
    auto to_vector = [&](std::size_t c) {
        return VectorXd(Eigen::Map<const VectorXd>(columns[c].data(), n));
    };
    MatrixXd x(n, static_cast<Eigen::Index>(mapping.covariates.size()));
    for (std::size_t j = 0; j < mapping.covariates.size(); ++j)
        x.col(static_cast<Eigen::Index>(j)) = to_vector(3 + j);

    return LoadResult{Dataset(to_vector(0), to_vector(1), to_vector(2), std::move(x),
                              mapping.covariates, mapping.outcome, mapping.treatment,
                              mapping.mediator),
                      dropped};
}

LoadResult load_csv(const std::string& path, const ColumnMapping& mapping, bool drop_incomplete) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::InvalidArgument, "cannot open '" + path + "'");
    return read_csv(in, mapping, drop_incomplete);
}

void write_csv(std::ostream& out, const Dataset& data) {
    out << csv_field(data.outcome_name()) << ',' << csv_field(data.treatment_name()) << ','
        << csv_field(data.mediator_name());
    for (const auto& name : data.covariate_names()) out << ',' << csv_field(name);
    out << '\n';
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(data.n()); ++i) {
        out << format_number(data.outcome()[i]) << ',' << format_number(data.treatment()[i])
            << ',' << format_number(data.mediator()[i]);
        for (Eigen::Index j = 0; j < data.covariates().cols(); ++j)
            out << ',' << format_number(data.covariates()(i, j));
        out << '\n';
    }
}

void save_csv(const std::string& path, const Dataset& data) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::InvalidArgument, "cannot write '" + path + "'");
    write_csv(out, data);
}

std::vector<std::string> split_list(std::string_view text) {
    std::vector<std::string> items;
    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find(',', start);
        if (end == std::string_view::npos) end = text.size();
        auto item = trim(text.substr(start, end - start));
        if (!item.empty()) items.emplace_back(item);
        start = end + 1;
    }
    return items;
}

// ---------------------------------------------------------------------------
// Terms

double BasisTerm::evaluate(double z, double m,
                           const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
    switch (kind) {
        case Kind::Z: return z;
        case Kind::M: return m;
        case Kind::ZM: return z * m;
        case Kind::ZX: return z * x[static_cast<Eigen::Index>(covariate)];
        case Kind::MX: return m * x[static_cast<Eigen::Index>(covariate)];
    }
    return 0.0;
}

double WeightTerm::covariate_factor(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
    return kind == Kind::Z ? 1.0 : x[static_cast<Eigen::Index>(covariate)];
}

double WeightTerm::evaluate(double z, const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
    return z * covariate_factor(x);
}

void EffectSpec::validate(std::size_t num_covariates) const {
    if (basis.empty()) throw Error(ErrorCode::InvalidSpec, "basis needs at least one term");
    if (weights.size() < basis.size())
        throw Error(ErrorCode::InvalidSpec,
                    "need at least as many weight terms (" + std::to_string(weights.size()) +
                        ") as basis terms (" + std::to_string(basis.size()) + ")");
    for (std::size_t i = 0; i < basis.size(); ++i) {
        if (basis[i].uses_covariate() && basis[i].covariate >= num_covariates)
            throw Error(ErrorCode::IndexOutOfRange, "basis term '" + basis[i].label +
                                                        "' references a missing covariate");
        for (std::size_t j = 0; j < i; ++j)
            if (basis[i] == basis[j])
                throw Error(ErrorCode::InvalidSpec, "duplicate basis term '" + basis[i].label + "'");
    }
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i].kind == WeightTerm::Kind::ZX && weights[i].covariate >= num_covariates)
            throw Error(ErrorCode::IndexOutOfRange, "weight term '" + weights[i].label +
                                                        "' references a missing covariate");
        for (std::size_t j = 0; j < i; ++j)
            if (weights[i] == weights[j])
                throw Error(ErrorCode::InvalidSpec,
                            "duplicate weight term '" + weights[i].label + "'");
    }
    if (augmentation) {
        for (auto j : augmentation->covariates)
            if (j >= num_covariates)
                throw Error(ErrorCode::IndexOutOfRange, "augmentation covariate out of range");
        if (augmentation->dimension() == 0)
            throw Error(ErrorCode::InvalidSpec, "augmentation model has no terms");
    }
}

std::vector<BasisTerm> parse_basis(std::string_view text,
                                   const std::vector<std::string>& covariate_names) {
    std::vector<BasisTerm> terms;
    for (const auto& token : split_list(text)) {
        BasisTerm term;
        term.label = token;
        auto colon = token.find(':');
        if (colon == std::string::npos) {
            if (token == "Z")
                term.kind = BasisTerm::Kind::Z;
            else if (token == "M")
                term.kind = BasisTerm::Kind::M;
            else
                throw Error(ErrorCode::InvalidSpec, "unknown basis term '" + token + "'");
        } else {
            auto lhs = std::string(trim(std::string_view(token).substr(0, colon)));
            auto rhs = std::string(trim(std::string_view(token).substr(colon + 1)));
            if (lhs == "Z" && rhs == "M") {
                term.kind = BasisTerm::Kind::ZM;
            } else if (lhs == "Z" || lhs == "M") {
                term.kind = lhs == "Z" ? BasisTerm::Kind::ZX : BasisTerm::Kind::MX;
                term.covariate = resolve_covariate(rhs, covariate_names);
            } else {
                throw Error(ErrorCode::InvalidSpec, "unknown basis term '" + token + "'");
            }
        }
        terms.push_back(std::move(term));
    }
    return terms;
}

std::vector<WeightTerm> parse_weights(std::string_view text,
                                      const std::vector<std::string>& covariate_names) {
    std::vector<WeightTerm> terms;
    for (const auto& token : split_list(text)) {
        WeightTerm term;
        term.label = token;
        auto colon = token.find(':');
        if (colon == std::string::npos) {
            if (token != "Z") throw Error(ErrorCode::InvalidSpec, "unknown weight term '" + token + "'");
        } else {
            auto lhs = trim(std::string_view(token).substr(0, colon));
            auto rhs = trim(std::string_view(token).substr(colon + 1));
            if (lhs != "Z") throw Error(ErrorCode::InvalidSpec, "unknown weight term '" + token + "'");
            term.kind = WeightTerm::Kind::ZX;
            term.covariate = resolve_covariate(rhs, covariate_names);
        }
        terms.push_back(std::move(term));
    }
    return terms;
}

Augmentation parse_augmentation(std::string_view text,
                                const std::vector<std::string>& covariate_names) {
    Augmentation aug;
    for (const auto& token : split_list(text)) {
        if (token == "1")
            aug.intercept = true;
        else if (token == "-1")
            aug.intercept = false;
        else
            aug.covariates.push_back(resolve_covariate(token, covariate_names));
    }
    return aug;
}

EffectSpec make_mediation_spec(const std::vector<std::string>& covariate_names,
                               const std::vector<std::size_t>& interaction_covariates) {
    EffectSpec spec;
    spec.basis = {BasisTerm{BasisTerm::Kind::Z, 0, "Z"}, BasisTerm{BasisTerm::Kind::M, 0, "M"}};
    spec.weights.push_back(WeightTerm{WeightTerm::Kind::Z, 0, "Z"});
    for (auto j : interaction_covariates) {
        if (j >= covariate_names.size())
            throw Error(ErrorCode::IndexOutOfRange, "interaction covariate out of range");
        spec.weights.push_back(WeightTerm{WeightTerm::Kind::ZX, j, "Z:" + covariate_names[j]});
    }
    return spec;
}

MatrixXd build_basis_matrix(const EffectSpec& spec, const Dataset& data) {
    for (const auto& t : spec.basis)
        if (t.uses_covariate() && t.covariate >= data.p())
            throw Error(ErrorCode::IndexOutOfRange,
                        "basis term '" + t.label + "' references a missing covariate");
    const auto n = static_cast<Eigen::Index>(data.n());
    MatrixXd h(n, static_cast<Eigen::Index>(spec.basis.size()));
    for (Eigen::Index i = 0; i < n; ++i)
        for (std::size_t k = 0; k < spec.basis.size(); ++k)
            h(i, static_cast<Eigen::Index>(k)) = spec.basis[k].evaluate(
                data.treatment()[i], data.mediator()[i], data.covariates().row(i));
    return h;
}

MatrixXd build_weight_matrix(const EffectSpec& spec, const Dataset& data) {
    for (const auto& t : spec.weights)
        if (t.kind == WeightTerm::Kind::ZX && t.covariate >= data.p())
            throw Error(ErrorCode::IndexOutOfRange,
                        "weight term '" + t.label + "' references a missing covariate");
    const auto n = static_cast<Eigen::Index>(data.n());
    MatrixXd a(n, static_cast<Eigen::Index>(spec.weights.size()));
    for (Eigen::Index i = 0; i < n; ++i)
        for (std::size_t l = 0; l < spec.weights.size(); ++l)
            a(i, static_cast<Eigen::Index>(l)) =
                spec.weights[l].evaluate(data.treatment()[i], data.covariates().row(i));
    return a;
}

VectorXd evaluate_basis(const EffectSpec& spec, double z, double m,
                        const Eigen::Ref<const Eigen::RowVectorXd>& x) {
    VectorXd h(static_cast<Eigen::Index>(spec.basis.size()));
    for (std::size_t k = 0; k < spec.basis.size(); ++k)
        h[static_cast<Eigen::Index>(k)] = spec.basis[k].evaluate(z, m, x);
    return h;
}

}  // namespace msmm
