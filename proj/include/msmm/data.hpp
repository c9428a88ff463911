#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace msmm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Observed (Y, Z, M, X) records. Validated on construction and immutable
/// afterwards: equal row counts, n >= 1, finite cells, outcome entries are
/// non-negative integers.
class Dataset {
public:
    Dataset(VectorXd outcome, VectorXd treatment, VectorXd mediator, MatrixXd covariates,
            std::vector<std::string> covariate_names, std::string outcome_name = "y",
            std::string treatment_name = "z", std::string mediator_name = "m");

    std::size_t n() const noexcept { return static_cast<std::size_t>(outcome_.size()); }
    std::size_t p() const noexcept { return static_cast<std::size_t>(covariates_.cols()); }

    const VectorXd& outcome() const noexcept { return outcome_; }
    const VectorXd& treatment() const noexcept { return treatment_; }
    const VectorXd& mediator() const noexcept { return mediator_; }
    const MatrixXd& covariates() const noexcept { return covariates_; }

    const std::vector<std::string>& covariate_names() const noexcept { return covariate_names_; }
    const std::string& outcome_name() const noexcept { return outcome_name_; }
    const std::string& treatment_name() const noexcept { return treatment_name_; }
    const std::string& mediator_name() const noexcept { return mediator_name_; }

    /// Index of a covariate by column name.
    std::optional<std::size_t> covariate_index(std::string_view name) const;

    /// True when every Z is 0 or 1 and both levels occur.
    bool has_binary_treatment() const;
    /// Throws NonBinaryTreatment unless has_binary_treatment().
    void require_binary_treatment() const;

    /// New dataset made of the given rows (duplicates allowed), in order.
    Dataset select_rows(std::span<const std::size_t> rows) const;

    /// Copy with the treatment/mediator/outcome columns replaced.
    Dataset with_columns(const VectorXd& outcome, const VectorXd& treatment,
                         const VectorXd& mediator) const;

    /// Copy with the covariate matrix replaced (same names).
    Dataset with_covariates(const MatrixXd& covariates) const;

private:
    VectorXd outcome_;
    VectorXd treatment_;
    VectorXd mediator_;
    MatrixXd covariates_;
    std::vector<std::string> covariate_names_;
    std::string outcome_name_;
    std::string treatment_name_;
    std::string mediator_name_;
};

struct ColumnMapping {
    std::string outcome = "y";
    std::string treatment = "z";
    std::string mediator = "m";
    std::vector<std::string> covariates;
};

struct LoadResult {
    Dataset data;
    std::size_t dropped_rows = 0;
};

/// Parses comma-separated text with a mandatory header. Cells that are empty,
/// "NA" or "NaN" count as missing; a missing mapped cell is an error unless
/// drop_incomplete is set, in which case the row is removed and counted.
LoadResult read_csv(std::istream& in, const ColumnMapping& mapping, bool drop_incomplete = false);
LoadResult load_csv(const std::string& path, const ColumnMapping& mapping,
                    bool drop_incomplete = false);

/// Writes header `y,z,m,<covariates>` using the dataset's own column names and
/// shortest round-trip formatting for every number.
void write_csv(std::ostream& out, const Dataset& data);
void save_csv(const std::string& path, const Dataset& data);

/// Splits "a, b,c" into trimmed non-empty items.
std::vector<std::string> split_list(std::string_view text);

// ---------------------------------------------------------------------------
// Effect model: basis and weight terms

/// One h_k(z, m, x). All kinds vanish at z = 0, m = 0.
struct BasisTerm {
    enum class Kind { Z, M, ZM, ZX, MX };
    Kind kind = Kind::Z;
    std::size_t covariate = 0;  // used by ZX and MX only
    std::string label;

    double evaluate(double z, double m, const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
    bool depends_on_treatment() const noexcept { return kind != Kind::M && kind != Kind::MX; }
    bool depends_on_mediator() const noexcept { return kind != Kind::Z && kind != Kind::ZX; }
    bool uses_covariate() const noexcept { return kind == Kind::ZX || kind == Kind::MX; }

    friend bool operator==(const BasisTerm& a, const BasisTerm& b) {
        return a.kind == b.kind && (!a.uses_covariate() || a.covariate == b.covariate);
    }
};

/// One column of A(Z, X). Never a function of M or Y.
struct WeightTerm {
    enum class Kind { Z, ZX };
    Kind kind = Kind::Z;
    std::size_t covariate = 0;  // used by ZX only
    std::string label;

    double evaluate(double z, const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
    /// The covariate factor f(x) such that the term equals z * f(x).
    double covariate_factor(const Eigen::Ref<const Eigen::RowVectorXd>& x) const;

    friend bool operator==(const WeightTerm& a, const WeightTerm& b) {
        return a.kind == b.kind && (a.kind == Kind::Z || a.covariate == b.covariate);
    }
};

/// Working model g(X, beta) = exp(intercept + X_S beta) over the selected
/// covariate columns S.
struct Augmentation {
    std::vector<std::size_t> covariates;
    bool intercept = true;

    std::size_t dimension() const noexcept { return covariates.size() + (intercept ? 1 : 0); }
};

struct EffectSpec {
    std::vector<BasisTerm> basis;
    std::vector<WeightTerm> weights;
    std::optional<Augmentation> augmentation;

    std::size_t num_params() const noexcept { return basis.size(); }
    std::size_t num_equations() const noexcept { return weights.size(); }

    /// Checks K >= 1, L >= K, no duplicates (InvalidSpec) and covariate indices
    /// below p (IndexOutOfRange).
    void validate(std::size_t num_covariates) const;
};

/// Parses the comma-separated term syntax, e.g. "Z,M,Z:M,Z:x1,M:x1". Z and M
/// are the treatment and mediator roles; other names resolve against
/// covariate_names.
std::vector<BasisTerm> parse_basis(std::string_view text,
                                   const std::vector<std::string>& covariate_names);
/// Accepts "Z" and "Z:<covariate>".
std::vector<WeightTerm> parse_weights(std::string_view text,
                                      const std::vector<std::string>& covariate_names);
/// Comma list of covariate names; the token "1" or no token set the intercept,
/// "-1" removes it.
Augmentation parse_augmentation(std::string_view text,
                                const std::vector<std::string>& covariate_names);

/// The default study model: basis {Z, M}, weights {Z, Z:x_j} for j
/// in interaction_covariates.
EffectSpec make_mediation_spec(const std::vector<std::string>& covariate_names,
                               const std::vector<std::size_t>& interaction_covariates);

/// n x K matrix with H[i,k] = h_k(Z_i, M_i, X_i).
MatrixXd build_basis_matrix(const EffectSpec& spec, const Dataset& data);
/// n x L matrix with A[i,l] = l-th weight term at (Z_i, X_i), uncentered.
MatrixXd build_weight_matrix(const EffectSpec& spec, const Dataset& data);
/// H(z, m, x) for one point.
VectorXd evaluate_basis(const EffectSpec& spec, double z, double m,
                        const Eigen::Ref<const Eigen::RowVectorXd>& x);

}  // namespace msmm
