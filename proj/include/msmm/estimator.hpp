#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "msmm/data.hpp"

namespace msmm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// How E[A(Z,X) | X] is estimated before it is subtracted from the weights.
struct Centering {
    enum class Kind {
        KnownProbability,  // (Z - p) f(X) with a known randomization probability p
        EmpiricalMean,     // p replaced by the sample mean of Z
        PerColumnOls,      // each column minus its OLS fit on (1, X)
    };
    Kind kind = Kind::EmpiricalMean;
    double probability = 0.5;  // KnownProbability only

    static Centering known(double p) { return {Kind::KnownProbability, p}; }
    static Centering empirical() { return {Kind::EmpiricalMean, 0.5}; }
    static Centering per_column_ols() { return {Kind::PerColumnOls, 0.5}; }
};

const char* to_string(Centering::Kind kind);
Centering parse_centering(const std::string& text);

/// Centered weights A - E^[A | X]. The known-probability and empirical methods
/// require a binary treatment; per-column OLS regresses on (1, X).
MatrixXd center_weights(const MatrixXd& weights, const EffectSpec& spec, const Dataset& data,
                        const Centering& method);

/// Record of how the centered weights were estimated. The sandwich uses it to
/// propagate the sampling error of the centering step; Fixed ignores it.
struct CenteringStep {
    enum class Kind { Fixed, TreatmentMean, ColumnOls };
    Kind kind = Kind::Fixed;
    VectorXd treatment_deviation;  // Z_i - p^, TreatmentMean only
    MatrixXd factors;              // f_l(X_i) with A_il = Z_i f_l(X_i), TreatmentMean only
    MatrixXd design;               // (1, X), ColumnOls only
};

/// The stacked estimating equations for one dataset.
///
/// Parameters are ordered (theta_1..theta_K, beta_1..beta_q). Without a working
/// model q = 0 and the system is
///     S(theta) = sum_i At_i Y_i exp(-theta'H_i)                    (L rows)
/// With a working model g(X, beta) = exp(X_a beta) the weighted rows become
///     sum_i At_i [Y_i exp(-theta'H_i) - exp(X_a,i beta)]          (L rows)
/// and q rows are appended:
///     sum_i X_a,i [Y_i exp(-theta'H_i) - exp(X_a,i beta)].
class ScoreSystem {
public:
    ScoreSystem(MatrixXd basis, MatrixXd centered_weights, VectorXd outcome,
                std::optional<MatrixXd> augmentation_design = std::nullopt,
                CenteringStep centering = {});

    Eigen::Index n() const noexcept { return outcome_.size(); }
    Eigen::Index num_basis() const noexcept { return basis_.cols(); }
    Eigen::Index num_weights() const noexcept { return weights_.cols(); }
    Eigen::Index num_working() const noexcept {
        return augmentation_ ? augmentation_->cols() : 0;
    }
    Eigen::Index num_params() const noexcept { return num_basis() + num_working(); }
    Eigen::Index num_equations() const noexcept { return num_weights() + num_working(); }
    bool augmented() const noexcept { return augmentation_.has_value(); }

    const MatrixXd& basis() const noexcept { return basis_; }
    const MatrixXd& centered_weights() const noexcept { return weights_; }
    const VectorXd& outcome() const noexcept { return outcome_; }
    const std::optional<MatrixXd>& augmentation_design() const noexcept { return augmentation_; }

    /// Summed score, length num_equations(). Throws OverflowGuard when any
    /// |theta'H_i| (or |X_a,i beta|) exceeds 700.
    VectorXd score(const VectorXd& params) const;
    /// n x num_equations() matrix of per-observation contributions S_i.
    MatrixXd score_contributions(const VectorXd& params) const;
    /// score_contributions() plus the first-order effect of having estimated
    /// the centering. Equal to score_contributions() for a Fixed step.
    MatrixXd influence_contributions(const VectorXd& params) const;
    const CenteringStep& centering_step() const noexcept { return centering_; }
    /// Analytic derivative of score(), num_equations() x num_params().
    MatrixXd jacobian(const VectorXd& params) const;

    /// || score / n ||^2.
    double objective(const VectorXd& params) const;

private:
    // Y_i exp(-theta'H_i) minus the working-model fit, and the two exponentials.
    struct Residual {
        VectorXd tilted;   // Y_i exp(-theta'H_i)
        VectorXd working;  // exp(X_a,i beta), empty without augmentation
    };
    Residual residual(const VectorXd& params) const;

    MatrixXd basis_;
    MatrixXd weights_;
    VectorXd outcome_;
    std::optional<MatrixXd> augmentation_;
    CenteringStep centering_;
};

/// Builds H, centers A and assembles the working-model design.
ScoreSystem build_score_system(const EffectSpec& spec, const Dataset& data,
                               const Centering& centering);

VectorXd score(const VectorXd& theta, const ScoreSystem& system);
MatrixXd score_jacobian(const VectorXd& theta, const ScoreSystem& system);

struct IdentificationDiagnostics {
    double min_eigenvalue = 0.0;         // of E_n Cov(H | X)
    double mean_diagonal = 0.0;          // of the same matrix
    double jacobian_condition = 0.0;     // of E_n dS/dtheta at theta = 0
    double min_canonical_correlation = 0.0;
    double first_stage_statistic = 0.0;  // n rho^2 / (1 - rho^2) at the smallest rho
    bool weak = false;
    std::string reason;
};

/// Instrument-strength thresholds; weak when any of them trips.
struct IdentificationThresholds {
    double relative_eigenvalue = 1e-4;
    double max_condition = 1e6;
    double min_first_stage = 10.0;
};

IdentificationDiagnostics identification_check(const EffectSpec& spec, const Dataset& data,
                                               const Centering& centering = Centering::empirical(),
                                               const IdentificationThresholds& thresholds = {});

enum class VarianceMethod { Sandwich, Bootstrap, None };
const char* to_string(VarianceMethod method);

struct SolveOptions {
    Centering centering = Centering::empirical();
    double level = 0.95;
    int max_iter = 200;
    double score_tol = 1e-10;     // max |score| / n, exactly identified
    double gradient_tol = 1e-8;   // || J'S || / n^2, over-identified
    bool poisson_start = true;
    bool compute_variance = true;
    bool check_identification = true;
    IdentificationThresholds thresholds;
    /// Called with every iterate the solver evaluates the Jacobian at.
    std::function<void(const VectorXd&)> on_iterate;
};

struct EstimationResult {
    VectorXd theta;
    std::optional<VectorXd> beta;
    std::vector<std::string> labels;  // basis labels, then working-model labels
    MatrixXd covariance;              // over (theta, beta)
    VectorXd std_errors;
    VectorXd ci_lower;
    VectorXd ci_upper;
    double level = 0.95;
    double gmm_objective = 0.0;
    IdentificationDiagnostics identification;
    int iterations = 0;
    bool converged = false;
    std::string start;  // which start produced the kept solution
    VarianceMethod variance_method = VarianceMethod::None;
    std::size_t n = 0;

    VectorXd params() const;
};

/// Solves the estimating equations: damped Newton when exactly identified,
/// Levenberg-Marquardt on ||score||^2 otherwise, from the zero vector and from
/// a Poisson-regression warm start, keeping the best converged run. Attaches
/// sandwich standard errors and Wald intervals unless disabled.
EstimationResult solve(const EffectSpec& spec, const Dataset& data,
                       const SolveOptions& options = {});

/// Lower-level entry: solve a prepared system from explicit starts.
struct SystemSolution {
    VectorXd params;
    double objective = 0.0;
    int iterations = 0;
    bool converged = false;
};
SystemSolution solve_system(const ScoreSystem& system, const VectorXd& start,
                            const SolveOptions& options);

/// Fills covariance, standard errors and Wald intervals from a covariance
/// over the parameters.
void attach_wald_intervals(EstimationResult& result, const MatrixXd& covariance, double level,
                           VarianceMethod method);

/// One counterfactual contrast: log E[Y^{z m} | x] - log E[Y^{z' m'} | x].
struct Contrast {
    std::string label;
    double z = 1.0, m = 0.0;
    double z_ref = 0.0, m_ref = 0.0;
    Eigen::RowVectorXd x;  // empty means all zeros
};

struct EffectRow {
    std::string label;
    double log_effect = 0.0;
    double std_error = 0.0;
    double rate_ratio = 1.0;
    double rr_lower = 1.0;
    double rr_upper = 1.0;
};

/// Controlled direct (z = 1 vs 0 at m = 0) and per-unit mediator (m = 1 vs 0
/// at z = 0) contrasts.
std::vector<Contrast> default_contrasts();

/// Log-scale effects theta'(H(z,m,x) - H(z',m',x)), rate ratios and delta-method
/// intervals. A contrast that moves z (or m) when no basis term depends on it
/// is ContrastOutsideSpan.
std::vector<EffectRow> controlled_effects(const EstimationResult& result, const EffectSpec& spec,
                                          const std::vector<Contrast>& contrasts,
                                          std::size_t num_covariates);

}  // namespace msmm
