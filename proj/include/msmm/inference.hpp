#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "msmm/data.hpp"
#include "msmm/estimator.hpp"

namespace msmm {

/// Pieces of the robust variance. With J = E_n dS/dtheta and Omega = E_n S S':
///   bread = (J'J)^{-1} J'   (J^{-1} when square)
///   asymptotic = bread Omega bread'   (variance of sqrt(n)(theta^ - theta))
///   covariance = asymptotic / n
struct SandwichParts {
    MatrixXd jacobian;  // E_n dS_i/dtheta, equations x params
    MatrixXd bread;     // params x equations
    MatrixXd meat;      // equations x equations
    MatrixXd asymptotic;
    MatrixXd covariance;
    double condition = 0.0;  // of the Jacobian
};

/// The meat uses ScoreSystem::influence_contributions, so an estimated
/// centering is accounted for; pass false for the fixed-weight version.
/// Throws SingularBread when the Jacobian condition number exceeds 1e12.
SandwichParts sandwich_variance(const ScoreSystem& system, const VectorXd& params,
                                bool account_for_centering = true);

struct BootstrapOptions {
    std::size_t replicates = 500;
    std::uint64_t seed = 20240401;
    double level = 0.95;
    bool stratified = false;  // resample within treatment arms
    std::size_t threads = 0;  // 0 -> default_thread_count()
    SolveOptions solve;
};

struct BootstrapRun {
    std::size_t replicates = 0;
    std::uint64_t seed = 0;
    double level = 0.95;
    VectorXd estimate;           // full-sample estimate (theta, beta)
    MatrixXd replicate_estimates;  // B x params, NaN rows for failed refits
    std::vector<bool> succeeded;
    std::size_t failures = 0;
    VectorXd std_errors;
    MatrixXd covariance;
    VectorXd percentile_lower, percentile_upper;
    VectorXd normal_lower, normal_upper;
};

/// Nonparametric row bootstrap with full re-estimation (including weight
/// centering) on every resample. Replicate b draws from its own stream
/// derived from (seed, b), so the run is identical for any thread count.
/// Throws TooManyRefitFailures when more than 10% of refits fail.
BootstrapRun bootstrap(const EffectSpec& spec, const Dataset& data,
                       const BootstrapOptions& options = {});

/// Type-7 percentile interval from a run at a different level.
std::pair<VectorXd, VectorXd> percentile_interval(const BootstrapRun& run, double level);

enum class IntervalKind { Percentile, Normal, Sandwich };
const char* to_string(IntervalKind kind);
IntervalKind parse_interval_kind(const std::string& text);

struct CompareOptions {
    BootstrapOptions bootstrap;
    IntervalKind proposed_interval = IntervalKind::Percentile;
};

struct ComparisonRow {
    std::string effect;  // "Direct Effect (theta1)" / "Mediator Effect (theta2)"
    std::string method;  // "Proposed" / "Traditional"
    double estimate = 0.0;  // log scale
    double std_error = 0.0;
    double rate_ratio = 1.0;
    double ci_lower = 1.0;  // rate-ratio scale
    double ci_upper = 1.0;
};

struct ComparisonReport {
    std::vector<ComparisonRow> rows;  // always 4
    double level = 0.95;
    std::size_t n = 0;
    std::uint64_t seed = 0;
    std::size_t replicates = 0;
    std::size_t bootstrap_failures = 0;
    double quasi_dispersion = 1.0;
    IntervalKind proposed_interval = IntervalKind::Percentile;
};

/// Proposed estimator next to quasi-Poisson regression of Y on (1, Z, M, X)
/// with every dataset covariate adjusted. The basis must contain Z and M.
ComparisonReport compare_report(const EffectSpec& spec, const Dataset& data,
                                const CompareOptions& options = {});

}  // namespace msmm
