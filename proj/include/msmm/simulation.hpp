#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "msmm/data.hpp"

namespace msmm {

enum class OutcomeFamily { Poisson, OdPoisson, NegBin };

/// Generative design for one simulation study:
///   X, U ~ N(0,1), Z ~ Bernoulli(treatment_probability)
///   M = gamma_z Z + gamma_x X + gamma_zx Z X + gamma_u U + e,  e ~ N(0, residual variance)
///   log rate = theta_z Z + theta_m M + theta_u U + theta_x X  (+ theta_v V, odpoisson)
///   Y ~ Poisson(rate) or NegBin(mean rate, size)
struct SimScenario {
    std::size_t n = 400;
    std::size_t reps = 1000;
    OutcomeFamily family = OutcomeFamily::Poisson;
    double nb_size = 2.0;
    double theta_x = 0.2;
    double theta_z = 0.1;
    double theta_m = 0.5;
    double theta_u = 0.0;
    double theta_v = 0.5;
    double gamma_z = 0.0;
    double gamma_x = 0.0;
    double gamma_zx = 1.0;
    double gamma_u = 0.5;
    double mediator_residual_variance = 0.1;
    double treatment_probability = 0.5;
    std::uint64_t base_seed = 20240401;

    /// Throws InvalidArgument on n < 10, reps < 1, non-positive variances or
    /// probability outside (0, 1).
    void validate() const;
};

const char* to_string(OutcomeFamily family);

/// Flat `key=value` lines; `#` starts a comment. Unknown keys, duplicate keys
/// and unparsable values are ScenarioParse errors naming the key.
SimScenario parse_scenario(std::istream& in);
SimScenario load_scenario(const std::string& path);
/// Inverse of parse_scenario (every key, full precision).
std::string format_scenario(const SimScenario& scenario);

struct LatentDraw {
    VectorXd u;
    VectorXd v;
    VectorXd rate;
};

struct SimDraw {
    Dataset data;  // columns y, z, m, x
    LatentDraw latent;
};

/// Deterministic in (scenario, rep_index).
SimDraw generate(const SimScenario& scenario, std::size_t rep_index);

enum class EstimatorKind { Proposed, ProposedAugmented, Poisson, QuasiPoisson, NegBin };
const char* to_string(EstimatorKind kind);
EstimatorKind parse_estimator(const std::string& text);

/// The study estimators, in the order they are fit and reported.
std::vector<EstimatorKind> default_estimators();

struct ReplicateRecord {
    std::size_t rep = 0;
    EstimatorKind estimator = EstimatorKind::Proposed;
    std::string parameter;  // "theta_z" or "theta_m"
    double estimate = 0.0;  // NaN when not converged
    double std_error = 0.0;
    bool covered = false;
    bool converged = false;
};

/// Aggregates over converged replications. SD and mean SE are absent when
/// fewer than two (SD) or no (SE) replications converged.
struct SummaryRow {
    EstimatorKind estimator = EstimatorKind::Proposed;
    std::string parameter;
    double truth = 0.0;
    std::size_t converged = 0;
    std::size_t failures = 0;
    double mean_estimate = 0.0;
    double bias = 0.0;
    std::optional<double> sd;
    std::optional<double> mean_se;
    double rmse = 0.0;
    double coverage = 0.0;
    /// Monte Carlo standard error of the mean estimate, sd / sqrt(converged).
    std::optional<double> mc_se() const;
};

struct SimSummary {
    std::vector<SummaryRow> rows;
    const SummaryRow& find(EstimatorKind estimator, const std::string& parameter) const;
};

struct StudyResult {
    SimScenario scenario;
    SimSummary summary;
    std::vector<ReplicateRecord> replicates;  // ordered by rep, estimator, parameter
};

struct StudyOptions {
    std::vector<EstimatorKind> estimators = default_estimators();
    double level = 0.95;
    std::size_t threads = 0;  // 0 -> default_thread_count()
};

/// Generates every replication, fits all estimators on the same draw and
/// aggregates. Proposed estimators use basis {Z, M}, weights {Z, Z:x} and
/// empirical centering (augmented: working model exp(b0 + b1 x)); regression
/// comparators regress Y on (1, Z, M, X). Wald intervals throughout.
StudyResult run_study(const SimScenario& scenario, const StudyOptions& options = {});

/// Aggregation only; exposed for tests.
SimSummary summarize(const SimScenario& scenario, const std::vector<ReplicateRecord>& replicates,
                     const std::vector<EstimatorKind>& estimators);

/// Header: estimator,parameter,truth,converged,failures,mean_estimate,bias,sd,mean_se,rmse,coverage
void write_summary_csv(std::ostream& out, const SimSummary& summary);
/// Header: rep,estimator,parameter,estimate,se,covered,converged
void write_replicates_csv(std::ostream& out, const std::vector<ReplicateRecord>& replicates);

}  // namespace msmm
