#include "msmm/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "msmm/errors.hpp"
#include "msmm/glm.hpp"
#include "msmm/parallel.hpp"
#include "msmm/stats.hpp"

namespace msmm {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kMaxBreadCondition = 1e12;

std::vector<std::size_t> draw_rows(const Dataset& data, std::mt19937_64& rng, bool stratified) {
    const std::size_t n = data.n();
    std::vector<std::size_t> rows(n);
    if (!stratified) {
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        for (auto& r : rows) r = pick(rng);
        return rows;
    }
    std::vector<std::size_t> arm0, arm1;
    for (std::size_t i = 0; i < n; ++i)
        (data.treatment()[static_cast<Eigen::Index>(i)] == 1.0 ? arm1 : arm0).push_back(i);
    std::size_t out = 0;
    for (const auto* arm : {&arm0, &arm1}) {
        if (arm->empty()) continue;
        std::uniform_int_distribution<std::size_t> pick(0, arm->size() - 1);
        for (std::size_t k = 0; k < arm->size(); ++k) rows[out++] = (*arm)[pick(rng)];
    }
    return rows;
}

std::size_t find_term(const EffectSpec& spec, BasisTerm::Kind kind) {
    for (std::size_t k = 0; k < spec.basis.size(); ++k)
        if (spec.basis[k].kind == kind) return k;
    throw Error(ErrorCode::InvalidSpec, std::string("comparison needs basis term ") +
                                            (kind == BasisTerm::Kind::Z ? "Z" : "M"));
}

}  // namespace

SandwichParts sandwich_variance(const ScoreSystem& system, const VectorXd& params,
                                bool account_for_centering) {
    const double n = static_cast<double>(system.n());
    SandwichParts parts;
    parts.jacobian = system.jacobian(params) / n;
    parts.condition = [&] {
        Eigen::JacobiSVD<MatrixXd> svd(parts.jacobian);
        const auto& s = svd.singularValues();
        if (!(s.maxCoeff() > 0.0) || !(s.minCoeff() > 0.0))
            return std::numeric_limits<double>::infinity();
        return s.maxCoeff() / s.minCoeff();
    }();
    if (!(parts.condition <= kMaxBreadCondition))
        throw Error(ErrorCode::SingularBread,
                    "score Jacobian is singular (condition number " +
                        std::to_string(parts.condition) + ")");

    const MatrixXd contributions = account_for_centering
                                       ? system.influence_contributions(params)
                                       : system.score_contributions(params);
    parts.meat = contributions.transpose() * contributions / n;
    const MatrixXd& j = parts.jacobian;
    if (j.rows() == j.cols())
        parts.bread = j.fullPivLu().inverse();
    else
        parts.bread = (j.transpose() * j).ldlt().solve(j.transpose());
    MatrixXd v = parts.bread * parts.meat * parts.bread.transpose();
    parts.asymptotic = 0.5 * (v + v.transpose());
    parts.covariance = parts.asymptotic / n;
    return parts;
}

BootstrapRun bootstrap(const EffectSpec& spec, const Dataset& data,
                       const BootstrapOptions& options) {
    if (options.replicates < 50)
        throw Error(ErrorCode::InvalidArgument,
                    "bootstrap needs B >= 50, got " + std::to_string(options.replicates));
    SolveOptions solve_options = options.solve;
    solve_options.compute_variance = false;
    solve_options.check_identification = false;
    solve_options.on_iterate = nullptr;

    BootstrapRun run;
    run.replicates = options.replicates;
    run.seed = options.seed;
    run.level = options.level;
    run.estimate = solve(spec, data, solve_options).params();
    const auto p = run.estimate.size();
    const std::size_t b_count = options.replicates;

    run.replicate_estimates = MatrixXd::Constant(static_cast<Eigen::Index>(b_count), p, kNaN);
    std::vector<char> ok(b_count, 0);
    const std::size_t threads = options.threads ? options.threads : default_thread_count();
    parallel_for(b_count, threads, [&](std::size_t b) {
        auto rng = make_stream(options.seed, b);
        const auto rows = draw_rows(data, rng, options.stratified);
        try {
            const Dataset resample = data.select_rows(rows);
            const auto fit = solve(spec, resample, solve_options);
            run.replicate_estimates.row(static_cast<Eigen::Index>(b)) = fit.params().transpose();
            ok[b] = 1;
        } catch (const Error&) {
            // Counted below; e.g. a resample with one treatment arm.
        }
    });

    run.succeeded.assign(ok.begin(), ok.end());
    run.failures = static_cast<std::size_t>(std::count(ok.begin(), ok.end(), 0));
    if (static_cast<double>(run.failures) > 0.1 * static_cast<double>(b_count))
        throw Error(ErrorCode::TooManyRefitFailures,
                    std::to_string(run.failures) + " of " + std::to_string(b_count) +
                        " bootstrap refits failed");

    const auto good = static_cast<Eigen::Index>(b_count - run.failures);
    MatrixXd kept(good, p);
    for (std::size_t b = 0, r = 0; b < b_count; ++b)
        if (ok[b]) kept.row(static_cast<Eigen::Index>(r++)) =
                       run.replicate_estimates.row(static_cast<Eigen::Index>(b));

    const MatrixXd centered = kept.rowwise() - kept.colwise().mean();
    run.covariance = centered.transpose() * centered / static_cast<double>(good - 1);
    run.std_errors = run.covariance.diagonal().cwiseSqrt();
    std::tie(run.percentile_lower, run.percentile_upper) = percentile_interval(run, options.level);
    const double z = wald_critical_value(options.level);
    run.normal_lower = run.estimate - z * run.std_errors;
    run.normal_upper = run.estimate + z * run.std_errors;
    return run;
}

std::pair<VectorXd, VectorXd> percentile_interval(const BootstrapRun& run, double level) {
    if (!(level > 0.0 && level < 1.0))
        throw Error(ErrorCode::InvalidArgument, "confidence level must lie in (0, 1)");
    const auto p = run.replicate_estimates.cols();
    VectorXd lo(p), hi(p);
    const double alpha = 1.0 - level;
    for (Eigen::Index k = 0; k < p; ++k) {
        std::vector<double> values;
        for (Eigen::Index b = 0; b < run.replicate_estimates.rows(); ++b)
            if (run.succeeded[static_cast<std::size_t>(b)])
                values.push_back(run.replicate_estimates(b, k));
        std::sort(values.begin(), values.end());
        lo[k] = quantile_type7(values, alpha / 2);
        hi[k] = quantile_type7(values, 1 - alpha / 2);
    }
    return {lo, hi};
}

const char* to_string(IntervalKind kind) {
    switch (kind) {
        case IntervalKind::Percentile: return "percentile";
        case IntervalKind::Normal: return "normal";
        case IntervalKind::Sandwich: return "sandwich";
    }
    return "unknown";
}

IntervalKind parse_interval_kind(const std::string& text) {
    if (text == "percentile") return IntervalKind::Percentile;
    if (text == "normal") return IntervalKind::Normal;
    if (text == "sandwich") return IntervalKind::Sandwich;
    throw Error(ErrorCode::InvalidArgument, "interval must be percentile, normal or sandwich");
}

ComparisonReport compare_report(const EffectSpec& spec, const Dataset& data,
                                const CompareOptions& options) {
    const auto iz = static_cast<Eigen::Index>(find_term(spec, BasisTerm::Kind::Z));
    const auto im = static_cast<Eigen::Index>(find_term(spec, BasisTerm::Kind::M));
    const double level = options.bootstrap.level;
    const double z = wald_critical_value(level);

    ComparisonReport report;
    report.level = level;
    report.n = data.n();
    report.proposed_interval = options.proposed_interval;

    SolveOptions solve_options = options.bootstrap.solve;
    solve_options.level = level;
    const EstimationResult fit = solve(spec, data, solve_options);

    auto proposed_row = [&](const char* effect, Eigen::Index k, double se, double lo, double hi) {
        return ComparisonRow{effect, "Proposed", fit.theta[k], se, std::exp(fit.theta[k]),
                             std::exp(lo), std::exp(hi)};
    };
    if (options.proposed_interval == IntervalKind::Sandwich) {
        report.rows.push_back(proposed_row("Direct Effect (theta1)", iz, fit.std_errors[iz],
                                           fit.ci_lower[iz], fit.ci_upper[iz]));
        report.rows.push_back(proposed_row("Mediator Effect (theta2)", im, fit.std_errors[im],
                                           fit.ci_lower[im], fit.ci_upper[im]));
    } else {
        const BootstrapRun run = bootstrap(spec, data, options.bootstrap);
        report.seed = run.seed;
        report.replicates = run.replicates;
        report.bootstrap_failures = run.failures;
        const bool pct = options.proposed_interval == IntervalKind::Percentile;
        const VectorXd& lo = pct ? run.percentile_lower : run.normal_lower;
        const VectorXd& hi = pct ? run.percentile_upper : run.normal_upper;
        report.rows.push_back(
            proposed_row("Direct Effect (theta1)", iz, run.std_errors[iz], lo[iz], hi[iz]));
        report.rows.push_back(
            proposed_row("Mediator Effect (theta2)", im, run.std_errors[im], lo[im], hi[im]));
    }

    MatrixXd design(static_cast<Eigen::Index>(data.n()), 3 + static_cast<Eigen::Index>(data.p()));
    design << VectorXd::Ones(design.rows()), data.treatment(), data.mediator(), data.covariates();
    const GlmFit quasi = fit_quasipoisson(design, data.outcome());
    report.quasi_dispersion = quasi.dispersion;
    const VectorXd se = quasi.std_errors();
    for (auto [effect, k] : {std::pair{"Direct Effect (theta1)", Eigen::Index{1}},
                             std::pair{"Mediator Effect (theta2)", Eigen::Index{2}}}) {
        const double b = quasi.coefficients[k];
        report.rows.push_back(ComparisonRow{effect, "Traditional", b, se[k], std::exp(b),
                                            std::exp(b - z * se[k]), std::exp(b + z * se[k])});
    }
    return report;
}

}  // namespace msmm
