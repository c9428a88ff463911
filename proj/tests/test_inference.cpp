#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "msmm/errors.hpp"
#include "msmm/inference.hpp"
#include "msmm/simulation.hpp"
#include "msmm/stats.hpp"
#include "oracles.hpp"

using namespace msmm;

namespace {

EffectSpec z_only() {
    EffectSpec s;
    s.basis = parse_basis("Z", {});
    s.weights = parse_weights("Z", {});
    return s;
}

EffectSpec study_spec() { return make_mediation_spec({"x"}, {0}); }

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    return ErrorCode::InvalidArgument;
}

bool same_bits(const MatrixXd& a, const MatrixXd& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

bool same_bits(const VectorXd& a, const VectorXd& b) {
    return same_bits(MatrixXd(a), MatrixXd(b));
}

}  // namespace

TEST_CASE("sandwich on a hand-built three-observation system") {
    // orthonormal centered weight columns
    MatrixXd At(3, 2);
    At << 1 / std::sqrt(2.0), 1 / std::sqrt(6.0), -1 / std::sqrt(2.0), 1 / std::sqrt(6.0), 0,
        -2 / std::sqrt(6.0);
    MatrixXd H(3, 2);
    H << 1, 0.5, 0, 1.5, 1, -1;
    VectorXd y(3);
    y << 3, 1, 4;
    VectorXd theta(2);
    theta << 0.2, -0.1;
    ScoreSystem sys(H, At, y);
    auto parts = sandwich_variance(sys, theta);
    MatrixXd ref = oracle::sandwich_by_loops(H, At, y, theta);
    CHECK((parts.covariance - ref).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((parts.asymptotic - 3.0 * parts.covariance).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((parts.meat - parts.meat.transpose()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(parts.covariance.diagonal().minCoeff() >= 0.0);
}

TEST_CASE("scalar sandwich matches its closed form") {
    VectorXd y(4), a(4), h(4);
    y << 2, 0, 5, 1;
    a << 0.5, -0.5, 0.5, -0.5;
    h << 1, 0, 1, 0;
    const double t = 0.3;
    ScoreSystem sys(h, a, y);
    auto parts = sandwich_variance(sys, VectorXd::Constant(1, t));
    double j = 0, o = 0;
    for (int i = 0; i < 4; ++i) {
        const double s = a[i] * y[i] * std::exp(-t * h[i]);
        j -= s * h[i];
        o += s * s;
    }
    j /= 4;
    o /= 4;
    CHECK(parts.covariance(0, 0) == doctest::Approx(o / (j * j) / 4).epsilon(1e-13));
}

TEST_CASE("estimated treatment mean is propagated into the sandwich") {
    auto draw = generate(SimScenario{}, 8);
    const auto& d = draw.data;
    auto spec = study_spec();
    auto r = solve(spec, d);
    auto sys = build_score_system(spec, d, Centering::empirical());
    MatrixXd F(d.n(), 2);
    F.col(0).setOnes();
    F.col(1) = d.covariates().col(0);
    MatrixXd ref = oracle::stacked_treatment_mean_sandwich(sys.basis(), F, d.treatment(),
                                                           d.outcome(), r.theta);
    auto parts = sandwich_variance(sys, r.theta);
    CHECK(oracle::rel_error(parts.covariance, ref) < 1e-6);

    // the fixed-weight version ignores that step and differs
    auto fixed = sandwich_variance(sys, r.theta, false);
    CHECK(oracle::rel_error(fixed.covariance, ref) > 1e-3);
    ScoreSystem bare(sys.basis(), sys.centered_weights(), sys.outcome());
    CHECK((sandwich_variance(bare, r.theta).covariance - fixed.covariance).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("per-column OLS centering residualizes the score residual") {
    auto draw = generate(SimScenario{}, 9);
    const auto& d = draw.data;
    auto spec = study_spec();
    auto sys = build_score_system(spec, d, Centering::per_column_ols());
    VectorXd th(2);
    th << 0.1, 0.5;
    // brute force: residual of d on (1, x) by normal equations
    const VectorXd res = d.outcome().array() * (-(sys.basis() * th)).array().exp();
    MatrixXd X(d.n(), 2);
    X.col(0).setOnes();
    X.col(1) = d.covariates().col(0);
    const VectorXd b = (X.transpose() * X).ldlt().solve(X.transpose() * res);
    const VectorXd dr = res - X * b;
    MatrixXd expected = dr.asDiagonal() * sys.centered_weights();
    CHECK((sys.influence_contributions(th) - expected).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("degenerate zero outcome gives a singular bread") {
    auto draw = generate(SimScenario{}, 0);
    Dataset zero = draw.data.with_columns(VectorXd::Zero(400), draw.data.treatment(),
                                          draw.data.mediator());
    auto sys = build_score_system(study_spec(), zero, Centering::empirical());
    CHECK(code_of([&] { sandwich_variance(sys, VectorXd::Zero(2)); }) ==
          ErrorCode::SingularBread);
}

TEST_CASE("square and least-squares breads coincide when exactly identified") {
    auto draw = generate(SimScenario{}, 1);
    auto spec = study_spec();
    auto r = solve(spec, draw.data);
    auto sys = build_score_system(spec, draw.data, Centering::empirical());
    auto parts = sandwich_variance(sys, r.theta);
    const MatrixXd& J = parts.jacobian;
    MatrixXd gmm_bread = (J.transpose() * J).inverse() * J.transpose();
    MatrixXd gmm = gmm_bread * parts.meat * gmm_bread.transpose() / 400.0;
    CHECK((gmm - parts.covariance).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((parts.covariance - r.covariance).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("sandwich ignores observation order") {
    auto draw = generate(SimScenario{}, 2);
    auto spec = study_spec();
    auto r = solve(spec, draw.data);
    std::vector<std::size_t> perm(400);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(4);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto shuffled = draw.data.select_rows(perm);
    auto a = sandwich_variance(build_score_system(spec, draw.data, Centering::empirical()), r.theta);
    auto b = sandwich_variance(build_score_system(spec, shuffled, Centering::empirical()), r.theta);
    CHECK((a.covariance - b.covariance).cwiseAbs().maxCoeff() <
          1e-12 * a.covariance.cwiseAbs().maxCoeff());
}

TEST_CASE("sandwich standard error tracks the sampling spread of a replicated two-point design") {
    std::vector<double> est, se;
    for (int rep = 0; rep < 1000; ++rep) {
        std::mt19937_64 rng(7000 + rep);
        std::bernoulli_distribution bern(0.5);
        VectorXd y(2000), z(2000);
        for (Eigen::Index i = 0; i < 2000; ++i) {
            z[i] = bern(rng);
            std::poisson_distribution<int> pois(z[i] > 0 ? 4.0 : 2.0);
            y[i] = pois(rng);
        }
        Dataset d(y, z, VectorXd::Zero(2000), MatrixXd(2000, 0), {});
        SolveOptions opt;
        opt.check_identification = false;
        auto r = solve(z_only(), d, opt);
        est.push_back(r.theta[0]);
        se.push_back(r.std_errors[0]);
    }
    const double sd = oracle::sample_sd(est);
    CHECK(oracle::sample_mean(est) == doctest::Approx(std::log(2.0)).epsilon(0.01));
    CHECK(std::abs(oracle::sample_mean(se) / sd - 1.0) < 0.15);
}

TEST_CASE("bootstrap is deterministic and independent of thread count") {
    auto draw = generate(SimScenario{}, 3);
    BootstrapOptions opt;
    opt.replicates = 60;
    opt.seed = 77;
    opt.threads = 1;
    auto a = bootstrap(study_spec(), draw.data, opt);
    auto b = bootstrap(study_spec(), draw.data, opt);
    opt.threads = 4;
    auto c = bootstrap(study_spec(), draw.data, opt);
    CHECK(same_bits(a.replicate_estimates, b.replicate_estimates));
    CHECK(same_bits(a.replicate_estimates, c.replicate_estimates));
    CHECK(same_bits(a.std_errors, c.std_errors));
    CHECK(same_bits(a.percentile_lower, c.percentile_lower));
    CHECK(a.failures == c.failures);

    opt.seed = 78;
    auto d = bootstrap(study_spec(), draw.data, opt);
    CHECK_FALSE(same_bits(a.replicate_estimates, d.replicate_estimates));
}

TEST_CASE("bootstrap summaries are consistent with the replicates") {
    auto draw = generate(SimScenario{}, 4);
    BootstrapOptions opt;
    opt.replicates = 80;
    auto run = bootstrap(study_spec(), draw.data, opt);
    CHECK(run.failures == 0);
    CHECK(run.replicate_estimates.rows() == 80);
    for (Eigen::Index k = 0; k < 2; ++k) {
        std::vector<double> col(80);
        for (Eigen::Index b = 0; b < 80; ++b) col[static_cast<std::size_t>(b)] = run.replicate_estimates(b, k);
        CHECK(run.std_errors[k] == doctest::Approx(oracle::sample_sd(col)).epsilon(1e-12));
        const double z = wald_critical_value(0.95);
        CHECK(run.normal_lower[k] == doctest::Approx(run.estimate[k] - z * run.std_errors[k]));
        CHECK(run.percentile_lower[k] < run.percentile_upper[k]);
    }
}

TEST_CASE("percentile intervals widen with the level") {
    auto draw = generate(SimScenario{}, 5);
    BootstrapOptions opt;
    opt.replicates = 100;
    auto run = bootstrap(study_spec(), draw.data, opt);
    VectorXd prev_lo = VectorXd::Constant(2, INFINITY), prev_hi = VectorXd::Constant(2, -INFINITY);
    for (double level : {0.5, 0.8, 0.9, 0.95, 0.99}) {
        auto [lo, hi] = percentile_interval(run, level);
        CHECK((lo.array() <= prev_lo.array()).all());
        CHECK((hi.array() >= prev_hi.array()).all());
        prev_lo = lo;
        prev_hi = hi;
    }
}

TEST_CASE("bootstrap argument checks and refit failures") {
    auto draw = generate(SimScenario{}, 6);
    BootstrapOptions opt;
    opt.replicates = 49;
    CHECK(code_of([&] { bootstrap(study_spec(), draw.data, opt); }) == ErrorCode::InvalidArgument);

    // one treated unit in ten: about a third of resamples lose the treated arm
    VectorXd y(10), z = VectorXd::Zero(10);
    y << 1, 2, 3, 1, 0, 2, 4, 1, 2, 3;
    z[0] = 1;
    Dataset tiny(y, z, VectorXd::Zero(10), MatrixXd(10, 0), {});
    opt.replicates = 50;
    opt.solve.check_identification = false;
    CHECK(code_of([&] { bootstrap(z_only(), tiny, opt); }) == ErrorCode::TooManyRefitFailures);
    opt.stratified = true;
    CHECK_NOTHROW(bootstrap(z_only(), tiny, opt));
}

TEST_CASE("comparison report layout") {
    auto draw = generate(SimScenario{}, 7);
    CompareOptions opt;
    opt.bootstrap.replicates = 50;
    auto rep = compare_report(study_spec(), draw.data, opt);
    REQUIRE(rep.rows.size() == 4);
    CHECK(rep.rows[0].effect == "Direct Effect (theta1)");
    CHECK(rep.rows[0].method == "Proposed");
    CHECK(rep.rows[1].effect == "Mediator Effect (theta2)");
    CHECK(rep.rows[1].method == "Proposed");
    CHECK(rep.rows[2].effect == "Direct Effect (theta1)");
    CHECK(rep.rows[3].method == "Traditional");
    CHECK(rep.quasi_dispersion > 0.0);
    for (const auto& row : rep.rows) {
        CHECK(row.rate_ratio == doctest::Approx(std::exp(row.estimate)));
        CHECK(row.ci_lower <= row.ci_upper);
    }
    opt.proposed_interval = IntervalKind::Sandwich;
    auto sw = compare_report(study_spec(), draw.data, opt);
    CHECK(sw.rows.size() == 4);
    CHECK(sw.rows[0].estimate == rep.rows[0].estimate);
}

TEST_CASE("null data: all four rate ratios usually cover one") {
    SimScenario sc;
    sc.theta_z = sc.theta_m = 0.0;
    sc.reps = 200;
    CompareOptions opt;
    opt.proposed_interval = IntervalKind::Sandwich;
    std::vector<int> covered(4, 0);
    for (std::size_t rep = 0; rep < 200; ++rep) {
        auto r = compare_report(study_spec(), generate(sc, rep).data, opt);
        for (std::size_t k = 0; k < 4; ++k)
            if (r.rows[k].ci_lower <= 1.0 && 1.0 <= r.rows[k].ci_upper) ++covered[k];
    }
    for (int c : covered) CHECK(c >= 180);
}

TEST_CASE("confounding pushes the regression mediator estimate in a stable direction") {
    SimScenario sc;
    sc.n = 10000;
    sc.theta_u = -1.0;
    CompareOptions opt;
    opt.proposed_interval = IntervalKind::Sandwich;
    for (std::size_t rep = 0; rep < 3; ++rep) {
        auto r = compare_report(study_spec(), generate(sc, rep).data, opt);
        CHECK(std::abs(r.rows[1].estimate - 0.5) < 0.1);
        CHECK(r.rows[3].estimate < 0.5 - 0.3);
    }
}

TEST_CASE("normal quantile and type-7 quantiles") {
    CHECK(normal_quantile(0.5) == 0.0);
    CHECK(std::abs(normal_quantile(0.975) - 1.959963984540054) < 1e-12);
    CHECK(std::abs(normal_quantile(0.995) - 2.5758293035489004) < 1e-12);
    CHECK(std::abs(normal_quantile(1e-10) + 6.361340902404056) < 1e-10);
    for (double p = 0.001; p < 1.0; p += 0.0137)
        CHECK(std::abs(normal_cdf(normal_quantile(p)) - p) < 1e-14);
    CHECK(wald_critical_value(0.95) == normal_quantile(0.975));

    std::vector<double> v{1, 2, 3, 4};
    CHECK(quantile_type7(v, 0.25) == doctest::Approx(1.75));
    CHECK(quantile_type7(v, 0.0) == 1.0);
    CHECK(quantile_type7(v, 1.0) == 4.0);
    CHECK(std::isnan(sample_sd(std::vector<double>{1.0})));
}
