#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <sstream>

#include "msmm/errors.hpp"
#include "msmm/glm.hpp"
#include "msmm/simulation.hpp"

using namespace msmm;

namespace {

std::string bytes(const Dataset& d) {
    std::ostringstream out;
    write_csv(out, d);
    return out.str();
}

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    return ErrorCode::InvalidArgument;
}

SimScenario parse_text(const std::string& text) {
    std::istringstream in(text);
    return parse_scenario(in);
}

}  // namespace

TEST_CASE("generation is a pure function of seed and replicate") {
    SimScenario s;
    CHECK(bytes(generate(s, 3).data) == bytes(generate(s, 3).data));
    CHECK(bytes(generate(s, 3).data) != bytes(generate(s, 4).data));
    SimScenario other = s;
    other.base_seed = 1;
    CHECK(bytes(generate(s, 3).data) != bytes(generate(other, 3).data));
    for (OutcomeFamily f : {OutcomeFamily::OdPoisson, OutcomeFamily::NegBin}) {
        s.family = f;
        CHECK(bytes(generate(s, 0).data) == bytes(generate(s, 0).data));
    }
}

TEST_CASE("zeroed mediator model leaves a covariate-only Poisson outcome") {
    SimScenario s;
    s.n = 20000;
    s.gamma_z = s.gamma_x = s.gamma_zx = s.gamma_u = 0.0;
    s.mediator_residual_variance = 1e-12;
    s.theta_z = 0.0;
    auto draw = generate(s, 0);
    CHECK(draw.data.mediator().cwiseAbs().maxCoeff() < 1e-4);
    MatrixXd X(s.n, 2);
    X.col(0).setOnes();
    X.col(1) = draw.data.covariates().col(0);
    auto fit = fit_poisson_irls(X, draw.data.outcome());
    CHECK(std::abs(fit.coefficients[0]) < 0.03);
    CHECK(std::abs(fit.coefficients[1] - s.theta_x) < 0.03);
}

TEST_CASE("mediator regression recovers the interaction design") {
    SimScenario s;
    s.n = 1000000;
    auto draw = generate(s, 0);
    const auto& d = draw.data;
    MatrixXd D(s.n, 4);
    D.col(0).setOnes();
    D.col(1) = d.treatment();
    D.col(2) = d.covariates().col(0);
    D.col(3) = d.treatment().cwiseProduct(d.covariates().col(0));
    auto fit = fit_ols(D, d.mediator());
    CHECK(std::abs(fit.coefficients[1] - 0.0) < 0.01);
    CHECK(std::abs(fit.coefficients[2] - 0.0) < 0.01);
    CHECK(std::abs(fit.coefficients[3] - 1.0) < 0.01);
    CHECK(std::abs(d.treatment().mean() - 0.5) < 0.005);
}

TEST_CASE("mean rate matches the lognormal moment formula") {
    // log rate = a Z + b X + c Z X + d U + theta_m e, with X, U, e independent normals.
    // Given Z, the exponent is normal with mean 0 and variance
    //   (theta_x + theta_m gamma_zx Z)^2 + (theta_u + theta_m gamma_u)^2 + theta_m^2 s2
    SimScenario s;
    s.n = 1000000;
    s.theta_u = -1.0;
    auto draw = generate(s, 0);
    const double tm = s.theta_m, s2 = s.mediator_residual_variance;
    const double u2 = std::pow(s.theta_u + tm * s.gamma_u, 2) + tm * tm * s2;
    const double v0 = std::pow(s.theta_x, 2) + u2;
    const double v1 = std::pow(s.theta_x + tm * s.gamma_zx, 2) + u2;
    const double expected = (1 - s.treatment_probability) * std::exp(v0 / 2) +
                            s.treatment_probability * std::exp(s.theta_z + v1 / 2);
    CHECK(draw.latent.rate.mean() == doctest::Approx(expected).epsilon(0.01));
    CHECK(draw.data.outcome().mean() == doctest::Approx(expected).epsilon(0.01));
}

TEST_CASE("negative binomial draws are overdispersed with the configured size") {
    SimScenario s;
    s.n = 200000;
    s.family = OutcomeFamily::NegBin;
    s.theta_z = s.theta_m = s.theta_x = 0.0;
    s.gamma_u = 0.0;
    auto d = generate(s, 0).data;
    const double m = d.outcome().mean();
    const double var = (d.outcome().array() - m).square().mean();
    CHECK(m == doctest::Approx(1.0).epsilon(0.02));
    CHECK(var == doctest::Approx(1.0 + 1.0 / 2.0).epsilon(0.03));
}

TEST_CASE("single replication reports absent spreads") {
    SimScenario s;
    s.reps = 1;
    auto r = run_study(s);
    for (const auto& row : r.summary.rows) {
        CHECK_FALSE(row.sd.has_value());
        CHECK_FALSE(row.mc_se().has_value());
    }
    std::ostringstream out;
    write_summary_csv(out, r.summary);
    CHECK(out.str().find(",NA,") != std::string::npos);
}

TEST_CASE("summary identities and determinism") {
    SimScenario s;
    s.reps = 40;
    s.theta_u = -1.0;
    auto a = run_study(s);
    CHECK(a.summary.rows.size() == 2 * default_estimators().size());
    for (const auto& row : a.summary.rows) {
        CHECK(row.coverage >= 0.0);
        CHECK(row.coverage <= 1.0);
        CHECK(row.converged + row.failures == 40);
        REQUIRE(row.sd.has_value());
        CHECK(row.rmse * row.rmse ==
              doctest::Approx(row.bias * row.bias + *row.sd * *row.sd).epsilon(1e-12));
        CHECK(row.bias == doctest::Approx(row.mean_estimate - row.truth).epsilon(1e-15));
    }
    CHECK(a.summary.find(EstimatorKind::Proposed, "theta_m").truth == 0.5);
    CHECK(a.summary.find(EstimatorKind::Poisson, "theta_z").truth == 0.1);

    StudyOptions serial;
    serial.threads = 1;
    StudyOptions parallel;
    parallel.threads = 4;
    auto b = run_study(s, serial);
    auto c = run_study(s, parallel);
    std::ostringstream ra, rb, rc, sa, sc;
    write_replicates_csv(ra, a.replicates);
    write_replicates_csv(rb, b.replicates);
    write_replicates_csv(rc, c.replicates);
    write_summary_csv(sa, a.summary);
    write_summary_csv(sc, c.summary);
    CHECK(ra.str() == rb.str());
    CHECK(rb.str() == rc.str());
    CHECK(sa.str() == sc.str());
    CHECK(ra.str().rfind("rep,estimator,parameter,estimate,se,covered,converged\n", 0) == 0);
    CHECK(sa.str().rfind(
              "estimator,parameter,truth,converged,failures,mean_estimate,bias,sd,mean_se,rmse,coverage\n",
              0) == 0);
}

TEST_CASE("summarize excludes failed replications") {
    SimScenario s;
    s.theta_m = 0.5;
    std::vector<ReplicateRecord> recs;
    const double vals[] = {0.4, 0.6, NAN};
    for (std::size_t r = 0; r < 3; ++r) {
        const bool ok = r < 2;
        recs.push_back({r, EstimatorKind::Proposed, "theta_z", ok ? 0.1 : NAN, ok ? 0.1 : NAN, ok, ok});
        recs.push_back({r, EstimatorKind::Proposed, "theta_m", vals[r], ok ? 0.2 : NAN, ok && r == 0, ok});
    }
    auto sum = summarize(s, recs, {EstimatorKind::Proposed});
    const auto& m = sum.find(EstimatorKind::Proposed, "theta_m");
    CHECK(m.converged == 2);
    CHECK(m.failures == 1);
    CHECK(m.mean_estimate == doctest::Approx(0.5));
    CHECK(*m.sd == doctest::Approx(0.1));  // population spread
    CHECK(m.coverage == doctest::Approx(0.5));
    CHECK(*m.mc_se() == doctest::Approx(0.1 / std::sqrt(2.0)));
}

TEST_CASE("augmentation does not lose efficiency on the study design") {
    SimScenario s;
    s.reps = 200;
    s.theta_u = -1.0;
    StudyOptions opt;
    opt.estimators = {EstimatorKind::Proposed, EstimatorKind::ProposedAugmented};
    auto r = run_study(s, opt);
    CHECK(*r.summary.find(EstimatorKind::ProposedAugmented, "theta_m").sd <=
          *r.summary.find(EstimatorKind::Proposed, "theta_m").sd);
}

TEST_CASE("scenario files") {
    auto s = parse_text("# comment\nn = 50\nreps=3\nfamily=negbin\ntheta_u=-1 # trailing\nnb_size=3\n");
    CHECK(s.n == 50);
    CHECK(s.reps == 3);
    CHECK(s.family == OutcomeFamily::NegBin);
    CHECK(s.theta_u == -1.0);
    CHECK(s.nb_size == 3.0);

    auto back = parse_text(format_scenario(s));
    CHECK(format_scenario(back) == format_scenario(s));

    try {
        parse_text("thetaU=1\n");
        FAIL("expected error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ScenarioParse);
        CHECK(std::string(e.what()).find("thetaU") != std::string::npos);
    }
    CHECK(code_of([] { parse_text("n=10\nn=20\n"); }) == ErrorCode::ScenarioParse);
    CHECK(code_of([] { parse_text("theta_m=abc\n"); }) == ErrorCode::ScenarioParse);
    CHECK(code_of([] { parse_text("family=gamma\n"); }) == ErrorCode::ScenarioParse);
    CHECK(code_of([] { parse_text("n=5\n"); }) == ErrorCode::ScenarioParse);
    CHECK(code_of([] { parse_text("treatment_probability=1\n"); }) == ErrorCode::ScenarioParse);
    SimScenario bad;
    bad.mediator_residual_variance = 0.0;
    CHECK(code_of([&] { bad.validate(); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("estimator names") {
    for (auto k : {EstimatorKind::Proposed, EstimatorKind::ProposedAugmented, EstimatorKind::Poisson,
                   EstimatorKind::QuasiPoisson, EstimatorKind::NegBin})
        CHECK(parse_estimator(to_string(k)) == k);
    CHECK(code_of([] { parse_estimator("ols"); }) == ErrorCode::InvalidArgument);
}
