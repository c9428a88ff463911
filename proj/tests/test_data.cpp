#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>
#include <sstream>

#include "msmm/data.hpp"
#include "msmm/errors.hpp"

using namespace msmm;

namespace {

LoadResult parse(const std::string& text, ColumnMapping mapping = {}, bool drop = false) {
    std::istringstream in(text);
    return read_csv(in, mapping, drop);
}

ColumnMapping with_x1() {
    ColumnMapping m;
    m.covariates = {"x1"};
    return m;
}

template <class F>
ErrorCode code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("no error thrown");
    return ErrorCode::InvalidArgument;
}

Dataset random_dataset(std::mt19937_64& rng, std::size_t n, std::size_t p) {
    std::normal_distribution<double> nd;
    std::bernoulli_distribution bern(0.5);
    std::poisson_distribution<int> pois(3.0);
    VectorXd y(n), z(n), m(n);
    MatrixXd x(n, p);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = pois(rng);
        z[i] = bern(rng);
        m[i] = nd(rng) * 1e3;
        for (std::size_t j = 0; j < p; ++j) x(i, j) = nd(rng) / 7.0;
    }
    std::vector<std::string> names;
    for (std::size_t j = 0; j < p; ++j) names.push_back("x" + std::to_string(j + 1));
    return Dataset(y, z, m, x, names);
}

}  // namespace

TEST_CASE("csv parse keeps row order and shape") {
    auto r = parse("y,z,m,x1\n3,1,2.0,0.5\n0,0,1.0,-0.2\n", with_x1());
    CHECK(r.data.n() == 2);
    CHECK(r.data.p() == 1);
    CHECK(r.data.outcome()[0] == 3);
    CHECK(r.data.mediator()[1] == 1.0);
    CHECK(r.data.covariates()(1, 0) == -0.2);
    CHECK(r.dropped_rows == 0);
}

TEST_CASE("columns are found by name in any order") {
    auto r = parse("x1,m,y,z\n0.5,2,3,1\n", with_x1());
    CHECK(r.data.outcome()[0] == 3);
    CHECK(r.data.treatment()[0] == 1);
    CHECK(r.data.covariates()(0, 0) == 0.5);
}

TEST_CASE("negative outcome names its row") {
    try {
        parse("y,z,m,x1\n-1,1,2.0,0.5\n", with_x1());
        FAIL("expected error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::NegativeOutcome);
        CHECK(e.row() == 1);
    }
}

TEST_CASE("empty mediator cell is a missing value at that row and column") {
    try {
        parse("y,z,m,x1\n1,1,2,0\n3,1,,0.5\n", with_x1());
        FAIL("expected error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::MissingValue);
        CHECK(e.row() == 2);
        CHECK(e.column() == "m");
    }
}

TEST_CASE("other input errors") {
    CHECK(code_of([] { parse("y,z,m\n1,1,2\n", with_x1()); }) == ErrorCode::MissingColumn);
    CHECK(code_of([] { parse("y,z,m\n1.5,1,2\n"); }) == ErrorCode::NonIntegerOutcome);
    CHECK(code_of([] { parse("y,z,m\n1,1\n"); }) == ErrorCode::MalformedCsv);
    CHECK(code_of([] { parse("y,z,m\n1,1,abc\n"); }) == ErrorCode::MalformedCsv);
    CHECK(code_of([] { parse("y,z,m\n1,1,NA\n"); }) == ErrorCode::MissingValue);
}

TEST_CASE("drop-incomplete removes and counts rows") {
    auto r = parse("y,z,m,x1\n1,1,2,0\n3,1,,0.5\n2,0,NA,1\n4,0,1,1\n", with_x1(), true);
    CHECK(r.data.n() == 2);
    CHECK(r.dropped_rows == 2);
    CHECK(r.data.outcome()[1] == 4);
}

TEST_CASE("unmapped columns may be missing") {
    auto r = parse("y,z,m,notes\n1,1,2,\n");
    CHECK(r.data.n() == 1);
}

TEST_CASE("dataset validation") {
    VectorXd y(2), z(2), m(2);
    y << 1, 2;
    z << 0, 1;
    m << 0, 0;
    CHECK(code_of([&] { Dataset(y, z, VectorXd::Zero(3), MatrixXd(2, 0), {}); }) ==
          ErrorCode::InvalidDataset);
    VectorXd ybad = y;
    ybad[0] = 0.5;
    CHECK(code_of([&] { Dataset(ybad, z, m, MatrixXd(2, 0), {}); }) ==
          ErrorCode::NonIntegerOutcome);
    Dataset ok(y, z, m, MatrixXd(2, 0), {});
    CHECK(ok.has_binary_treatment());
    Dataset one_arm(y, VectorXd::Ones(2), m, MatrixXd(2, 0), {});
    CHECK_FALSE(one_arm.has_binary_treatment());
    CHECK(code_of([&] { one_arm.require_binary_treatment(); }) == ErrorCode::NonBinaryTreatment);
}

TEST_CASE("csv round trip reproduces every number exactly") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Dataset d = random_dataset(rng, 25, 3);
        std::ostringstream out;
        write_csv(out, d);
        ColumnMapping mapping;
        mapping.covariates = d.covariate_names();
        auto back = parse(out.str(), mapping).data;
        CHECK(back.outcome() == d.outcome());
        CHECK(back.treatment() == d.treatment());
        CHECK(back.mediator() == d.mediator());
        CHECK(back.covariates() == d.covariates());
    }
}

TEST_CASE("select_rows allows duplicates") {
    auto d = parse("y,z,m\n1,0,0.1\n2,1,0.2\n3,1,0.3\n").data;
    std::vector<std::size_t> rows{2, 2, 0};
    auto s = d.select_rows(rows);
    CHECK(s.n() == 3);
    CHECK(s.outcome()[0] == 3);
    CHECK(s.outcome()[1] == 3);
    CHECK(s.outcome()[2] == 1);
    std::vector<std::size_t> bad{3};
    CHECK(code_of([&] { d.select_rows(bad); }) == ErrorCode::IndexOutOfRange);
}

TEST_CASE("basis rows") {
    auto d = parse("y,z,m,x1\n0,1,2.5,0.4\n", with_x1()).data;
    EffectSpec s;
    s.basis = parse_basis("Z,M", d.covariate_names());
    s.weights = parse_weights("Z", d.covariate_names());
    MatrixXd H = build_basis_matrix(s, d);
    CHECK(H(0, 0) == 1.0);
    CHECK(H(0, 1) == 2.5);

    s.basis = parse_basis("Z:x1", d.covariate_names());
    CHECK(std::abs(build_basis_matrix(s, d)(0, 0) - 0.4) < 1e-15);
}

TEST_CASE("weight rows") {
    auto d = parse("y,z,m,x1\n0,1,9,-0.3\n0,0,9,2\n", with_x1()).data;
    EffectSpec s;
    s.basis = parse_basis("Z", d.covariate_names());
    s.weights = parse_weights("Z,Z:x1", d.covariate_names());
    MatrixXd A = build_weight_matrix(s, d);
    CHECK(A(0, 0) == 1.0);
    CHECK(A(0, 1) == -0.3);
    CHECK(A(1, 0) == 0.0);

    auto d3 = parse("y,z,m,x1\n0,1,0,2\n0,0,0,5\n0,1,0,-1\n", with_x1()).data;
    s.weights = parse_weights("Z:x1", d3.covariate_names());
    MatrixXd col = build_weight_matrix(s, d3);
    CHECK(col(0, 0) == 2.0);
    CHECK(col(1, 0) == 0.0);
    CHECK(col(2, 0) == -1.0);
}

TEST_CASE("every basis vanishes at z = 0, m = 0") {
    std::mt19937_64 rng(11);
    const std::vector<std::string> names{"x1", "x2", "x3"};
    const auto full = parse_basis("Z,M,Z:M,Z:x1,M:x1,Z:x2,M:x3", names);
    for (int trial = 0; trial < 30; ++trial) {
        Dataset d = random_dataset(rng, 40, 3);
        EffectSpec s;
        // random non-empty subset of the vocabulary
        for (const auto& t : full)
            if (rng() % 2) s.basis.push_back(t);
        if (s.basis.empty()) s.basis.push_back(full[trial % full.size()]);
        Dataset zeroed = d.with_columns(d.outcome(), VectorXd::Zero(40), VectorXd::Zero(40));
        CHECK(build_basis_matrix(s, zeroed).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("weights ignore mediator and outcome") {
    std::mt19937_64 rng(13);
    const std::vector<std::string> names{"x1", "x2"};
    EffectSpec s;
    s.basis = parse_basis("Z", names);
    s.weights = parse_weights("Z,Z:x1,Z:x2", names);
    for (int trial = 0; trial < 20; ++trial) {
        Dataset d = random_dataset(rng, 30, 2);
        Dataset other = random_dataset(rng, 30, 2);
        Dataset mixed = d.with_columns(other.outcome(), d.treatment(), other.mediator());
        CHECK(build_weight_matrix(s, mixed) == build_weight_matrix(s, d));
    }
}

TEST_CASE("term parsing and spec validation") {
    const std::vector<std::string> names{"x1", "age"};
    auto b = parse_basis("Z, M, Z:M, Z:age, M:x1", names);
    REQUIRE(b.size() == 5);
    CHECK(b[3].kind == BasisTerm::Kind::ZX);
    CHECK(b[3].covariate == 1);
    CHECK(b[4].kind == BasisTerm::Kind::MX);
    CHECK(code_of([&] { parse_basis("Z:zz", names); }) == ErrorCode::InvalidSpec);
    EffectSpec out_of_range;
    out_of_range.basis = {BasisTerm{BasisTerm::Kind::ZX, 5, "Z:?"}};
    auto d = parse("y,z,m,x1\n0,1,0,1\n", with_x1()).data;
    CHECK(code_of([&] { build_basis_matrix(out_of_range, d); }) == ErrorCode::IndexOutOfRange);
    out_of_range.weights = {WeightTerm{WeightTerm::Kind::ZX, 1, "Z:?"}};
    CHECK(code_of([&] { build_weight_matrix(out_of_range, d); }) == ErrorCode::IndexOutOfRange);
    CHECK(code_of([&] { parse_weights("M", names); }) == ErrorCode::InvalidSpec);

    auto aug = parse_augmentation("1,age", names);
    CHECK(aug.intercept);
    CHECK(aug.dimension() == 2);
    CHECK_FALSE(parse_augmentation("-1,x1", names).intercept);

    EffectSpec s;
    s.basis = parse_basis("Z,M", names);
    s.weights = parse_weights("Z", names);
    CHECK(code_of([&] { s.validate(2); }) == ErrorCode::InvalidSpec);  // L < K
    s.weights = parse_weights("Z,Z", names);
    CHECK(code_of([&] { s.validate(2); }) == ErrorCode::InvalidSpec);  // duplicate
    s.weights = parse_weights("Z,Z:age", names);
    CHECK_NOTHROW(s.validate(2));
    CHECK(code_of([&] { s.validate(1); }) == ErrorCode::IndexOutOfRange);

    auto med = make_mediation_spec(names, {0, 1});
    CHECK(med.num_params() == 2);
    CHECK(med.num_equations() == 3);
}
