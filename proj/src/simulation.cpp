#include "msmm/simulation.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <sstream>

#include "msmm/errors.hpp"
#include "msmm/estimator.hpp"
#include "msmm/glm.hpp"
#include "msmm/parallel.hpp"
#include "msmm/stats.hpp"

namespace msmm {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
const std::array<const char*, 2> kParameters = {"theta_z", "theta_m"};

std::string fmt(double value) {
    if (std::isnan(value)) return "NA";
    std::array<char, 64> buf{};
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
    return std::string(buf.data(), ptr);
}

std::string fmt(const std::optional<double>& value) { return value ? fmt(*value) : "NA"; }

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

double truth_of(const SimScenario& s, const std::string& parameter) {
    return parameter == "theta_z" ? s.theta_z : s.theta_m;
}

struct Fitted {
    double theta_z = kNaN, theta_m = kNaN, se_z = kNaN, se_m = kNaN;
    bool ok = false;
};

Fitted fit_one(EstimatorKind kind, const Dataset& data) {
    Fitted out;
    try {
        if (kind == EstimatorKind::Proposed || kind == EstimatorKind::ProposedAugmented) {
            EffectSpec spec = make_mediation_spec(data.covariate_names(), {0});
            if (kind == EstimatorKind::ProposedAugmented) spec.augmentation = Augmentation{{0}, true};
            SolveOptions opt;
            opt.check_identification = false;
            const auto r = solve(spec, data, opt);
            out = {r.theta[0], r.theta[1], r.std_errors[0], r.std_errors[1], true};
        } else {
            MatrixXd design(static_cast<Eigen::Index>(data.n()), 4);
            design << VectorXd::Ones(design.rows()), data.treatment(), data.mediator(),
                data.covariates().col(0);
            GlmFit fit;
            if (kind == EstimatorKind::Poisson)
                fit = fit_poisson_irls(design, data.outcome());
            else if (kind == EstimatorKind::QuasiPoisson)
                fit = fit_quasipoisson(design, data.outcome());
            else
                fit = fit_negbin(design, data.outcome());
            const VectorXd se = fit.std_errors();
            out = {fit.coefficients[1], fit.coefficients[2], se[1], se[2], true};
        }
    } catch (const Error&) {
        out.ok = false;
    }
    if (out.ok && !(std::isfinite(out.theta_z) && std::isfinite(out.theta_m) &&
                    std::isfinite(out.se_z) && std::isfinite(out.se_m)))
        out.ok = false;
    return out;
}

}  // namespace

void SimScenario::validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidArgument, what); };
    if (n < 10) fail("scenario n must be at least 10");
    if (reps < 1) fail("scenario reps must be at least 1");
    if (!(mediator_residual_variance > 0.0)) fail("mediator residual variance must be positive");
    if (!(treatment_probability > 0.0 && treatment_probability < 1.0))
        fail("treatment probability must lie in (0, 1)");
    if (family == OutcomeFamily::NegBin && !(nb_size > 0.0)) fail("nb_size must be positive");
    for (double v : {theta_x, theta_z, theta_m, theta_u, theta_v, gamma_z, gamma_x, gamma_zx, gamma_u})
        if (!std::isfinite(v)) fail("scenario coefficients must be finite");
}

const char* to_string(OutcomeFamily family) {
    switch (family) {
        case OutcomeFamily::Poisson: return "poisson";
        case OutcomeFamily::OdPoisson: return "odpoisson";
        case OutcomeFamily::NegBin: return "negbin";
    }
    return "unknown";
}

SimScenario parse_scenario(std::istream& in) {
    SimScenario s;
    std::map<std::string, double*, std::less<>> reals = {
        {"nb_size", &s.nb_size},
        {"theta_x", &s.theta_x},
        {"theta_z", &s.theta_z},
        {"theta_m", &s.theta_m},
        {"theta_u", &s.theta_u},
        {"theta_v", &s.theta_v},
        {"gamma_z", &s.gamma_z},
        {"gamma_x", &s.gamma_x},
        {"gamma_zx", &s.gamma_zx},
        {"gamma_u", &s.gamma_u},
        {"mediator_residual_variance", &s.mediator_residual_variance},
        {"treatment_probability", &s.treatment_probability},
    };
    std::map<std::string, int, std::less<>> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string_view text = line;
        if (auto hash = text.find('#'); hash != std::string_view::npos) text = text.substr(0, hash);
        text = trim(text);
        if (text.empty()) continue;
        const auto eq = text.find('=');
        if (eq == std::string_view::npos)
            throw Error(ErrorCode::ScenarioParse,
                        "line " + std::to_string(lineno) + ": expected key=value");
        const std::string key(trim(text.substr(0, eq)));
        const std::string value(trim(text.substr(eq + 1)));
        if (seen[key]++) throw Error(ErrorCode::ScenarioParse, "duplicate key '" + key + "'");

        auto bad_value = [&] {
            return Error(ErrorCode::ScenarioParse,
                         "bad value '" + value + "' for key '" + key + "'");
        };
        auto parse_real = [&] {
            double v = 0.0;
            auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
            if (ec != std::errc() || ptr != value.data() + value.size()) throw bad_value();
            return v;
        };
        auto parse_unsigned = [&] {
            std::uint64_t v = 0;
            auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
            if (ec != std::errc() || ptr != value.data() + value.size()) throw bad_value();
            return v;
        };

        if (auto it = reals.find(key); it != reals.end()) {
            *it->second = parse_real();
        } else if (key == "n") {
            s.n = parse_unsigned();
        } else if (key == "reps") {
            s.reps = parse_unsigned();
        } else if (key == "base_seed") {
            s.base_seed = parse_unsigned();
        } else if (key == "family") {
            if (value == "poisson")
                s.family = OutcomeFamily::Poisson;
            else if (value == "odpoisson")
                s.family = OutcomeFamily::OdPoisson;
            else if (value == "negbin")
                s.family = OutcomeFamily::NegBin;
            else
                throw bad_value();
        } else {
            throw Error(ErrorCode::ScenarioParse, "unknown key '" + key + "'");
        }
    }
    try {
        s.validate();
    } catch (const Error& e) {
        throw Error(ErrorCode::ScenarioParse, e.what());
    }
    return s;
}

SimScenario load_scenario(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::ScenarioParse, "cannot open scenario '" + path + "'");
    return parse_scenario(in);
}

std::string format_scenario(const SimScenario& s) {
    std::ostringstream out;
    out << "n=" << s.n << "\nreps=" << s.reps << "\nfamily=" << to_string(s.family)
        << "\nnb_size=" << fmt(s.nb_size) << "\ntheta_x=" << fmt(s.theta_x)
        << "\ntheta_z=" << fmt(s.theta_z) << "\ntheta_m=" << fmt(s.theta_m)
        << "\ntheta_u=" << fmt(s.theta_u) << "\ntheta_v=" << fmt(s.theta_v)
        << "\ngamma_z=" << fmt(s.gamma_z) << "\ngamma_x=" << fmt(s.gamma_x)
        << "\ngamma_zx=" << fmt(s.gamma_zx) << "\ngamma_u=" << fmt(s.gamma_u)
        << "\nmediator_residual_variance=" << fmt(s.mediator_residual_variance)
        << "\ntreatment_probability=" << fmt(s.treatment_probability)
        << "\nbase_seed=" << s.base_seed << "\n";
    return out.str();
}

SimDraw generate(const SimScenario& s, std::size_t rep_index) {
    s.validate();
    auto rng = make_stream(s.base_seed, rep_index);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::bernoulli_distribution coin(s.treatment_probability);
    const double resid_sd = std::sqrt(std::max(s.mediator_residual_variance, 1e-12));

    const auto n = static_cast<Eigen::Index>(s.n);
    VectorXd y(n), z(n), m(n), u(n), v(n), rate(n);
    MatrixXd x(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double xi = normal(rng);
        const double ui = normal(rng);
        const double zi = coin(rng) ? 1.0 : 0.0;
        const double mi = s.gamma_z * zi + s.gamma_x * xi + s.gamma_zx * zi * xi +
                          s.gamma_u * ui + resid_sd * normal(rng);
        const double vi = s.family == OutcomeFamily::OdPoisson ? normal(rng) : 0.0;
        double log_rate = s.theta_z * zi + s.theta_m * mi + s.theta_u * ui + s.theta_x * xi;
        if (s.family == OutcomeFamily::OdPoisson) log_rate += s.theta_v * vi;
        const double lambda = std::exp(log_rate);

        double mean = lambda;
        if (s.family == OutcomeFamily::NegBin) {
            std::gamma_distribution<double> gamma(s.nb_size, lambda / s.nb_size);
            mean = gamma(rng);
        }
        std::poisson_distribution<long long> pois(mean);
        y[i] = mean > 0.0 ? static_cast<double>(pois(rng)) : 0.0;
        x(i, 0) = xi;
        z[i] = zi;
        m[i] = mi;
        u[i] = ui;
        v[i] = vi;
        rate[i] = lambda;
    }
    return SimDraw{Dataset(std::move(y), std::move(z), std::move(m), std::move(x), {"x"}),
                   LatentDraw{std::move(u), std::move(v), std::move(rate)}};
}

const char* to_string(EstimatorKind kind) {
    switch (kind) {
        case EstimatorKind::Proposed: return "proposed";
        case EstimatorKind::ProposedAugmented: return "proposed-augmented";
        case EstimatorKind::Poisson: return "poisson";
        case EstimatorKind::QuasiPoisson: return "quasipoisson";
        case EstimatorKind::NegBin: return "negbin";
    }
    return "unknown";
}

EstimatorKind parse_estimator(const std::string& text) {
    for (auto kind : {EstimatorKind::Proposed, EstimatorKind::ProposedAugmented,
                      EstimatorKind::Poisson, EstimatorKind::QuasiPoisson, EstimatorKind::NegBin})
        if (text == to_string(kind)) return kind;
    throw Error(ErrorCode::InvalidArgument, "unknown estimator '" + text + "'");
}

std::vector<EstimatorKind> default_estimators() {
    return {EstimatorKind::Proposed, EstimatorKind::ProposedAugmented, EstimatorKind::Poisson,
            EstimatorKind::QuasiPoisson, EstimatorKind::NegBin};
}

std::optional<double> SummaryRow::mc_se() const {
    if (!sd) return std::nullopt;
    return *sd / std::sqrt(static_cast<double>(converged));
}

const SummaryRow& SimSummary::find(EstimatorKind estimator, const std::string& parameter) const {
    for (const auto& row : rows)
        if (row.estimator == estimator && row.parameter == parameter) return row;
    throw Error(ErrorCode::InvalidArgument,
                std::string("no summary row for ") + to_string(estimator) + "/" + parameter);
}

StudyResult run_study(const SimScenario& scenario, const StudyOptions& options) {
    scenario.validate();
    const double zcrit = wald_critical_value(options.level);
    const std::size_t per_rep = options.estimators.size() * kParameters.size();
    std::vector<ReplicateRecord> records(scenario.reps * per_rep);

    const std::size_t threads = options.threads ? options.threads : default_thread_count();
    parallel_for(scenario.reps, threads, [&](std::size_t rep) {
        const SimDraw draw = generate(scenario, rep);
        std::size_t slot = rep * per_rep;
        for (auto kind : options.estimators) {
            const Fitted f = fit_one(kind, draw.data);
            for (const char* parameter : kParameters) {
                const bool is_z = std::string_view(parameter) == "theta_z";
                const double est = is_z ? f.theta_z : f.theta_m;
                const double se = is_z ? f.se_z : f.se_m;
                ReplicateRecord& r = records[slot++];
                r.rep = rep;
                r.estimator = kind;
                r.parameter = parameter;
                r.converged = f.ok;
                r.estimate = f.ok ? est : kNaN;
                r.std_error = f.ok ? se : kNaN;
                r.covered = f.ok && std::abs(est - truth_of(scenario, parameter)) <= zcrit * se;
            }
        }
    });

    StudyResult result;
    result.scenario = scenario;
    result.summary = summarize(scenario, records, options.estimators);
    result.replicates = std::move(records);
    return result;
}

SimSummary summarize(const SimScenario& scenario, const std::vector<ReplicateRecord>& replicates,
                     const std::vector<EstimatorKind>& estimators) {
    SimSummary summary;
    for (auto kind : estimators) {
        for (const char* parameter : kParameters) {
            SummaryRow row;
            row.estimator = kind;
            row.parameter = parameter;
            row.truth = truth_of(scenario, parameter);
            std::vector<double> est, se;
            std::size_t covered = 0;
            for (const auto& r : replicates) {
                if (r.estimator != kind || r.parameter != parameter) continue;
                if (!r.converged) {
                    ++row.failures;
                    continue;
                }
                est.push_back(r.estimate);
                se.push_back(r.std_error);
                covered += r.covered ? 1 : 0;
            }
            row.converged = est.size();
            if (!est.empty()) {
                const double count = static_cast<double>(est.size());
                row.mean_estimate = mean(est);
                row.bias = row.mean_estimate - row.truth;
                double sq = 0.0, dev = 0.0;
                for (double e : est) {
                    sq += (e - row.truth) * (e - row.truth);
                    dev += (e - row.mean_estimate) * (e - row.mean_estimate);
                }
                row.rmse = std::sqrt(sq / count);
                // Population SD, so that rmse^2 = bias^2 + sd^2.
                if (est.size() >= 2) row.sd = std::sqrt(dev / count);
                row.mean_se = mean(se);
                row.coverage = static_cast<double>(covered) / count;
            } else {
                row.mean_estimate = row.bias = row.rmse = row.coverage = kNaN;
            }
            summary.rows.push_back(std::move(row));
        }
    }
    return summary;
}

void write_summary_csv(std::ostream& out, const SimSummary& summary) {
    out << "estimator,parameter,truth,converged,failures,mean_estimate,bias,sd,mean_se,rmse,"
           "coverage\n";
    for (const auto& r : summary.rows)
        out << to_string(r.estimator) << ',' << r.parameter << ',' << fmt(r.truth) << ','
            << r.converged << ',' << r.failures << ',' << fmt(r.mean_estimate) << ','
            << fmt(r.bias) << ',' << fmt(r.sd) << ',' << fmt(r.mean_se) << ',' << fmt(r.rmse)
            << ',' << fmt(r.coverage) << '\n';
}

void write_replicates_csv(std::ostream& out, const std::vector<ReplicateRecord>& replicates) {
    out << "rep,estimator,parameter,estimate,se,covered,converged\n";
    for (const auto& r : replicates)
        out << r.rep << ',' << to_string(r.estimator) << ',' << r.parameter << ','
            << fmt(r.estimate) << ',' << fmt(r.std_error) << ',' << (r.covered ? 1 : 0) << ','
            << (r.converged ? 1 : 0) << '\n';
}

}  // namespace msmm
