#include "msmm/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "msmm/errors.hpp"
#include "msmm/glm.hpp"
#include "msmm/inference.hpp"
#include "msmm/stats.hpp"

namespace msmm {

namespace {

constexpr double kExpGuard = 700.0;
constexpr double kInf = std::numeric_limits<double>::infinity();

void guard_exponent(const VectorXd& eta, const char* what) {
    if ((eta.array().abs() > kExpGuard).any() || !eta.allFinite())
        throw Error(ErrorCode::OverflowGuard,
                    std::string(what) + " exceeds the exponent guard; iterate diverged");
}

double condition_number(const MatrixXd& m) {
    if (m.size() == 0) return kInf;
    Eigen::JacobiSVD<MatrixXd> svd(m);
    const auto& s = svd.singularValues();
    const double smax = s.maxCoeff();
    const double smin = s.minCoeff();
    if (!(smax > 0.0) || !(smin > 0.0)) return kInf;
    return smax / smin;
}

// Orthonormal basis of the column space (numerical rank from pivoted QR).
MatrixXd column_space(const MatrixXd& m) {
    Eigen::ColPivHouseholderQR<MatrixXd> qr(m);
    const auto rank = qr.rank();
    MatrixXd q = qr.householderQ() * MatrixXd::Identity(m.rows(), rank);
    return q;
}

MatrixXd augmentation_design(const Augmentation& aug, const Dataset& data) {
    const auto n = static_cast<Eigen::Index>(data.n());
    MatrixXd design(n, static_cast<Eigen::Index>(aug.dimension()));
    Eigen::Index col = 0;
    if (aug.intercept) design.col(col++).setOnes();
    for (auto j : aug.covariates)
        design.col(col++) = data.covariates().col(static_cast<Eigen::Index>(j));
    return design;
}

std::vector<std::string> parameter_labels(const EffectSpec& spec, const Dataset& data) {
    std::vector<std::string> labels;
    for (const auto& term : spec.basis) labels.push_back(term.label);
    if (spec.augmentation) {
        if (spec.augmentation->intercept) labels.emplace_back("beta:(Intercept)");
        for (auto j : spec.augmentation->covariates)
            labels.push_back("beta:" + data.covariate_names()[j]);
    }
    return labels;
}

// Working-model coefficients for fixed theta: the beta rows are a Poisson
// score in the tilted response, so a Poisson fit solves them.
VectorXd working_start(const ScoreSystem& system, const VectorXd& theta) {
    const MatrixXd& design = *system.augmentation_design();
    const VectorXd eta = system.basis() * theta;
    VectorXd start = VectorXd::Zero(design.cols());
    if ((eta.array().abs() > kExpGuard).any()) return start;
    const VectorXd tilted = system.outcome().array() * (-eta.array()).exp();
    try {
        return fit_poisson_irls(design, tilted).coefficients;
    } catch (const Error&) {
        for (Eigen::Index j = 0; j < design.cols(); ++j)
            if ((design.col(j).array() == 1.0).all()) start[j] = std::log(tilted.mean() + 0.5);
        return start;
    }
}

VectorXd full_start(const ScoreSystem& system, const VectorXd& theta) {
    if (!system.augmented()) return theta;
    VectorXd params(system.num_params());
    params << theta, working_start(system, theta);
    return params;
}

SystemSolution newton(const ScoreSystem& system, VectorXd params, const SolveOptions& opt) {
    const double n = static_cast<double>(system.n());
    SystemSolution out;
    VectorXd s;
    try {
        s = system.score(params);
    } catch (const Error&) {
        out.params = params;
        return out;
    }
    for (int iter = 0; iter <= opt.max_iter; ++iter) {
        out.iterations = iter;
        if (s.cwiseAbs().maxCoeff() / n < opt.score_tol) {
            out.converged = true;
            break;
        }
        if (iter == opt.max_iter) break;
        if (opt.on_iterate) opt.on_iterate(params);
        const MatrixXd jac = system.jacobian(params);
        const VectorXd delta = jac.colPivHouseholderQr().solve(-s);
        if (!delta.allFinite()) break;

        const double merit = s.squaredNorm();
        bool accepted = false;
        double step = 1.0;
        for (int h = 0; h < 40; ++h, step *= 0.5) {
            const VectorXd trial = params + step * delta;
            VectorXd s_trial;
            try {
                s_trial = system.score(trial);
            } catch (const Error&) {
                continue;
            }
            if (s_trial.squaredNorm() < merit) {
                params = trial;
                s = std::move(s_trial);
                accepted = true;
                break;
            }
        }
        if (!accepted) break;
    }
    out.params = params;
    out.objective = (s / n).squaredNorm();
    return out;
}

SystemSolution levenberg_marquardt(const ScoreSystem& system, VectorXd params,
                                   const SolveOptions& opt) {
    const double n = static_cast<double>(system.n());
    SystemSolution out;
    VectorXd r;
    try {
        r = system.score(params) / n;
    } catch (const Error&) {
        out.params = params;
        return out;
    }
    double f = r.squaredNorm();
    MatrixXd jac = system.jacobian(params) / n;
    if (opt.on_iterate) opt.on_iterate(params);
    MatrixXd jtj = jac.transpose() * jac;
    double lambda = 1e-3;
    const auto p = jac.cols();
    for (int iter = 0; iter <= opt.max_iter; ++iter) {
        out.iterations = iter;
        const VectorXd gradient = 2.0 * jac.transpose() * r;
        if (gradient.norm() < opt.gradient_tol) {
            out.converged = true;
            break;
        }
        if (iter == opt.max_iter) break;
        bool accepted = false;
        while (lambda < 1e20) {
            MatrixXd lhs = jtj;
            for (Eigen::Index k = 0; k < p; ++k)
                lhs(k, k) += lambda * std::max(jtj(k, k), 1e-12);
            const VectorXd delta = lhs.ldlt().solve(-jac.transpose() * r);
            const VectorXd trial = params + delta;
            VectorXd r_trial;
            bool ok = delta.allFinite();
            if (ok) {
                try {
                    r_trial = system.score(trial) / n;
                } catch (const Error&) {
                    ok = false;
                }
            }
            if (ok && r_trial.squaredNorm() < f) {
                params = trial;
                r = std::move(r_trial);
                f = r.squaredNorm();
                jac = system.jacobian(params) / n;
                jtj = jac.transpose() * jac;
                if (opt.on_iterate) opt.on_iterate(params);
                lambda = std::max(lambda / 10.0, 1e-15);
                accepted = true;
                break;
            }
            lambda *= 10.0;
        }
        if (!accepted) break;
    }
    out.params = params;
    out.objective = f;
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------

const char* to_string(Centering::Kind kind) {
    switch (kind) {
        case Centering::Kind::KnownProbability: return "known";
        case Centering::Kind::EmpiricalMean: return "empirical";
        case Centering::Kind::PerColumnOls: return "ols";
    }
    return "unknown";
}

Centering parse_centering(const std::string& text) {
    if (text == "empirical") return Centering::empirical();
    if (text == "ols") return Centering::per_column_ols();
    if (text.rfind("known", 0) == 0) {
        // "known" or "known:<p>"
        double p = 0.5;
        if (text.size() > 5) {
            if (text[5] != ':') throw Error(ErrorCode::InvalidArgument, "bad centering '" + text + "'");
            try {
                p = std::stod(text.substr(6));
            } catch (const std::exception&) {
                throw Error(ErrorCode::InvalidArgument, "bad probability in '" + text + "'");
            }
        }
        if (!(p > 0.0 && p < 1.0))
            throw Error(ErrorCode::InvalidArgument, "known probability must lie in (0, 1)");
        return Centering::known(p);
    }
    throw Error(ErrorCode::InvalidArgument,
                "centering must be empirical, ols, known or known:<p>, got '" + text + "'");
}

MatrixXd center_weights(const MatrixXd& weights, const EffectSpec& spec, const Dataset& data,
                        const Centering& method) {
    if (static_cast<std::size_t>(weights.cols()) != spec.weights.size() ||
        static_cast<std::size_t>(weights.rows()) != data.n())
        throw Error(ErrorCode::InvalidArgument, "weight matrix does not match spec and data");
    if (method.kind == Centering::Kind::PerColumnOls)
        return residualize(weights, with_intercept(data.covariates()));

    data.require_binary_treatment();
    const double p = method.kind == Centering::Kind::KnownProbability
                         ? method.probability
                         : data.treatment().mean();
    MatrixXd centered = weights;
    for (Eigen::Index i = 0; i < centered.rows(); ++i)
        for (std::size_t l = 0; l < spec.weights.size(); ++l)
            centered(i, static_cast<Eigen::Index>(l)) -=
                p * spec.weights[l].covariate_factor(data.covariates().row(i));
    return centered;
}

// ---------------------------------------------------------------------------
// ScoreSystem

ScoreSystem::ScoreSystem(MatrixXd basis, MatrixXd centered_weights, VectorXd outcome,
                         std::optional<MatrixXd> augmentation_design, CenteringStep centering)
    : basis_(std::move(basis)),
      weights_(std::move(centered_weights)),
      outcome_(std::move(outcome)),
      augmentation_(std::move(augmentation_design)),
      centering_(std::move(centering)) {
    if (basis_.rows() != outcome_.size() || weights_.rows() != outcome_.size() ||
        (augmentation_ && augmentation_->rows() != outcome_.size()))
        throw Error(ErrorCode::InvalidArgument, "score system blocks have different row counts");
    if (basis_.cols() < 1 || weights_.cols() < basis_.cols())
        throw Error(ErrorCode::InvalidSpec, "need L >= K >= 1 estimating equations");
}

ScoreSystem::Residual ScoreSystem::residual(const VectorXd& params) const {
    if (params.size() != num_params())
        throw Error(ErrorCode::InvalidArgument, "parameter vector has wrong length");
    if (!params.allFinite()) throw Error(ErrorCode::InvalidArgument, "non-finite parameters");
    Residual r;
    const VectorXd eta = basis_ * params.head(num_basis());
    guard_exponent(eta, "theta'H");
    r.tilted = outcome_.array() * (-eta.array()).exp();
    if (augmentation_) {
        const VectorXd xb = *augmentation_ * params.tail(num_working());
        guard_exponent(xb, "X beta");
        r.working = xb.array().exp();
    }
    return r;
}

VectorXd ScoreSystem::score(const VectorXd& params) const {
    const auto r = residual(params);
    const VectorXd d = augmentation_ ? VectorXd(r.tilted - r.working) : r.tilted;
    VectorXd s(num_equations());
    s.head(num_weights()) = weights_.transpose() * d;
    if (augmentation_) s.tail(num_working()) = augmentation_->transpose() * d;
    return s;
}

MatrixXd ScoreSystem::score_contributions(const VectorXd& params) const {
    const auto r = residual(params);
    const VectorXd d = augmentation_ ? VectorXd(r.tilted - r.working) : r.tilted;
    MatrixXd c(n(), num_equations());
    c.leftCols(num_weights()) = d.asDiagonal() * weights_;
    if (augmentation_) c.rightCols(num_working()) = d.asDiagonal() * *augmentation_;
    return c;
}

// Stacking the centering step with the score and solving for the theta block
// of the joint influence function gives, per weighted row l,
//   treatment mean:  (Z_i - p^) (f_il d_i - mean_j f_jl d_j)
//   column OLS:      At_il (d_i - fitted d_i on (1, X))
// where d_i is the residual the weights multiply.
MatrixXd ScoreSystem::influence_contributions(const VectorXd& params) const {
    MatrixXd c = score_contributions(params);
    if (centering_.kind == CenteringStep::Kind::Fixed) return c;
    const auto r = residual(params);
    const VectorXd d = augmentation_ ? VectorXd(r.tilted - r.working) : r.tilted;
    if (centering_.kind == CenteringStep::Kind::TreatmentMean) {
        const MatrixXd fd = d.asDiagonal() * centering_.factors;
        const Eigen::RowVectorXd mean_fd = fd.colwise().mean();
        c.leftCols(num_weights()) =
            centering_.treatment_deviation.asDiagonal() * (fd.rowwise() - mean_fd);
    } else {
        const VectorXd dr = residualize(d, centering_.design);
        c.leftCols(num_weights()) = dr.asDiagonal() * weights_;
    }
    return c;
}

MatrixXd ScoreSystem::jacobian(const VectorXd& params) const {
    const auto r = residual(params);
    // dd_i/dtheta = -tilted_i H_i, dd_i/dbeta = -working_i X_a,i
    MatrixXd dd(n(), num_params());
    dd.leftCols(num_basis()) = -(r.tilted.asDiagonal() * basis_);
    if (augmentation_) dd.rightCols(num_working()) = -(r.working.asDiagonal() * *augmentation_);
    MatrixXd jac(num_equations(), num_params());
    jac.topRows(num_weights()) = weights_.transpose() * dd;
    if (augmentation_) jac.bottomRows(num_working()) = augmentation_->transpose() * dd;
    return jac;
}

double ScoreSystem::objective(const VectorXd& params) const {
    return (score(params) / static_cast<double>(n())).squaredNorm();
}

ScoreSystem build_score_system(const EffectSpec& spec, const Dataset& data,
                               const Centering& centering) {
    spec.validate(data.p());
    MatrixXd h = build_basis_matrix(spec, data);
    MatrixXd a = center_weights(build_weight_matrix(spec, data), spec, data, centering);
    std::optional<MatrixXd> aug;
    if (spec.augmentation) aug = augmentation_design(*spec.augmentation, data);

    CenteringStep step;
    if (centering.kind == Centering::Kind::EmpiricalMean) {
        step.kind = CenteringStep::Kind::TreatmentMean;
        step.treatment_deviation = data.treatment().array() - data.treatment().mean();
        step.factors.resize(static_cast<Eigen::Index>(data.n()), a.cols());
        for (Eigen::Index i = 0; i < step.factors.rows(); ++i)
            for (std::size_t l = 0; l < spec.weights.size(); ++l)
                step.factors(i, static_cast<Eigen::Index>(l)) =
                    spec.weights[l].covariate_factor(data.covariates().row(i));
    } else if (centering.kind == Centering::Kind::PerColumnOls) {
        step.kind = CenteringStep::Kind::ColumnOls;
        step.design = with_intercept(data.covariates());
    }
    return ScoreSystem(std::move(h), std::move(a), data.outcome(), std::move(aug),
                       std::move(step));
}

VectorXd score(const VectorXd& theta, const ScoreSystem& system) { return system.score(theta); }

MatrixXd score_jacobian(const VectorXd& theta, const ScoreSystem& system) {
    return system.jacobian(theta);
}

// ---------------------------------------------------------------------------
// Identification

IdentificationDiagnostics identification_check(const EffectSpec& spec, const Dataset& data,
                                               const Centering& centering,
                                               const IdentificationThresholds& thresholds) {
    IdentificationDiagnostics diag;
    const double n = static_cast<double>(data.n());
    const MatrixXd h = build_basis_matrix(spec, data);
    const MatrixXd xdesign = with_intercept(data.covariates());

    MatrixXd h_resid;
    try {
        h_resid = residualize(h, xdesign);
    } catch (const Error&) {
        diag.weak = true;
        diag.reason = "covariate design is rank deficient";
        return diag;
    }
    const MatrixXd cov_h = h_resid.transpose() * h_resid / n;
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(cov_h);
    diag.min_eigenvalue = eig.eigenvalues().minCoeff();
    diag.mean_diagonal = cov_h.diagonal().mean();

    MatrixXd a_centered;
    try {
        a_centered = center_weights(build_weight_matrix(spec, data), spec, data, centering);
    } catch (const Error& e) {
        diag.weak = true;
        diag.reason = e.what();
        return diag;
    }
    const MatrixXd jac0 = -(a_centered.transpose() * data.outcome().asDiagonal() * h) / n;
    diag.jacobian_condition = condition_number(jac0);

    // Smallest canonical correlation between the basis and the weights, both
    // net of (1, X): how well the weights move every basis direction.
    const MatrixXd q_h = column_space(h_resid);
    const MatrixXd q_a = column_space(residualize(a_centered, xdesign));
    if (q_h.cols() < h.cols() || q_a.cols() == 0) {
        diag.min_canonical_correlation = 0.0;
    } else {
        Eigen::JacobiSVD<MatrixXd> svd(q_h.transpose() * q_a);
        const auto& s = svd.singularValues();
        diag.min_canonical_correlation =
            std::min(1.0, s.size() >= h.cols() ? s[h.cols() - 1] : 0.0);
    }
    const double rho2 = diag.min_canonical_correlation * diag.min_canonical_correlation;
    diag.first_stage_statistic = rho2 >= 1.0 - 1e-14 ? kInf : n * rho2 / (1.0 - rho2);

    std::vector<std::string> reasons;
    if (!(diag.min_eigenvalue >= thresholds.relative_eigenvalue * diag.mean_diagonal) ||
        !(diag.mean_diagonal > 0.0))
        reasons.emplace_back("E[Cov(H|X)] is not positive definite");
    if (!(diag.jacobian_condition <= thresholds.max_condition))
        reasons.emplace_back("score Jacobian at theta=0 is ill-conditioned");
    if (!(diag.first_stage_statistic >= thresholds.min_first_stage))
        reasons.emplace_back("weights barely move some basis direction beyond X");
    diag.weak = !reasons.empty();
    for (std::size_t i = 0; i < reasons.size(); ++i)
        diag.reason += (i ? "; " : "") + reasons[i];
    return diag;
}

// ---------------------------------------------------------------------------
// Solver

const char* to_string(VarianceMethod method) {
    switch (method) {
        case VarianceMethod::Sandwich: return "sandwich";
        case VarianceMethod::Bootstrap: return "bootstrap";
        case VarianceMethod::None: return "none";
    }
    return "unknown";
}

VectorXd EstimationResult::params() const {
    if (!beta) return theta;
    VectorXd p(theta.size() + beta->size());
    p << theta, *beta;
    return p;
}

SystemSolution solve_system(const ScoreSystem& system, const VectorXd& start,
                            const SolveOptions& options) {
    if (system.num_equations() == system.num_params()) return newton(system, start, options);
    return levenberg_marquardt(system, start, options);
}

void attach_wald_intervals(EstimationResult& result, const MatrixXd& covariance, double level,
                           VarianceMethod method) {
    const VectorXd params = result.params();
    const double z = wald_critical_value(level);
    result.covariance = covariance;
    result.std_errors = covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
    result.ci_lower = params - z * result.std_errors;
    result.ci_upper = params + z * result.std_errors;
    result.level = level;
    result.variance_method = method;
}

EstimationResult solve(const EffectSpec& spec, const Dataset& data, const SolveOptions& options) {
    data.require_binary_treatment();
    const ScoreSystem system = build_score_system(spec, data, options.centering);
    const auto k = system.num_basis();

    EstimationResult result;
    result.n = data.n();
    result.labels = parameter_labels(spec, data);
    if (options.check_identification)
        result.identification =
            identification_check(spec, data, options.centering, options.thresholds);

    std::vector<std::pair<std::string, VectorXd>> starts;
    starts.emplace_back("zero", full_start(system, VectorXd::Zero(k)));
    if (options.poisson_start) {
        try {
            MatrixXd design(system.n(), 1 + k + static_cast<Eigen::Index>(data.p()));
            design << VectorXd::Ones(system.n()), system.basis(), data.covariates();
            const GlmFit fit = fit_poisson_irls(design, data.outcome());
            starts.emplace_back("poisson", full_start(system, fit.coefficients.segment(1, k)));
        } catch (const Error&) {
            // Basis collinear with X or separated data: rely on the zero start.
        }
    }

    std::optional<SystemSolution> best;
    std::string best_start;
    int total_iterations = 0;
    for (const auto& [name, start] : starts) {
        SystemSolution sol = solve_system(system, start, options);
        total_iterations += sol.iterations;
        if (sol.converged && (!best || sol.objective < best->objective)) {
            best = std::move(sol);
            best_start = name;
        }
    }
    if (!best)
        throw Error(ErrorCode::NoConvergence, "solver failed from every start (" +
                                                  std::to_string(starts.size()) + " tried)");

    result.theta = best->params.head(k);
    if (system.augmented()) result.beta = best->params.tail(system.num_working());
    result.gmm_objective = best->objective;
    result.iterations = total_iterations;
    result.converged = true;
    result.start = best_start;
    result.level = options.level;

    if (options.compute_variance) {
        const SandwichParts parts = sandwich_variance(system, best->params);
        attach_wald_intervals(result, parts.covariance, options.level, VarianceMethod::Sandwich);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Effects

std::vector<Contrast> default_contrasts() {
    return {Contrast{"Direct Effect", 1.0, 0.0, 0.0, 0.0, {}},
            Contrast{"Mediator Effect", 0.0, 1.0, 0.0, 0.0, {}}};
}

std::vector<EffectRow> controlled_effects(const EstimationResult& result, const EffectSpec& spec,
                                          const std::vector<Contrast>& contrasts,
                                          std::size_t num_covariates) {
    const auto k = static_cast<Eigen::Index>(spec.basis.size());
    if (result.theta.size() != k)
        throw Error(ErrorCode::InvalidArgument, "result does not match the effect spec");
    const bool moves_z = std::any_of(spec.basis.begin(), spec.basis.end(),
                                     [](const BasisTerm& t) { return t.depends_on_treatment(); });
    const bool moves_m = std::any_of(spec.basis.begin(), spec.basis.end(),
                                     [](const BasisTerm& t) { return t.depends_on_mediator(); });
    const bool has_cov = result.covariance.rows() >= k;
    const double zcrit = wald_critical_value(result.level);

    std::vector<EffectRow> rows;
    for (const auto& c : contrasts) {
        Eigen::RowVectorXd x = c.x.size() == 0
                                   ? Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(num_covariates))
                                   : c.x;
        if (static_cast<std::size_t>(x.size()) != num_covariates)
            throw Error(ErrorCode::ContrastOutsideSpan,
                        "contrast '" + c.label + "' has the wrong covariate length");
        if ((c.z != c.z_ref && !moves_z) || (c.m != c.m_ref && !moves_m))
            throw Error(ErrorCode::ContrastOutsideSpan,
                        "contrast '" + c.label + "' varies an input no basis term depends on");
        const VectorXd d = evaluate_basis(spec, c.z, c.m, x) - evaluate_basis(spec, c.z_ref, c.m_ref, x);
        EffectRow row;
        row.label = c.label;
        row.log_effect = result.theta.dot(d);
        row.rate_ratio = std::exp(row.log_effect);
        if (has_cov) {
            const double var = d.dot(result.covariance.topLeftCorner(k, k) * d);
            row.std_error = std::sqrt(std::max(var, 0.0));
            row.rr_lower = std::exp(row.log_effect - zcrit * row.std_error);
            row.rr_upper = std::exp(row.log_effect + zcrit * row.std_error);
        } else {
            row.std_error = row.rr_lower = row.rr_upper = std::numeric_limits<double>::quiet_NaN();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace msmm
