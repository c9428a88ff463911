#include "msmm/glm.hpp"

#include <algorithm>
#include <cmath>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include "msmm/errors.hpp"

namespace msmm {

const char* to_string(GlmFamily family) {
    switch (family) {
        case GlmFamily::Poisson: return "poisson";
        case GlmFamily::QuasiPoisson: return "quasipoisson";
        case GlmFamily::NegBin: return "negbin";
    }
    return "unknown";
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kMaxEta = 700.0;

void check_design(const MatrixXd& design, const VectorXd& outcome) {
    if (design.rows() != outcome.size())
        throw Error(ErrorCode::InvalidArgument, "design and outcome lengths differ");
    if (design.rows() <= design.cols())
        throw Error(ErrorCode::InvalidArgument,
                    "need more observations than coefficients (n=" + std::to_string(design.rows()) +
                        ", K=" + std::to_string(design.cols()) + ")");
    Eigen::ColPivHouseholderQR<MatrixXd> qr(design);
    if (qr.rank() < design.cols())
        throw Error(ErrorCode::RankDeficientDesign,
                    "design has rank " + std::to_string(qr.rank()) + " < " +
                        std::to_string(design.cols()) + " columns");
}

VectorXd start_values(const MatrixXd& design, const VectorXd& outcome) {
    VectorXd beta = VectorXd::Zero(design.cols());
    for (Eigen::Index j = 0; j < design.cols(); ++j) {
        if ((design.col(j).array() == 1.0).all()) {
            beta[j] = std::log(outcome.mean() + 0.5);
            break;
        }
    }
    return beta;
}

// Negative log-likelihood in beta, dropping terms constant in beta. size = inf
// is the Poisson case.
double objective(const VectorXd& outcome, const VectorXd& eta, const VectorXd& mu, double size) {
    if (std::isinf(size)) return (mu.array() - outcome.array() * eta.array()).sum();
    return ((size + outcome.array()) * (size + mu.array()).log() - outcome.array() * eta.array())
        .sum();
}

VectorXd working_weights(const VectorXd& mu, double size) {
    if (std::isinf(size)) return mu;
    return (mu.array() / (1.0 + mu.array() / size)).matrix();
}

struct IrlsState {
    VectorXd beta;
    VectorXd mu;
    MatrixXd information;
    bool converged = false;
    int iterations = 0;
};

IrlsState irls(const MatrixXd& x, const VectorXd& y, double size, VectorXd beta,
               const IrlsOptions& opt) {
    VectorXd eta = x * beta;
    if ((eta.array().abs() > kMaxEta).any())
        throw Error(ErrorCode::SeparationSuspected, "starting linear predictor overflows");
    VectorXd mu = eta.array().exp();
    double obj = objective(y, eta, mu, size);

    IrlsState state;
    for (int iter = 1; iter <= opt.max_iter; ++iter) {
        state.iterations = iter;
        const VectorXd w = working_weights(mu, size);
        const VectorXd score = x.transpose() * ((y - mu).array() * w.array() / mu.array()).matrix();
        if (score.cwiseAbs().maxCoeff() < opt.score_tol) {
            state.converged = true;
            break;
        }
        const MatrixXd info = x.transpose() * w.asDiagonal() * x;
        const VectorXd delta = info.ldlt().solve(score);

        bool accepted = false, overflowed = false;
        double step = 1.0;
        VectorXd beta_new, eta_new, mu_new;
        double obj_new = obj;
        for (int h = 0; h <= opt.max_halvings; ++h, step *= 0.5) {
            beta_new = beta + step * delta;
            eta_new = x * beta_new;
            if ((eta_new.array().abs() > kMaxEta).any()) {
                overflowed = true;
                continue;
            }
            mu_new = eta_new.array().exp();
            obj_new = objective(y, eta_new, mu_new, size);
            if (std::isfinite(obj_new) && obj_new <= obj + 1e-12 * (std::abs(obj) + 1.0)) {
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            if (overflowed)
                throw Error(ErrorCode::SeparationSuspected,
                            "fitted rates overflow; data may be separated");
            // No descent direction left: the iterate is at the numerical optimum.
            state.converged = true;
            break;
        }
        const double change = std::abs(obj - obj_new) / (std::abs(obj_new) + 0.1);
        beta = std::move(beta_new);
        eta = std::move(eta_new);
        mu = std::move(mu_new);
        obj = obj_new;
        if (change < opt.deviance_rel_tol) {
            state.converged = true;
            break;
        }
    }
    if (!state.converged)
        throw Error(ErrorCode::NoConvergence,
                    "IRLS did not converge in " + std::to_string(opt.max_iter) + " iterations");
    state.beta = std::move(beta);
    state.mu = std::move(mu);
    state.information = x.transpose() * working_weights(state.mu, size).asDiagonal() * x;
    return state;
}

double poisson_deviance(const VectorXd& y, const VectorXd& mu) {
    double dev = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double term = y[i] > 0 ? y[i] * std::log(y[i] / mu[i]) : 0.0;
        dev += 2.0 * (term - (y[i] - mu[i]));
    }
    return dev;
}

double negbin_deviance(const VectorXd& y, const VectorXd& mu, double size) {
    double dev = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double term = y[i] > 0 ? y[i] * std::log(y[i] / mu[i]) : 0.0;
        dev += 2.0 * (term - (y[i] + size) * std::log((y[i] + size) / (mu[i] + size)));
    }
    return dev;
}

MatrixXd invert_information(const MatrixXd& info) {
    Eigen::LDLT<MatrixXd> ldlt(info);
    MatrixXd cov = ldlt.solve(MatrixXd::Identity(info.rows(), info.cols()));
    return 0.5 * (cov + cov.transpose());
}

// Profile log-likelihood in log(size) for fixed means, up to a constant.
double size_profile(const VectorXd& y, const VectorXd& mu, double size) {
    double ll = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i)
        ll += std::lgamma(y[i] + size) - std::lgamma(size) + size * std::log(size) -
              (size + y[i]) * std::log(size + mu[i]);
    return ll;
}

struct SizeStep {
    double size;
    bool converged;
};

// Maximizes the profile over t = log(size) by safeguarded Newton.
SizeStep maximize_size(const VectorXd& y, const VectorXd& mu, double size, double collapse) {
    using boost::math::digamma;
    using boost::math::trigamma;
    double t = std::log(size);
    double ll = size_profile(y, mu, size);
    for (int iter = 0; iter < 100; ++iter) {
        const double r = std::exp(t);
        double g = 0.0, h = 0.0;
        for (Eigen::Index i = 0; i < y.size(); ++i) {
            const double rm = r + mu[i];
            g += digamma(y[i] + r) - digamma(r) + std::log(r) + 1.0 - std::log(rm) -
                 (r + y[i]) / rm;
            h += trigamma(y[i] + r) - trigamma(r) + 1.0 / r - 2.0 / rm + (r + y[i]) / (rm * rm);
        }
        const double grad = r * g;
        const double curv = r * r * h + grad;
        double dt = curv < 0 ? -grad / curv : (grad > 0 ? 1.0 : -1.0);
        dt = std::clamp(dt, -2.0, 2.0);

        double t_new = t, ll_new = ll;
        bool moved = false;
        for (int k = 0; k < 30; ++k, dt *= 0.5) {
            t_new = t + dt;
            if (std::exp(t_new) > collapse) return {kInf, true};
            ll_new = size_profile(y, mu, std::exp(t_new));
            if (std::isfinite(ll_new) && ll_new >= ll) {
                moved = true;
                break;
            }
        }
        if (!moved) return {std::exp(t), true};
        const double step = t_new - t;
        t = t_new;
        ll = ll_new;
        if (std::abs(step) < 1e-10) return {std::exp(t), true};
    }
    return {std::exp(t), false};
}

}  // namespace

GlmFit fit_poisson_irls(const MatrixXd& design, const VectorXd& outcome,
                        const IrlsOptions& options) {
    check_design(design, outcome);
    auto state = irls(design, outcome, kInf, start_values(design, outcome), options);
    GlmFit fit;
    fit.family = GlmFamily::Poisson;
    fit.coefficients = std::move(state.beta);
    fit.covariance = invert_information(state.information);
    fit.fitted = std::move(state.mu);
    fit.dispersion = 1.0;
    fit.deviance = poisson_deviance(outcome, fit.fitted);
    fit.log_likelihood = poisson_log_likelihood(outcome, fit.fitted);
    fit.converged = state.converged;
    fit.iterations = state.iterations;
    return fit;
}

GlmFit fit_quasipoisson(const MatrixXd& design, const VectorXd& outcome,
                        const IrlsOptions& options) {
    GlmFit fit = fit_poisson_irls(design, outcome, options);
    const double pearson =
        ((outcome - fit.fitted).array().square() / fit.fitted.array()).sum();
    fit.family = GlmFamily::QuasiPoisson;
    fit.dispersion = pearson / static_cast<double>(design.rows() - design.cols());
    fit.covariance *= fit.dispersion;
    return fit;
}

GlmFit fit_negbin(const MatrixXd& design, const VectorXd& outcome, const NegBinOptions& options) {
    check_design(design, outcome);
    GlmFit poisson = fit_poisson_irls(design, outcome, options.irls);

    auto collapse = [&](int iterations) {
        GlmFit fit = poisson;
        fit.family = GlmFamily::NegBin;
        fit.nb_size = kInf;
        fit.iterations = iterations;
        return fit;
    };

    const double excess =
        ((outcome - poisson.fitted).array().square() - poisson.fitted.array()).sum();
    // The score in 1/size at the Poisson boundary is half this excess, so
    // without excess variance the likelihood peaks at the boundary.
    if (!(excess > 0)) return collapse(poisson.iterations);
    double size = std::clamp(poisson.fitted.squaredNorm() / excess, 1e-3, 1e6);

    VectorXd beta = poisson.coefficients;
    IrlsState state;
    int total = 0;
    bool converged = false;
    for (int outer = 1; outer <= options.max_outer; ++outer) {
        state = irls(design, outcome, size, beta, options.irls);
        total += state.iterations;
        beta = state.beta;
        const auto next = maximize_size(outcome, state.mu, size, options.collapse_size);
        if (std::isinf(next.size)) return collapse(total);
        const double rel = std::abs(next.size - size) / size;
        size = next.size;
        if (state.converged && next.converged && rel < options.size_rel_tol) {
            converged = true;
            break;
        }
    }
    if (!converged)
        throw Error(ErrorCode::NoConvergence, "negative binomial alternation did not converge");

    state = irls(design, outcome, size, beta, options.irls);
    GlmFit fit;
    fit.family = GlmFamily::NegBin;
    fit.coefficients = state.beta;
    fit.covariance = invert_information(state.information);
    fit.fitted = state.mu;
    fit.dispersion = 1.0;
    fit.nb_size = size;
    fit.deviance = negbin_deviance(outcome, fit.fitted, size);
    fit.log_likelihood = negbin_log_likelihood(outcome, fit.fitted, size);
    fit.converged = true;
    fit.iterations = total + state.iterations;
    return fit;
}

double poisson_log_likelihood(const VectorXd& outcome, const VectorXd& mu) {
    double ll = 0.0;
    for (Eigen::Index i = 0; i < outcome.size(); ++i)
        ll += outcome[i] * std::log(mu[i]) - mu[i] - std::lgamma(outcome[i] + 1.0);
    return ll;
}

double negbin_log_likelihood(const VectorXd& outcome, const VectorXd& mu, double size) {
    if (std::isinf(size)) return poisson_log_likelihood(outcome, mu);
    double ll = 0.0;
    for (Eigen::Index i = 0; i < outcome.size(); ++i) {
        const double y = outcome[i];
        ll += std::lgamma(y + size) - std::lgamma(size) - std::lgamma(y + 1.0) +
              size * std::log(size / (size + mu[i])) + y * std::log(mu[i] / (size + mu[i]));
    }
    return ll;
}

OlsFit fit_ols(const MatrixXd& design, const VectorXd& response) {
    if (design.rows() != response.size())
        throw Error(ErrorCode::InvalidArgument, "design and response lengths differ");
    Eigen::ColPivHouseholderQR<MatrixXd> qr(design);
    if (qr.rank() < design.cols())
        throw Error(ErrorCode::RankDeficientDesign,
                    "design has rank " + std::to_string(qr.rank()) + " < " +
                        std::to_string(design.cols()) + " columns");
    OlsFit fit;
    fit.coefficients = qr.solve(response);
    fit.residuals = response - design * fit.coefficients;
    const auto df = design.rows() - design.cols();
    fit.residual_variance = df > 0 ? fit.residuals.squaredNorm() / static_cast<double>(df)
                                   : std::numeric_limits<double>::quiet_NaN();
    return fit;
}

MatrixXd residualize(const MatrixXd& columns, const MatrixXd& design) {
    Eigen::ColPivHouseholderQR<MatrixXd> qr(design);
    if (qr.rank() < design.cols())
        throw Error(ErrorCode::RankDeficientDesign, "covariate design is rank deficient");
    return columns - design * qr.solve(columns);
}

MatrixXd with_intercept(const MatrixXd& covariates) {
    MatrixXd design(covariates.rows(), covariates.cols() + 1);
    design.col(0).setOnes();
    design.rightCols(covariates.cols()) = covariates;
    return design;
}

}  // namespace msmm
