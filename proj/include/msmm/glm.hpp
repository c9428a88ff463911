#pragma once

#include <limits>
#include <string>

#include <Eigen/Dense>

namespace msmm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class GlmFamily { Poisson, QuasiPoisson, NegBin };

const char* to_string(GlmFamily family);

struct GlmFit {
    VectorXd coefficients;  // log-rate-ratio scale
    MatrixXd covariance;
    VectorXd fitted;        // mu_i
    GlmFamily family = GlmFamily::Poisson;
    double dispersion = 1.0;
    // Var(Y) = mu + mu^2 / nb_size. +inf when the fit collapsed to Poisson;
    // NaN for the Poisson families.
    double nb_size = std::numeric_limits<double>::quiet_NaN();
    double deviance = 0.0;
    double log_likelihood = 0.0;
    bool converged = false;
    int iterations = 0;

    VectorXd std_errors() const { return covariance.diagonal().cwiseMax(0.0).cwiseSqrt(); }
    bool collapsed_to_poisson() const {
        return family == GlmFamily::NegBin && nb_size == std::numeric_limits<double>::infinity();
    }
};

struct IrlsOptions {
    int max_iter = 100;
    double score_tol = 1e-10;
    double deviance_rel_tol = 1e-12;
    int max_halvings = 10;
};

/// Poisson log-linear regression by IRLS with step-halving. Starts from
/// beta = 0 with the intercept column (if any) at log(mean(y) + 0.5).
GlmFit fit_poisson_irls(const MatrixXd& design, const VectorXd& outcome,
                        const IrlsOptions& options = {});

/// Poisson coefficients with covariance inflated by the Pearson dispersion
/// X^2 / (n - K).
GlmFit fit_quasipoisson(const MatrixXd& design, const VectorXd& outcome,
                        const IrlsOptions& options = {});

struct NegBinOptions {
    IrlsOptions irls;
    int max_outer = 200;
    double size_rel_tol = 1e-8;
    double collapse_size = 1e8;
};

/// Negative binomial (NB2) regression. Alternates IRLS for the coefficients at
/// fixed size with Newton steps on the profile log-likelihood in log(size).
GlmFit fit_negbin(const MatrixXd& design, const VectorXd& outcome,
                  const NegBinOptions& options = {});

/// NB2 log-likelihood of counts y at means mu. size = +inf gives the Poisson
/// log-likelihood.
double negbin_log_likelihood(const VectorXd& outcome, const VectorXd& mu, double size);
double poisson_log_likelihood(const VectorXd& outcome, const VectorXd& mu);

struct OlsFit {
    VectorXd coefficients;
    VectorXd residuals;
    double residual_variance = 0.0;  // RSS / (n - K); NaN when n == K
};

/// Least squares through a column-pivoting QR; rank deficiency is an error.
OlsFit fit_ols(const MatrixXd& design, const VectorXd& response);

/// Residuals of every column of `columns` after least squares on `design`.
MatrixXd residualize(const MatrixXd& columns, const MatrixXd& design);

/// [1, X] design matrix.
MatrixXd with_intercept(const MatrixXd& covariates);

}  // namespace msmm
