#pragma once

#include <span>
#include <vector>

namespace msmm {

double normal_cdf(double x);

/// Inverse standard normal CDF, absolute error below 1e-12 on (0, 1).
double normal_quantile(double p);

/// Two-sided critical value z_{(1+level)/2}.
double wald_critical_value(double level);

/// Sample quantile with linear interpolation between order statistics (R
/// type 7). `sorted` must be ascending and non-empty.
double quantile_type7(std::span<const double> sorted, double prob);

double mean(std::span<const double> values);
/// Sample standard deviation (n - 1 denominator); NaN for fewer than two values.
double sample_sd(std::span<const double> values);

}  // namespace msmm
