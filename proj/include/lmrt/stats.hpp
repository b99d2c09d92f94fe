#pragma once

#include <cstddef>
#include <span>

namespace lmrt::stats {

// Regularized lower incomplete gamma P(a, x); series for x < a+1,
// continued fraction otherwise.
double gamma_p(double a, double x);

// Upper tail Q(a, x) = 1 - P(a, x).
double gamma_q(double a, double x);

// P(Chi2_df > x) = Q(df/2, x/2).
double chi_square_upper_tail(double x, int df);

double mean(std::span<const double> x);

// Sample (n-1) standard deviation.
double sample_sd(std::span<const double> x);

}  // namespace lmrt::stats
