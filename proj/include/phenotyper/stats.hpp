#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>

#include "phenotyper/common.hpp"

namespace phenotyper {

// ---------------------------------------------------------------------------
// Regularized incomplete gamma functions.
//
// Q(a, x) = Gamma(a, x) / Gamma(a) is evaluated in log space so that
// chi-square tail probabilities survive far below the double underflow
// threshold. Series for x < a + 1, Lentz continued fraction otherwise.
// ---------------------------------------------------------------------------

namespace detail {

/// log of the lower regularized gamma P(a, x), series expansion (x < a+1).
inline double log_gamma_p_series(double a, double x) {
    double ap = a;
    double sum = 1.0 / a;
    double del = sum;
    for (int n = 0; n < 500; ++n) {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if (std::abs(del) < std::abs(sum) * 1e-17) break;
    }
    return std::log(sum) + a * std::log(x) - x - std::lgamma(a);
}

/// log of the upper regularized gamma Q(a, x), continued fraction (x >= a+1).
inline double log_gamma_q_cf(double a, double x) {
    constexpr double tiny = 1e-300;
    double b = x + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i <= 500; ++i) {
        const double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::abs(delta - 1.0) < 1e-16) break;
    }
    return std::log(h) + a * std::log(x) - x - std::lgamma(a);
}

}  // namespace detail

/// Natural log of Q(a, x) = upper regularized incomplete gamma.
inline double log_gamma_q(double a, double x) {
    if (a <= 0.0 || x < 0.0) throw Error("log_gamma_q: requires a > 0, x >= 0");
    if (x == 0.0) return 0.0;  // Q = 1
    if (x < a + 1.0) {
        const double logp = detail::log_gamma_p_series(a, x);
        const double p = std::exp(logp);
        if (p >= 1.0) return -std::numeric_limits<double>::infinity();
        return std::log1p(-p);
    }
    return detail::log_gamma_q_cf(a, x);
}

inline double gamma_q(double a, double x) { return std::exp(log_gamma_q(a, x)); }

/// Upper tail of the chi-square distribution, returned as natural log.
inline double chi2_log_sf(double x, int df) {
    if (df < 1) throw Error("chi2_log_sf: df must be >= 1");
    if (x <= 0.0) return 0.0;
    return log_gamma_q(0.5 * df, 0.5 * x);
}

inline double chi2_sf(double x, int df) { return std::exp(chi2_log_sf(x, df)); }

/// Two-sided normal tail p-value for a z statistic.
inline double normal_two_sided_p(double z) {
    return std::erfc(std::abs(z) / 1.4142135623730950488016887242097);
}

// ---------------------------------------------------------------------------
// Sample moments (population variance: the standardized-bias convention).
// ---------------------------------------------------------------------------

inline double mean(std::span<const double> xs) {
    if (xs.empty()) throw Error("mean of empty sample");
    double s = 0.0;
    for (double v : xs) s += v;
    return s / static_cast<double>(xs.size());
}

inline double population_variance(std::span<const double> xs) {
    const double m = mean(xs);
    double s = 0.0;
    for (double v : xs) s += (v - m) * (v - m);
    return s / static_cast<double>(xs.size());
}

}  // namespace phenotyper
