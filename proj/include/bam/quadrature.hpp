#pragma once

// Numerical KL references. Densities are written out from their textbook
// definitions and integrated with adaptive Gauss-Kronrod; nothing here calls
// the closed-form KL code it is used to check.

#include <cmath>
#include <numbers>
#include <utility>

#include <boost/math/quadrature/gauss_kronrod.hpp>

namespace bam::quadrature {

inline double weibull_pdf_ref(double k, double lambda, double s)
{
    return k / std::pow(lambda, k) * std::pow(s, k - 1.0) * std::exp(-std::pow(s / lambda, k));
}

inline double gamma_log_pdf_ref(double alpha, double beta, double s)
{
    return alpha * std::log(beta) - std::lgamma(alpha) + (alpha - 1.0) * std::log(s) - beta * s;
}

inline double lognormal_log_pdf_ref(double mu, double sigma, double s)
{
    const double z = (std::log(s) - mu) / sigma;
    return -std::log(s * sigma * std::sqrt(2.0 * std::numbers::pi)) - 0.5 * z * z;
}

/// Adaptive Gauss-Kronrod over t = log s in [lo, hi], split into `pieces`.
template <class F>
double integrate_log_space(F integrand_in_s, double lo, double hi, int pieces = 16)
{
    using GK = boost::math::quadrature::gauss_kronrod<double, 61>;
    double total = 0.0;
    const double width = (hi - lo) / pieces;
    for (int p = 0; p < pieces; ++p) {
        const double a = lo + p * width;
        double err = 0.0;
        total += GK::integrate(
            [&](double t) {
                const double s = std::exp(t);
                return integrand_in_s(s) * s;
            },
            a, a + width, 8, 1e-13, &err);
    }
    return total;
}

/// t-range carrying all but ~1e-25 of a Weibull(k, lambda) law.
inline std::pair<double, double> weibull_log_range(double k, double lambda)
{
    return {std::log(lambda) + std::log(1e-25) / k, std::log(lambda) + std::log(90.0) / k};
}

inline double kl_weibull_gamma_quadrature(double k, double lambda, double alpha, double beta)
{
    const auto [lo, hi] = weibull_log_range(k, lambda);
    return integrate_log_space(
        [&](double s) {
            const double q = weibull_pdf_ref(k, lambda, s);
            if (q == 0.0) return 0.0;
            return q * (std::log(q) - gamma_log_pdf_ref(alpha, beta, s));
        },
        lo, hi);
}

inline double kl_lognormal_quadrature(double mu1, double sigma1, double mu2, double sigma2)
{
    return integrate_log_space(
        [&](double s) {
            const double lq = lognormal_log_pdf_ref(mu1, sigma1, s);
            return std::exp(lq) * (lq - lognormal_log_pdf_ref(mu2, sigma2, s));
        },
        mu1 - 40.0 * sigma1, mu1 + 40.0 * sigma1);
}

}  // namespace bam::quadrature
