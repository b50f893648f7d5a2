#pragma once

// Special functions used by the distribution and uncertainty code: log-gamma,
// digamma, the regularized incomplete beta function and the Student-t tail.

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "bam/error.hpp"

namespace bam {

inline constexpr double kEulerGamma = 0.57721566490153286061;

namespace detail {

inline constexpr int kLanczosG = 7;
inline constexpr std::array<double, 9> kLanczosCoeffs = {
    0.99999999999980993,     676.5203681218851,     -1259.1392167224028,
    771.32342877765313,      -176.61502916214059,   12.507343278686905,
    -0.13857109526572012,    9.9843695780195716e-6, 1.5056327351493116e-7};

// Lanczos series for x >= 0.5, minus log(divisor).
inline double lgamma_lanczos(double x, double divisor = 1.0)
{
    x -= 1.0;
    double a = kLanczosCoeffs[0];
    for (std::size_t i = 1; i < kLanczosCoeffs.size(); ++i) {
        a += kLanczosCoeffs[i] / (x + static_cast<double>(i));
    }
    const double t = x + kLanczosG + 0.5;
    return 0.5 * std::log(2.0 * std::numbers::pi) + (x + 0.5) * std::log(t) - t + std::log(a / divisor);
}

}  // namespace detail

/// log Γ(x) for x > 0 (Lanczos, g = 7, n = 9).
inline double lgamma(double x)
{
    if (!(x > 0.0)) {
        throw DomainError("lgamma: argument must be positive, got " + std::to_string(x));
    }
    if (std::isinf(x)) {
        return x;
    }
    // Γ(x) = Γ(x + 1) / x keeps small arguments off the Lanczos pole structure.
    if (x < 0.5) {
        return x > 1e-300 ? detail::lgamma_lanczos(x + 1.0, x) : detail::lgamma_lanczos(x + 1.0) - std::log(x);
    }
    return detail::lgamma_lanczos(x);
}

/// ψ(x) = d/dx log Γ(x) for x > 0.
inline double digamma(double x)
{
    if (!(x > 0.0)) {
        throw DomainError("digamma: argument must be positive, got " + std::to_string(x));
    }
    // sum of 1/x over the recurrence steps as one fraction num/den
    double num = 0.0, den = 1.0;
    while (x < 6.0) {
        num = num * x + den;
        den *= x;
        x += 1.0;
    }
    const double acc = -num / den;
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    // Asymptotic expansion in Bernoulli numbers.
    const double series =
        inv2 * (1.0 / 12.0 -
                inv2 * (1.0 / 120.0 -
                        inv2 * (1.0 / 252.0 -
                                inv2 * (1.0 / 240.0 -
                                        inv2 * (5.0 / 660.0 -
                                                inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    return acc + std::log(x) - 0.5 * inv - series;
}

/// Regularized incomplete beta function I_x(a, b).
inline double incomplete_beta(double a, double b, double x)
{
    if (!(a > 0.0) || !(b > 0.0)) {
        throw DomainError("incomplete_beta: shape parameters must be positive");
    }
    if (x < 0.0 || x > 1.0 || std::isnan(x)) {
        throw DomainError("incomplete_beta: x must lie in [0, 1]");
    }
    if (x == 0.0) {
        return 0.0;
    }
    if (x == 1.0) {
        return 1.0;
    }

    // Continued fraction (modified Lentz); converges fast for x < (a + 1) / (a + b + 2).
    const auto continued_fraction = [](double a, double b, double x) {
        constexpr double tiny = 1e-300;
        constexpr double eps = 1e-16;
        const double qab = a + b;
        const double qap = a + 1.0;
        const double qam = a - 1.0;
        double c = 1.0;
        double d = 1.0 - qab * x / qap;
        if (std::fabs(d) < tiny) d = tiny;
        d = 1.0 / d;
        double h = d;
        for (int m = 1; m <= 1000; ++m) {
            const double m2 = 2.0 * m;
            double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
            d = 1.0 + aa * d;
            if (std::fabs(d) < tiny) d = tiny;
            c = 1.0 + aa / c;
            if (std::fabs(c) < tiny) c = tiny;
            d = 1.0 / d;
            h *= d * c;
            aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
            d = 1.0 + aa * d;
            if (std::fabs(d) < tiny) d = tiny;
            c = 1.0 + aa / c;
            if (std::fabs(c) < tiny) c = tiny;
            d = 1.0 / d;
            const double del = d * c;
            h *= del;
            if (std::fabs(del - 1.0) < eps) break;
        }
        return h;
    };

    const double log_front = lgamma(a + b) - lgamma(a) - lgamma(b) + a * std::log(x) +
                             b * std::log1p(-x);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return std::exp(log_front) * continued_fraction(a, b, x) / a;
    }
    return 1.0 - std::exp(log_front) * continued_fraction(b, a, 1.0 - x) / b;
}

/// Two-sided tail probability P(|T| >= |t|) of a Student-t variable with `df` degrees of freedom.
inline double student_t_two_sided_p(double t, double df)
{
    if (!(df > 0.0)) {
        throw DomainError("student_t_two_sided_p: degrees of freedom must be positive");
    }
    if (std::isinf(t)) {
        return 0.0;
    }
    return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

inline double sigmoid(double x)
{
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace bam
