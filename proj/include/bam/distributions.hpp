#pragma once

// Reparameterizable Weibull and Lognormal samplers, the Gamma prior, their
// densities and moments, and the closed-form KL divergences
// KL(Weibull || Gamma) and KL(Lognormal || Lognormal).

#include <cmath>
#include <numbers>
#include <string>
#include <variant>

#include "bam/error.hpp"
#include "bam/ops.hpp"
#include "bam/special.hpp"

namespace bam {

enum class Family { weibull, lognormal, gamma };

inline const char* to_string(Family f)
{
    switch (f) {
    case Family::weibull: return "weibull";
    case Family::lognormal: return "lognormal";
    case Family::gamma: return "gamma";
    }
    return "?";
}

/// Weibull(k, lambda): k is a global shape, lambda a per-entry scale.
struct WeibullParams
{
    double k;
    Tensor lambda;
};

struct LognormalParams
{
    Tensor mu;
    double sigma;
};

/// Gamma(alpha, beta) with rate beta.
struct GammaParams
{
    Tensor alpha;
    double beta;
};

inline constexpr double kUniformClamp = 1e-12;

namespace detail {

inline void require_positive(double v, const char* what)
{
    if (!(v > 0.0) || std::isinf(v)) {
        throw DomainError(std::string(what) + " must be positive and finite, got " +
                          std::to_string(v));
    }
}

inline void require_positive(const Tensor& t, const char* what)
{
    for (double v : t.values()) require_positive(v, what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Moments

inline double weibull_mean(double k, double lambda) { return lambda * std::exp(lgamma(1.0 + 1.0 / k)); }

inline double weibull_variance(double k, double lambda)
{
    const double g1 = std::exp(lgamma(1.0 + 1.0 / k));
    const double g2 = std::exp(lgamma(1.0 + 2.0 / k));
    return lambda * lambda * (g2 - g1 * g1);
}

inline double lognormal_mean(double mu, double sigma) { return std::exp(mu + 0.5 * sigma * sigma); }

inline double lognormal_variance(double mu, double sigma)
{
    return std::expm1(sigma * sigma) * std::exp(2.0 * mu + sigma * sigma);
}

// ---------------------------------------------------------------------------
// Samplers

/// Clamps uniform noise into [1e-12, 1 - 1e-12].
inline double clamp_uniform(double eps)
{
    if (std::isnan(eps) || eps < 0.0 || eps > 1.0) {
        throw DomainError("uniform noise outside (0, 1): " + std::to_string(eps));
    }
    return std::clamp(eps, kUniformClamp, 1.0 - kUniformClamp);
}

/// (-log(1 - eps))^(1/k): the Weibull(k, 1) variate for uniform eps.
inline double weibull_unit_draw(double k, double eps)
{
    return std::pow(-std::log1p(-clamp_uniform(eps)), 1.0 / k);
}

/// log of weibull_unit_draw without the power.
inline double weibull_unit_log_draw(double k, double eps)
{
    return std::log(-std::log1p(-clamp_uniform(eps))) / k;
}

inline double weibull_sample(double k, double lambda, double eps)
{
    detail::require_positive(k, "weibull k");
    detail::require_positive(lambda, "weibull lambda");
    return lambda * weibull_unit_draw(k, eps);
}

/// S = lambda * (-log(1 - eps))^(1/k), differentiable in lambda with eps fixed.
inline Tensor weibull_sample(const WeibullParams& params, const Tensor& eps)
{
    detail::require_positive(params.k, "weibull k");
    detail::require_positive(params.lambda, "weibull lambda");
    if (eps.shape() != params.lambda.shape()) {
        throw DimensionError("weibull_sample: noise shape differs from lambda");
    }
    std::vector<double> unit(eps.numel());
    for (std::size_t i = 0; i < unit.size(); ++i) unit[i] = weibull_unit_draw(params.k, eps[i]);
    return mul(params.lambda, Tensor(eps.shape(), std::move(unit)));
}

inline double lognormal_sample(double mu, double sigma, double eps)
{
    detail::require_positive(sigma, "lognormal sigma");
    return std::exp(eps * sigma + mu);
}

/// S = exp(eps * sigma + mu), differentiable in mu with eps fixed.
inline Tensor lognormal_sample(const LognormalParams& params, const Tensor& eps)
{
    detail::require_positive(params.sigma, "lognormal sigma");
    if (eps.shape() != params.mu.shape()) {
        throw DimensionError("lognormal_sample: noise shape differs from mu");
    }
    return exp(add(params.mu, scale(eps, params.sigma)));
}

// ---------------------------------------------------------------------------
// Log densities

inline double weibull_log_pdf(double k, double lambda, double s)
{
    detail::require_positive(k, "weibull k");
    detail::require_positive(lambda, "weibull lambda");
    detail::require_positive(s, "density argument");
    const double z = s / lambda;
    return std::log(k) - std::log(lambda) + (k - 1.0) * std::log(z) - std::pow(z, k);
}

inline double lognormal_log_pdf(double mu, double sigma, double s)
{
    detail::require_positive(sigma, "lognormal sigma");
    detail::require_positive(s, "density argument");
    const double ls = std::log(s);
    const double z = (ls - mu) / sigma;
    return -ls - std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi) - 0.5 * z * z;
}

inline double gamma_log_pdf(double alpha, double beta, double s)
{
    detail::require_positive(alpha, "gamma alpha");
    detail::require_positive(beta, "gamma beta");
    detail::require_positive(s, "density argument");
    return alpha * std::log(beta) - lgamma(alpha) + (alpha - 1.0) * std::log(s) - beta * s;
}

using DistributionParams = std::variant<WeibullParams, LognormalParams, GammaParams>;

inline Family family_of(const DistributionParams& p)
{
    return static_cast<Family>(p.index());
}

/// Elementwise log density; parameter tensors broadcast against s.
inline Tensor log_pdf(const DistributionParams& params, const Tensor& s)
{
    detail::require_positive(s, "density argument");
    const Tensor log_s = log(s);
    return std::visit(
        [&](const auto& p) -> Tensor {
            using P = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<P, WeibullParams>) {
                detail::require_positive(p.k, "weibull k");
                detail::require_positive(p.lambda, "weibull lambda");
                const Tensor log_z = sub(log_s, log(p.lambda));
                return shift(sub(scale(log_z, p.k - 1.0), exp(scale(log_z, p.k))) - log(p.lambda),
                             std::log(p.k));
            } else if constexpr (std::is_same_v<P, LognormalParams>) {
                detail::require_positive(p.sigma, "lognormal sigma");
                const Tensor z = scale(sub(log_s, p.mu), 1.0 / p.sigma);
                return shift(-(log_s + scale(square(z), 0.5)),
                             -std::log(p.sigma) - 0.5 * std::log(2.0 * std::numbers::pi));
            } else {
                detail::require_positive(p.beta, "gamma beta");
                detail::require_positive(p.alpha, "gamma alpha");
                const Tensor am1 = shift(p.alpha, -1.0);
                return sub(add(add(scale(p.alpha, std::log(p.beta)), neg(lgamma(p.alpha))),
                               mul(am1, log_s)),
                           scale(s, p.beta));
            }
        },
        params);
}

// ---------------------------------------------------------------------------
// KL divergences

/// KL(Weibull(k, lambda) || Gamma(alpha, beta)).
inline double kl_weibull_gamma(double k, double lambda, double alpha, double beta)
{
    detail::require_positive(k, "weibull k");
    detail::require_positive(lambda, "weibull lambda");
    detail::require_positive(alpha, "gamma alpha");
    detail::require_positive(beta, "gamma beta");
    return kEulerGamma * alpha / k - alpha * std::log(lambda) + std::log(k) +
           beta * lambda * std::exp(lgamma(1.0 + 1.0 / k)) - kEulerGamma - 1.0 -
           alpha * std::log(beta) + lgamma(alpha);
}

/// Same divergence with the scale given in log space, so exp() never has to
/// represent lambda on its own. Differentiable in log_lambda and alpha.
inline Tensor kl_weibull_gamma_log_scale(double k, const Tensor& log_lambda, const Tensor& alpha,
                                         double beta)
{
    detail::require_positive(k, "weibull k");
    detail::require_positive(beta, "gamma beta");
    detail::require_positive(alpha, "gamma alpha");
    const double mean_factor = std::exp(lgamma(1.0 + 1.0 / k));
    const double constant = std::log(k) - kEulerGamma - 1.0;
    const double alpha_coef = kEulerGamma / k - std::log(beta);
    if (log_lambda.shape() == alpha.shape()) {
        const auto ll = log_lambda.values();
        const auto a = alpha.values();
        std::vector<double> y(ll.size());
        for (std::size_t i = 0; i < y.size(); ++i) {
            y[i] = a[i] * (alpha_coef - ll[i]) + beta * mean_factor * std::exp(ll[i]) + lgamma(a[i]) + constant;
        }
        auto pl = log_lambda.node_ptr();
        auto pa = alpha.node_ptr();
        return detail::make_result(log_lambda.shape(), std::move(y), {pl, pa},
                                   [pl, pa, alpha_coef, scale = beta * mean_factor](const detail::Node& self) {
                                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                           const double g = self.grad[i];
                                           const double ll = pl->value[i], a = pa->value[i];
                                           if (pl->requires_grad) pl->grad[i] += g * (scale * std::exp(ll) - a);
                                           if (pa->requires_grad) pa->grad[i] += g * (alpha_coef - ll + digamma(a));
                                       }
                                   });
    }
    const Tensor alpha_terms = scale(alpha, alpha_coef);
    return shift(add(add(sub(alpha_terms, mul(alpha, log_lambda)),
                         scale(exp(log_lambda), beta * mean_factor)),
                     lgamma(alpha)),
                 constant);
}

inline Tensor kl_weibull_gamma(double k, const Tensor& lambda, const Tensor& alpha, double beta)
{
    detail::require_positive(lambda, "weibull lambda");
    return kl_weibull_gamma_log_scale(k, log(lambda), alpha, beta);
}

/// KL(Lognormal(mu1, sigma1^2) || Lognormal(mu2, sigma2^2)).
inline double kl_lognormal_lognormal(double mu1, double sigma1, double mu2, double sigma2)
{
    detail::require_positive(sigma1, "lognormal sigma1");
    detail::require_positive(sigma2, "lognormal sigma2");
    const double dm = mu1 - mu2;
    return std::log(sigma2 / sigma1) + (sigma1 * sigma1 + dm * dm) / (2.0 * sigma2 * sigma2) - 0.5;
}

inline Tensor kl_lognormal_lognormal(const Tensor& mu1, double sigma1, const Tensor& mu2,
                                     double sigma2)
{
    detail::require_positive(sigma1, "lognormal sigma1");
    detail::require_positive(sigma2, "lognormal sigma2");
    const double inv = 1.0 / (2.0 * sigma2 * sigma2);
    const double constant = std::log(sigma2 / sigma1) + sigma1 * sigma1 * inv - 0.5;
    return shift(scale(square(sub(mu1, mu2)), inv), constant);
}

}  // namespace bam
