#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include <gtest/gtest.h>

#include "bam/ops.hpp"
#include "bam/rng.hpp"
#include "bam/tensor.hpp"

namespace bam::testing {

/// Central finite differences of f() with respect to every entry of `param`,
/// perturbing the parameter's storage in place.
inline std::vector<double> numeric_grad(Tensor& param, const std::function<double()>& f,
                                        double h = 1e-5)
{
    auto v = param.mutable_values();
    std::vector<double> g(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double orig = v[i];
        v[i] = orig + h;
        const double up = f();
        v[i] = orig - h;
        const double down = f();
        v[i] = orig;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).
inline double max_rel_error(std::span<const double> a, std::span<const double> b,
                            double floor = 1e-6)
{
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), floor});
        worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
    }
    return worst;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -3.0, double hi = 3.0,
                            bool requires_grad = true)
{
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

/// Weighted sum with fixed random weights so every output entry matters.
inline Tensor probe(const Tensor& y, std::uint64_t seed = 99)
{
    Rng rng(seed);
    auto w = random_tensor(y.shape(), rng, -1.0, 1.0, false);
    return sum(mul(y, w));
}

inline void expect_grad_matches(Tensor& param, const std::function<Tensor()>& f,
                                double tol = 1e-4, double floor = 1e-6)
{
    param.zero_grad();
    backward(f());
    const auto analytic = to_vec(param.grad());
    const auto numeric = numeric_grad(param, [&] { return f().item(); });
    EXPECT_LT(max_rel_error(analytic, numeric, floor), tol);
}

}  // namespace bam::testing
