#pragma once

// Predictive uncertainty: repeated stochastic forward passes, a Welch t-test
// between the two most probable classes, and PAvPU.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "bam/error.hpp"
#include "bam/objective.hpp"
#include "bam/special.hpp"

namespace bam {

/// M x instances x classes predicted probabilities.
struct PosteriorPredictions
{
    std::size_t samples = 0;
    std::size_t instances = 0;
    std::size_t classes = 0;
    std::vector<double> probs;

    double at(std::size_t m, std::size_t i, std::size_t c) const
    {
        return probs[(m * instances + i) * classes + c];
    }

    std::vector<double> column(std::size_t i, std::size_t c) const
    {
        std::vector<double> out(samples);
        for (std::size_t m = 0; m < samples; ++m) out[m] = at(m, i, c);
        return out;
    }

    std::vector<double> mean(std::size_t i) const
    {
        std::vector<double> out(classes, 0.0);
        for (std::size_t m = 0; m < samples; ++m)
            for (std::size_t c = 0; c < classes; ++c) out[c] += at(m, i, c);
        for (auto& v : out) v /= static_cast<double>(samples);
        return out;
    }
};

/// M stochastic passes (sampled attention and active dropout, as in training),
/// each turned into class probabilities.
inline PosteriorPredictions posterior_sample(ClassificationTask& task, std::span<const std::size_t> items,
                                             std::size_t m, Rng& rng)
{
    if (m < 2) throw ParameterError("posterior_sample: need at least 2 samples");
    PosteriorPredictions p;
    p.samples = m;
    p.instances = items.size();
    p.classes = task.num_classes();
    p.probs.reserve(m * p.instances * p.classes);
    for (std::size_t s = 0; s < m; ++s) {
        const auto fwd = task.forward(items, rng, true);
        const Tensor probs = softmax_rows(fwd.logits.detach());
        p.probs.insert(p.probs.end(), probs.values().begin(), probs.values().end());
    }
    return p;
}

struct WelchResult
{
    double t = 0.0;
    double df = 0.0;
    double p_value = 1.0;
};

/// Two-sided Welch test of equal means. When both samples have zero variance
/// the p-value is 1 for equal means and 0 otherwise.
inline WelchResult welch_test(std::span<const double> a, std::span<const double> b)
{
    if (a.size() < 2 || b.size() < 2) throw ParameterError("welch_test: need at least 2 values per sample");
    const auto stats = [](std::span<const double> x) {
        // constant samples get exactly zero variance
        if (std::ranges::all_of(x, [&](double v) { return v == x[0]; })) return std::pair{x[0], 0.0};
        double mean = 0;
        for (double v : x) mean += v;
        mean /= static_cast<double>(x.size());
        double ss = 0;
        for (double v : x) ss += (v - mean) * (v - mean);
        return std::pair{mean, ss / static_cast<double>(x.size() - 1)};
    };
    const auto [ma, va] = stats(a);
    const auto [mb, vb] = stats(b);
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    const double sa = va / na, sb = vb / nb;
    WelchResult r;
    if (sa + sb == 0.0) {
        if (ma == mb) return r;
        r.t = ma > mb ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
        r.df = na + nb - 2.0;
        r.p_value = 0.0;
        return r;
    }
    r.t = (ma - mb) / std::sqrt(sa + sb);
    r.df = (sa + sb) * (sa + sb) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    r.p_value = student_t_two_sided_p(r.t, r.df);
    return r;
}

/// Indices of the highest and second-highest posterior-mean classes (ties go
/// to the lower index).
inline std::pair<std::size_t, std::size_t> top_two(std::span<const double> mean)
{
    if (mean.size() < 2) throw DimensionError("top_two: need at least two classes");
    std::size_t first = 0, second = 1;
    if (mean[1] > mean[0]) std::swap(first, second);
    for (std::size_t c = 2; c < mean.size(); ++c) {
        if (mean[c] > mean[first]) {
            second = first;
            first = c;
        } else if (mean[c] > mean[second]) {
            second = c;
        }
    }
    return {first, second};
}

/// Per instance: certain iff the top two classes differ significantly.
inline std::vector<bool> certainty(const PosteriorPredictions& preds, double p_threshold)
{
    if (preds.samples < 2) throw ParameterError("certainty: need at least 2 samples");
    if (!(p_threshold > 0.0 && p_threshold < 1.0)) throw ParameterError("certainty: p_threshold must be in (0, 1)");
    std::vector<bool> out(preds.instances);
    for (std::size_t i = 0; i < preds.instances; ++i) {
        const auto [c1, c2] = top_two(preds.mean(i));
        out[i] = welch_test(preds.column(i, c1), preds.column(i, c2)).p_value < p_threshold;
    }
    return out;
}

struct PavpuCounts
{
    double n_ac = 0.0;
    double n_au = 0.0;
    double n_ic = 0.0;
    double n_iu = 0.0;

    double total() const { return n_ac + n_au + n_ic + n_iu; }
};

struct PavpuResult
{
    PavpuCounts counts;
    double value = 0.0;
};

/// (accurate and certain + inaccurate and uncertain) / total.
inline PavpuResult pavpu(const std::vector<bool>& accurate, const std::vector<bool>& certain)
{
    if (accurate.size() != certain.size()) throw DimensionError("pavpu: flag vectors differ in length");
    if (accurate.empty()) throw DomainError("pavpu: undefined for zero instances");
    PavpuResult r;
    for (std::size_t i = 0; i < accurate.size(); ++i) {
        if (accurate[i]) (certain[i] ? r.counts.n_ac : r.counts.n_au) += 1.0;
        else (certain[i] ? r.counts.n_ic : r.counts.n_iu) += 1.0;
    }
    r.value = (r.counts.n_ac + r.counts.n_iu) / r.counts.total();
    return r;
}

}  // namespace bam
