#pragma once

// Priors over the unnormalized attention weights and the per-layer KL terms.
//
// The contextual prior maps keys through F2(ReLU(F1 K)) and normalizes over
// key positions, giving Psi; the prior shape (gamma alpha or lognormal mu) of
// entry (i, j) is Psi_j, shared by every query i.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "bam/attention.hpp"
#include "bam/distributions.hpp"
#include "bam/error.hpp"
#include "bam/ops.hpp"
#include "bam/rng.hpp"

namespace bam {

enum class PriorKind { none, fixed, contextual };

inline const char* to_string(PriorKind k)
{
    switch (k) {
    case PriorKind::none: return "none";
    case PriorKind::fixed: return "fixed";
    case PriorKind::contextual: return "contextual";
    }
    return "?";
}

struct PriorConfig
{
    PriorKind kind = PriorKind::none;
    Family family = Family::gamma;
    double beta = 1.0;    // gamma rate
    double sigma1 = 1.0;  // lognormal prior scale
    double alpha_fixed = 1.0;
    double mu_fixed = 0.0;
    std::size_t d_mid = 1;
    bool share_across_heads = false;

    void validate() const
    {
        if (kind == PriorKind::none) return;
        if (family == Family::weibull) throw ConfigError("prior: family must be gamma or lognormal");
        if (family == Family::gamma && !(beta > 0.0 && std::isfinite(beta))) {
            throw ConfigError("prior: gamma prior needs beta > 0");
        }
        if (family == Family::lognormal && !(sigma1 > 0.0 && std::isfinite(sigma1))) {
            throw ConfigError("prior: lognormal prior needs sigma1 > 0");
        }
        if (kind == PriorKind::fixed && family == Family::gamma && !(alpha_fixed > 0.0)) {
            throw ConfigError("prior: fixed gamma prior needs alpha > 0");
        }
        if (kind == PriorKind::contextual && d_mid == 0) {
            throw ConfigError("prior: d_mid must be at least 1");
        }
    }
};

/// Throws unless the posterior/prior families form a supported pair.
inline void check_pairing(const AttentionConfig& att, const PriorConfig& prior)
{
    if (prior.kind == PriorKind::none) return;
    const bool ok = (att.mode == AttentionMode::weibull && prior.family == Family::gamma) ||
                    (att.mode == AttentionMode::lognormal && prior.family == Family::lognormal);
    if (!ok) {
        throw ConfigError(std::string("attention mode '") + to_string(att.mode) +
                          "' cannot be paired with prior family '" + to_string(prior.family) +
                          "' (weibull needs gamma, lognormal needs lognormal)");
    }
}

struct ContextualPriorNet
{
    Tensor w1;  // [d_k x d_mid]
    Tensor b1;  // [1 x d_mid]
    Tensor w2;  // [d_mid x 1]
    Tensor b2;  // [1 x 1]

    static ContextualPriorNet init(std::size_t d_k, std::size_t d_mid, Rng& rng)
    {
        if (d_mid == 0) throw ConfigError("prior: d_mid must be at least 1");
        ContextualPriorNet net;
        net.w1 = glorot(d_k, d_mid, rng);
        net.b1 = Tensor::zeros({1, d_mid}, true);
        net.w2 = glorot(d_mid, 1, rng);
        net.b2 = Tensor::zeros({1, 1}, true);
        return net;
    }

    static ContextualPriorNet zeros(std::size_t d_k, std::size_t d_mid)
    {
        return {Tensor::zeros({d_k, d_mid}, true), Tensor::zeros({1, d_mid}, true),
                Tensor::zeros({d_mid, 1}, true), Tensor::zeros({1, 1}, true)};
    }

    std::vector<Tensor> parameters() const { return {w1, b1, w2, b2}; }

    std::size_t parameter_count() const
    {
        return w1.numel() + b1.numel() + w2.numel() + b2.numel();
    }
};

/// Psi [n x 1]: softmax over key positions of F2(ReLU(F1 K)). With `groups`
/// the softmax runs separately over each group of keys (row g of the pattern
/// lists the keys of group g; keys must appear once, in ascending order).
inline Tensor contextual_psi(const Tensor& keys, const ContextualPriorNet& net,
                             const Csr* groups = nullptr)
{
    if (keys.rank() != 2 || keys.cols() != net.w1.rows()) {
        throw DimensionError("contextual_psi: keys " + shape_str(keys.shape()) +
                             " do not match prior network input " +
                             std::to_string(net.w1.rows()));
    }
    const std::size_t n = keys.rows();
    const Tensor hidden = relu(add(matmul(keys, net.w1), net.b1));
    const Tensor logits = add(matmul(hidden, net.w2), net.b2);  // [n x 1]
    if (!groups) {
        return reshape(softmax_rows(reshape(logits, {1, n})), {n, 1});
    }
    if (groups->nnz() != n) {
        throw DimensionError("contextual_psi: key groups do not cover every key once");
    }
    for (std::size_t e = 0; e < n; ++e) {
        if (groups->col[e] != e) {
            throw DimensionError("contextual_psi: key groups must list keys in order");
        }
    }
    return reshape(segment_softmax(reshape(logits, {n}), *groups), {n, 1});
}

/// Prior shape tensor (gamma alpha or lognormal mu) laid out like the scores.
struct PriorParams
{
    Family family = Family::gamma;
    Tensor shape;
    double scale = 1.0;  // gamma beta or lognormal sigma1
};

namespace detail {

inline PriorParams make_prior(const PriorConfig& cfg, Tensor shape)
{
    if (cfg.kind == PriorKind::none) {
        throw ConfigError("prior_params: prior kind 'none' has no parameters; skip the KL term");
    }
    return {cfg.family, std::move(shape), cfg.family == Family::gamma ? cfg.beta : cfg.sigma1};
}

inline double fixed_value(const PriorConfig& cfg)
{
    return cfg.family == Family::gamma ? cfg.alpha_fixed : cfg.mu_fixed;
}

}  // namespace detail

/// Dense layout: [m x n] with row i equal to Psi^T for every query i.
/// `psi` is ignored for fixed priors.
inline PriorParams prior_params(const Tensor* psi, const PriorConfig& cfg, const DenseLayout& layout)
{
    if (cfg.kind == PriorKind::fixed) {
        return detail::make_prior(cfg, Tensor::full({layout.m, layout.n}, detail::fixed_value(cfg)));
    }
    if (cfg.kind == PriorKind::contextual) {
        if (!psi || psi->numel() != layout.n) {
            throw DimensionError("prior_params: Psi must have one entry per key");
        }
        const Tensor ones = Tensor::full({layout.m, 1}, 1.0);
        return detail::make_prior(cfg, matmul(ones, reshape(*psi, {1, layout.n})));
    }
    return detail::make_prior(cfg, Tensor());
}

/// Sparse layout: entry e takes Psi at its key column.
inline PriorParams prior_params(const Tensor* psi, const PriorConfig& cfg, const SparseLayout& layout)
{
    if (cfg.kind == PriorKind::fixed) {
        return detail::make_prior(cfg, Tensor::full({layout.count()}, detail::fixed_value(cfg)));
    }
    if (cfg.kind == PriorKind::contextual) {
        if (!psi || psi->numel() != layout.csr->num_cols) {
            throw DimensionError("prior_params: Psi must have one entry per key");
        }
        const auto& col = layout.csr->col;
        bool identity = col.size() == psi->numel();
        for (std::size_t e = 0; identity && e < col.size(); ++e) identity = col[e] == e;
        if (identity) return detail::make_prior(cfg, reshape(*psi, {layout.count()}));
        return detail::make_prior(
            cfg, reshape(gather_rows(reshape(*psi, {psi->numel(), 1}), col), {layout.count()}));
    }
    return detail::make_prior(cfg, Tensor());
}

/// Dense convenience: prior parameters for m queries.
inline PriorParams prior_params(const Tensor* psi, const PriorConfig& cfg, std::size_t m, std::size_t n)
{
    return prior_params(psi, cfg, DenseLayout{m, n, nullptr});
}

/// Analytic KL of one attention map, summed over admissible entries.
/// Differentiable in the posterior scores and in the prior parameters.
inline Tensor layer_kl(const AttentionSample& sample, const AttentionConfig& att,
                       const PriorParams& prior)
{
    Tensor kl;
    if (att.mode == AttentionMode::weibull && prior.family == Family::gamma) {
        kl = kl_weibull_gamma_log_scale(att.k, sample.post, prior.shape, prior.scale);
    } else if (att.mode == AttentionMode::lognormal && prior.family == Family::lognormal) {
        kl = kl_lognormal_lognormal(sample.post, att.sigma, prior.shape, prior.scale);
    } else {
        throw ConfigError(std::string("layer_kl: attention mode '") + to_string(att.mode) +
                          "' cannot be paired with prior family '" + to_string(prior.family) + "'");
    }
    if (sample.mask) kl = apply_mask(kl, *sample.mask);
    return sum(kl);
}

/// Single-sample estimate sum over admissible entries of log q(S) - log p(S)
/// at the realized S. No history.
inline double sampled_log_ratio(const AttentionSample& sample, const AttentionConfig& att,
                                const PriorParams& prior)
{
    if (sample.eps.empty()) throw ConfigError("sampled_log_ratio: sample carries no noise");
    const auto post = sample.post.values();
    const auto shape = prior.shape.values();
    const auto s = sample.s();
    double total = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (sample.mask && !sample.mask->keep[i]) continue;
        double lq = 0.0, lp = 0.0;
        if (att.mode == AttentionMode::weibull) {
            lq = weibull_log_pdf(att.k, std::exp(post[i]), s[i]);
            lp = gamma_log_pdf(shape[i], prior.scale, s[i]);
        } else {
            lq = lognormal_log_pdf(post[i], att.sigma, s[i]);
            lp = lognormal_log_pdf(shape[i], prior.scale, s[i]);
        }
        total += lq - lp;
    }
    return total;
}

/// Prior networks for one layer: one per head, or a single shared one.
struct LayerPrior
{
    std::vector<ContextualPriorNet> nets;

    static LayerPrior init(const PriorConfig& cfg, const AttentionConfig& att, Rng& rng)
    {
        LayerPrior lp;
        if (cfg.kind != PriorKind::contextual) return lp;
        const std::size_t count = cfg.share_across_heads ? 1 : att.heads;
        for (std::size_t h = 0; h < count; ++h) lp.nets.push_back(ContextualPriorNet::init(att.d_k, cfg.d_mid, rng));
        return lp;
    }

    const ContextualPriorNet& for_head(std::size_t h) const
    {
        if (nets.empty()) throw ConfigError("prior: no contextual network for this layer");
        return nets.size() == 1 ? nets[0] : nets.at(h);
    }

    std::vector<Tensor> parameters() const
    {
        std::vector<Tensor> out;
        for (const auto& n : nets)
            for (const auto& t : n.parameters()) out.push_back(t);
        return out;
    }

    std::size_t parameter_count() const
    {
        std::size_t c = 0;
        for (const auto& n : nets) c += n.parameter_count();
        return c;
    }
};

/// Prior parameters for every head of a computed layer.
template <AttentionLayout Layout>
std::vector<PriorParams> layer_prior_params(const LayerResult& layer, const PriorConfig& cfg,
                                            const LayerPrior& prior, const Layout& layout,
                                            const Csr* key_groups = nullptr)
{
    std::vector<PriorParams> out;
    for (std::size_t h = 0; h < layer.samples.size(); ++h) {
        if (cfg.kind == PriorKind::contextual) {
            const Tensor psi = contextual_psi(layer.keys[h], prior.for_head(h), key_groups);
            out.push_back(prior_params(&psi, cfg, layout));
        } else {
            out.push_back(prior_params(nullptr, cfg, layout));
        }
    }
    return out;
}

/// KL of all heads of a computed layer, or nothing when the layer carries no
/// KL term (deterministic attention or no prior).
/// Number of latent attention weights a layer's KL term covers.
template <AttentionLayout Layout>
std::size_t layer_kl_entries(const AttentionConfig& att, const Layout& layout)
{
    return att.heads * layout.count();
}

template <AttentionLayout Layout>
std::optional<Tensor> layer_kl_total(const LayerResult& layer, const AttentionConfig& att,
                                     const PriorConfig& cfg, const LayerPrior& prior,
                                     const Layout& layout, const Csr* key_groups = nullptr)
{
    if (!att.stochastic() || cfg.kind == PriorKind::none) return std::nullopt;
    check_pairing(att, cfg);
    const auto params = layer_prior_params(layer, cfg, prior, layout, key_groups);
    Tensor total;
    for (std::size_t h = 0; h < params.size(); ++h) {
        const Tensor kl = layer_kl(layer.samples[h], att, params[h]);
        total = total.defined() ? add(total, kl) : kl;
    }
    return total;
}

}  // namespace bam
