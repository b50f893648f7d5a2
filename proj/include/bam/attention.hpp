#pragma once

// Soft attention and its stochastic (Bayesian) counterpart.
//
// Unnormalized weights are handled in log space throughout:
//   weibull:   log S = phi - lgamma(1 + 1/k) + (1/k) log(-log(1 - eps))
//   lognormal: log S = phi - sigma^2/2 + sigma * eps
// so E[S] = exp(phi) in both cases and W = S / rowsum(S) = softmax(log S).
//
// Two layouts share the same code: a dense m x n score matrix with an optional
// mask, and a sparse edge vector described by a Csr pattern. Noise is drawn
// row-major over admissible entries only, so both layouts consume a random
// stream identically.

#include <cmath>
#include <concepts>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bam/distributions.hpp"
#include "bam/error.hpp"
#include "bam/ops.hpp"
#include "bam/rng.hpp"
#include "bam/special.hpp"

namespace bam {

enum class AttentionMode { deterministic, weibull, lognormal };
enum class ScoreFn { scaled_dot_product, additive_leakyrelu };
enum class HeadCombine { concat, mean };
enum class Activation { none, elu, relu };

inline const char* to_string(AttentionMode m)
{
    switch (m) {
    case AttentionMode::deterministic: return "deterministic";
    case AttentionMode::weibull: return "weibull";
    case AttentionMode::lognormal: return "lognormal";
    }
    return "?";
}

struct AttentionConfig
{
    AttentionMode mode = AttentionMode::deterministic;
    double k = 1.0;      // weibull shape
    double sigma = 1.0;  // lognormal scale
    std::size_t heads = 1;
    ScoreFn score_fn = ScoreFn::scaled_dot_product;
    std::size_t d_k = 1;
    std::size_t d_v = 1;
    double leaky_slope = 0.2;
    double coef_dropout = 0.0;  // applied to normalized weights while training
    HeadCombine combine = HeadCombine::concat;

    bool stochastic() const { return mode != AttentionMode::deterministic; }

    void validate() const
    {
        if (heads == 0) throw ConfigError("attention: heads must be at least 1");
        if (d_k == 0 || d_v == 0) throw ConfigError("attention: d_k and d_v must be positive");
        if (mode == AttentionMode::weibull && !(k > 0.0 && std::isfinite(k))) {
            throw ConfigError("attention: weibull mode needs k > 0");
        }
        if (mode == AttentionMode::lognormal && !(sigma > 0.0 && std::isfinite(sigma))) {
            throw ConfigError("attention: lognormal mode needs sigma > 0");
        }
        if (!(coef_dropout >= 0.0 && coef_dropout < 1.0)) {
            throw ConfigError("attention: coefficient dropout must lie in [0, 1)");
        }
    }

    /// Constant c with posterior parameter = phi - c (log lambda or mu).
    double posterior_offset() const
    {
        switch (mode) {
        case AttentionMode::weibull: return lgamma(1.0 + 1.0 / k);
        case AttentionMode::lognormal: return 0.5 * sigma * sigma;
        default: return 0.0;
        }
    }
};

/// One realized attention map. Tensors are [m x n] in the dense layout and
/// [nnz] in the sparse one.
struct AttentionSample
{
    Tensor phi;
    Tensor post;   // log lambda (weibull) or mu (lognormal); phi when deterministic
    Tensor log_s;  // log of the unnormalized weights
    Tensor w;
    std::vector<double> eps;    // raw noise, one per admissible entry
    std::optional<Mask> mask;   // dense layout with a mask

    /// S = exp(log S) on admissible entries, 0 elsewhere; no history.
    std::vector<double> s() const
    {
        const auto ls = log_s.values();
        std::vector<double> out(ls.size(), 0.0);
        for (std::size_t i = 0; i < ls.size(); ++i) {
            if (!mask || mask->keep[i]) out[i] = std::exp(ls[i]);
        }
        return out;
    }
};

/// Raw noise for `count` admissible entries: uniform for weibull, standard
/// normal for lognormal, nothing for deterministic attention.
inline std::vector<double> draw_noise(AttentionMode mode, std::size_t count, Rng& rng)
{
    std::vector<double> eps;
    if (mode == AttentionMode::weibull) {
        eps.resize(count);
        for (auto& e : eps) e = rng.uniform();
    } else if (mode == AttentionMode::lognormal) {
        eps.resize(count);
        for (auto& e : eps) e = rng.normal();
    }
    return eps;
}

namespace detail {

/// log S - posterior parameter, per admissible entry.
inline std::vector<double> unit_log_noise(const AttentionConfig& cfg, std::span<const double> eps)
{
    std::vector<double> out(eps.size());
    for (std::size_t i = 0; i < eps.size(); ++i) {
        out[i] = cfg.mode == AttentionMode::weibull ? weibull_unit_log_draw(cfg.k, eps[i]) : cfg.sigma * eps[i];
    }
    return out;
}

}  // namespace detail

/// Dense m x n layout with an optional mask.
struct DenseLayout
{
    std::size_t m = 0;
    std::size_t n = 0;
    const Mask* mask = nullptr;

    std::size_t count() const { return mask ? mask->count() : m * n; }

    /// Places one value per admissible entry into an m x n tensor.
    Tensor scatter(std::span<const double> compact) const
    {
        std::vector<double> full(m * n, 0.0);
        std::size_t c = 0;
        for (std::size_t i = 0; i < m * n; ++i) {
            if (!mask || mask->keep[i]) full[i] = compact[c++];
        }
        return Tensor({m, n}, std::move(full));
    }

    Tensor normalize(const Tensor& logits) const { return softmax_rows(logits, mask); }
    Tensor aggregate(const Tensor& w, const Tensor& v) const { return matmul(w, v); }
    Tensor drop(const Tensor& w, double p, Rng& rng, bool training) const
    {
        return dropout(w, p, rng, training, mask);
    }
    std::optional<Mask> sample_mask() const
    {
        return mask ? std::optional<Mask>(*mask) : std::nullopt;
    }

    void check(const Tensor& phi) const
    {
        if (phi.rank() != 2 || phi.rows() != m || phi.cols() != n) {
            throw DimensionError("attention: scores " + shape_str(phi.shape()) +
                                 " do not match layout " + std::to_string(m) + "x" +
                                 std::to_string(n));
        }
        if (mask && (mask->rows != m || mask->cols != n)) {
            throw DimensionError("attention: mask shape differs from scores");
        }
    }
};

/// Sparse layout: one entry per Csr position, ordered row-major.
struct SparseLayout
{
    const Csr* csr = nullptr;
    std::vector<std::size_t> rows;  // query index of each entry

    explicit SparseLayout(const Csr& pattern) : csr(&pattern), rows(pattern.row_index()) {}

    std::size_t count() const { return csr->nnz(); }
    Tensor scatter(std::span<const double> compact) const
    {
        return Tensor({compact.size()}, std::vector<double>(compact.begin(), compact.end()));
    }
    Tensor normalize(const Tensor& logits) const { return segment_softmax(logits, *csr); }
    Tensor aggregate(const Tensor& w, const Tensor& v) const { return spmm(w, *csr, v); }
    Tensor drop(const Tensor& w, double p, Rng& rng, bool training) const
    {
        return dropout(w, p, rng, training);
    }
    std::optional<Mask> sample_mask() const { return std::nullopt; }

    void check(const Tensor& phi) const
    {
        if (phi.rank() != 1 || phi.numel() != csr->nnz()) {
            throw DimensionError("attention: edge scores " + shape_str(phi.shape()) + " for " +
                                 std::to_string(csr->nnz()) + " entries");
        }
    }
};

template <class L>
concept AttentionLayout = requires(const L& l, const Tensor& t) {
    { l.count() } -> std::convertible_to<std::size_t>;
    l.normalize(t);
};

// ---------------------------------------------------------------------------
// Scores

/// Dense alignment scores [m x n]. Additive scores use a_q [d_k x 1] and
/// a_k [d_k x 1]: phi_ij = LeakyReLU(q_i . a_q + k_j . a_k).
inline Tensor score(const Tensor& q, const Tensor& k, const AttentionConfig& cfg,
                    const Tensor* a_q = nullptr, const Tensor* a_k = nullptr)
{
    if (q.rank() != 2 || k.rank() != 2 || q.cols() != k.cols()) {
        throw DimensionError("score: query " + shape_str(q.shape()) + " vs key " +
                             shape_str(k.shape()));
    }
    if (cfg.score_fn == ScoreFn::scaled_dot_product) {
        return scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.cols())));
    }
    if (!a_q || !a_k) throw DimensionError("score: additive form needs attention vectors");
    const Tensor f = matmul(q, *a_q);             // [m x 1]
    const Tensor g = transpose(matmul(k, *a_k));  // [1 x n]
    return leaky_relu(add(f, g), cfg.leaky_slope);
}

/// Edge scores [nnz] for a sparse layout; same values as the dense scores at
/// the admissible positions.
inline Tensor score(const Tensor& q, const Tensor& k, const AttentionConfig& cfg,
                    const SparseLayout& layout, const Tensor* a_q = nullptr,
                    const Tensor* a_k = nullptr)
{
    if (q.rank() != 2 || k.rank() != 2 || q.cols() != k.cols()) {
        throw DimensionError("score: query " + shape_str(q.shape()) + " vs key " +
                             shape_str(k.shape()));
    }
    const std::size_t e = layout.count();
    if (cfg.score_fn == ScoreFn::scaled_dot_product) {
        const Tensor qe = gather_rows(q, layout.rows);
        const Tensor ke = gather_rows(k, layout.csr->col);
        return scale(reshape(sum(mul(qe, ke), 1), {e}),
                     1.0 / std::sqrt(static_cast<double>(q.cols())));
    }
    if (!a_q || !a_k) throw DimensionError("score: additive form needs attention vectors");
    const Tensor f = gather_rows(matmul(q, *a_q), layout.rows);
    const Tensor g = gather_rows(matmul(k, *a_k), layout.csr->col);
    return leaky_relu(reshape(add(f, g), {e}), cfg.leaky_slope);
}

// ---------------------------------------------------------------------------
// Single attention map

struct AttentionResult
{
    AttentionSample sample;
    Tensor out;
};

template <AttentionLayout Layout>
AttentionResult deterministic_attention(const Tensor& phi, const Tensor& v, const Layout& layout)
{
    layout.check(phi);
    AttentionResult r;
    r.sample.phi = phi;
    r.sample.post = phi;
    r.sample.log_s = phi;
    r.sample.w = layout.normalize(phi);
    r.sample.mask = layout.sample_mask();
    r.out = layout.aggregate(r.sample.w, v);
    return r;
}

/// Stochastic attention with externally supplied noise (one value per
/// admissible entry). Outside training the latent weights are replaced by
/// their expectation exp(phi), which is exactly the deterministic map.
template <AttentionLayout Layout>
AttentionResult stochastic_attention(const Tensor& phi, const Tensor& v,
                                     const AttentionConfig& cfg, std::span<const double> eps,
                                     const Layout& layout, bool training)
{
    if (!cfg.stochastic()) throw ConfigError("stochastic_attention: mode is deterministic");
    layout.check(phi);
    const double offset = cfg.posterior_offset();
    if (!training) {
        auto r = deterministic_attention(phi, v, layout);
        r.sample.post = shift(phi, -offset);
        return r;
    }
    if (eps.size() != layout.count()) {
        throw DimensionError("stochastic_attention: " + std::to_string(eps.size()) +
                             " noise values for " + std::to_string(layout.count()) +
                             " admissible entries");
    }
    AttentionResult r;
    r.sample.phi = phi;
    r.sample.post = shift(phi, -offset);
    r.sample.log_s = add(r.sample.post, layout.scatter(detail::unit_log_noise(cfg, eps)));
    r.sample.w = layout.normalize(r.sample.log_s);
    r.sample.eps.assign(eps.begin(), eps.end());
    r.sample.mask = layout.sample_mask();
    r.out = layout.aggregate(r.sample.w, v);
    return r;
}

inline AttentionResult deterministic_attention(const Tensor& phi, const Tensor& v,
                                               const Mask* mask = nullptr)
{
    return deterministic_attention(phi, v, DenseLayout{phi.rows(), phi.cols(), mask});
}

inline AttentionResult stochastic_attention(const Tensor& phi, const Tensor& v,
                                            const AttentionConfig& cfg,
                                            std::span<const double> eps, const Mask* mask,
                                            bool training)
{
    return stochastic_attention(phi, v, cfg, eps, DenseLayout{phi.rows(), phi.cols(), mask},
                                training);
}

// ---------------------------------------------------------------------------
// Multi-head layers

struct HeadWeights
{
    Tensor wq;   // [d_in_q x d_k]
    Tensor wk;   // [d_in_kv x d_k]
    Tensor wv;   // [d_in_kv x d_v]
    Tensor a_q;  // [d_k x 1], additive scores only
    Tensor a_k;  // [d_k x 1], additive scores only
};

struct LayerWeights
{
    std::vector<HeadWeights> heads;

    /// Distinct parameter tensors (shared projections are listed once).
    std::vector<Tensor> parameters() const
    {
        std::vector<Tensor> out;
        auto push = [&](const Tensor& t) {
            if (!t.defined()) return;
            for (const auto& o : out)
                if (o.same_node(t)) return;
            out.push_back(t);
        };
        for (const auto& h : heads) {
            push(h.wq);
            push(h.wk);
            push(h.wv);
            push(h.a_q);
            push(h.a_k);
        }
        return out;
    }
};

/// Glorot-uniform initialization. With `shared_projection` one matrix serves
/// as query, key and value projection (graph attention convention).
inline Tensor glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng)
{
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> v(fan_in * fan_out);
    for (auto& x : v) x = (2.0 * rng.uniform() - 1.0) * limit;
    return Tensor({fan_in, fan_out}, std::move(v), true);
}

inline LayerWeights init_layer(const AttentionConfig& cfg, std::size_t d_in_q,
                               std::size_t d_in_kv, Rng& rng, bool shared_projection = false)
{
    cfg.validate();
    if (shared_projection && (d_in_q != d_in_kv || cfg.d_k != cfg.d_v)) {
        throw DimensionError("init_layer: shared projection needs equal input and head widths");
    }
    LayerWeights lw;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        HeadWeights hw;
        hw.wq = glorot(d_in_q, cfg.d_k, rng);
        if (shared_projection) {
            hw.wk = hw.wq;
            hw.wv = hw.wq;
        } else {
            hw.wk = glorot(d_in_kv, cfg.d_k, rng);
            hw.wv = glorot(d_in_kv, cfg.d_v, rng);
        }
        if (cfg.score_fn == ScoreFn::additive_leakyrelu) {
            hw.a_q = glorot(cfg.d_k, 1, rng);
            hw.a_k = glorot(cfg.d_k, 1, rng);
        }
        lw.heads.push_back(std::move(hw));
    }
    return lw;
}

struct LayerResult
{
    Tensor out;
    std::vector<AttentionSample> samples;  // per head
    std::vector<Tensor> keys;              // per head, K = X_kv M_K
};

/// Noise per head for one layer; an empty outer vector means "draw from rng".
using LayerNoise = std::vector<std::vector<double>>;

inline Tensor activate(const Tensor& x, Activation act)
{
    switch (act) {
    case Activation::elu: return elu(x);
    case Activation::relu: return relu(x);
    default: return x;
    }
}

/// All heads of one layer. Per head: Q = X_q M_Q, K = X_kv M_K, V = X_kv M_V,
/// attention (deterministic or sampled), optional coefficient dropout, then
/// the head outputs are concatenated (or averaged) along features.
/// Random draws per head, in order: attention noise, coefficient dropout.
template <AttentionLayout Layout>
LayerResult multi_head_layer(const Tensor& x_q, const Tensor& x_kv, const LayerWeights& weights,
                             const AttentionConfig& cfg, const Layout& layout, Rng& rng,
                             bool training, const LayerNoise* noise = nullptr)
{
    cfg.validate();
    if (weights.heads.size() != cfg.heads) {
        throw DimensionError("multi_head_layer: " + std::to_string(weights.heads.size()) +
                             " weight sets for " + std::to_string(cfg.heads) + " heads");
    }
    if (noise && !noise->empty() && noise->size() != cfg.heads) {
        throw DimensionError("multi_head_layer: noise given for wrong number of heads");
    }
    LayerResult res;
    std::vector<Tensor> outs;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        const auto& hw = weights.heads[h];
        if (hw.wq.cols() != cfg.d_k || hw.wk.cols() != cfg.d_k || hw.wv.cols() != cfg.d_v) {
            throw DimensionError("multi_head_layer: projection widths differ from config");
        }
        const Tensor q = matmul(x_q, hw.wq);
        const Tensor k = hw.wk.same_node(hw.wq) && x_kv.same_node(x_q) ? q : matmul(x_kv, hw.wk);
        const Tensor v = hw.wv.same_node(hw.wk) ? k : matmul(x_kv, hw.wv);
        Tensor phi;
        if constexpr (std::is_same_v<Layout, SparseLayout>) {
            phi = score(q, k, cfg, layout, &hw.a_q, &hw.a_k);
        } else {
            phi = score(q, k, cfg, &hw.a_q, &hw.a_k);
        }
        AttentionResult r;
        if (cfg.stochastic()) {
            std::vector<double> drawn;
            std::span<const double> eps;
            if (training) {
                if (noise && !noise->empty()) {
                    eps = (*noise)[h];
                } else {
                    drawn = draw_noise(cfg.mode, layout.count(), rng);
                    eps = drawn;
                }
            }
            r = stochastic_attention(phi, v, cfg, eps, layout, training);
        } else {
            r = deterministic_attention(phi, v, layout);
        }
        if (training && cfg.coef_dropout > 0.0) {
            r.out = layout.aggregate(layout.drop(r.sample.w, cfg.coef_dropout, rng, training), v);
        }
        outs.push_back(r.out);
        res.samples.push_back(std::move(r.sample));
        res.keys.push_back(k);
    }
    if (cfg.combine == HeadCombine::concat) {
        res.out = outs.size() == 1 ? outs[0] : concat(outs, 1);
    } else {
        Tensor acc = outs[0];
        for (std::size_t h = 1; h < outs.size(); ++h) acc = add(acc, outs[h]);
        res.out = outs.size() == 1 ? acc : scale(acc, 1.0 / static_cast<double>(outs.size()));
    }
    return res;
}

/// Dense convenience overload.
inline LayerResult multi_head_layer(const Tensor& x_q, const Tensor& x_kv,
                                    const LayerWeights& weights, const AttentionConfig& cfg,
                                    const Mask* mask, Rng& rng, bool training,
                                    const LayerNoise* noise = nullptr)
{
    return multi_head_layer(x_q, x_kv, weights, cfg, DenseLayout{x_q.rows(), x_kv.rows(), mask},
                            rng, training, noise);
}

struct LayerSpec
{
    AttentionConfig cfg;
    LayerWeights weights;
    Activation activation = Activation::none;
};

struct StackResult
{
    Tensor out;
    std::vector<LayerResult> layers;
};

/// Sequential layers. Layer 0 lets X_q attend over X_kv; every later layer
/// self-attends over the previous (realized) output, so its scores depend on
/// the noise drawn below it. masks[l] may be null; noise[l] may be empty.
inline StackResult stack_layers(const Tensor& x_q, const Tensor& x_kv,
                                const std::vector<LayerSpec>& layers,
                                const std::vector<const Mask*>& masks, Rng& rng, bool training,
                                const std::vector<LayerNoise>* noise = nullptr)
{
    if (layers.empty()) throw DimensionError("stack_layers: no layers");
    if (!masks.empty() && masks.size() != layers.size()) {
        throw DimensionError("stack_layers: one mask slot per layer required");
    }
    StackResult res;
    Tensor q = x_q, kv = x_kv;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& spec = layers[l];
        const std::size_t d_in = q.cols();
        for (const auto& hw : spec.weights.heads) {
            if (hw.wq.rows() != d_in || hw.wk.rows() != kv.cols()) {
                throw DimensionError("stack_layers: layer " + std::to_string(l) +
                                     " input width does not chain");
            }
        }
        const Mask* mask = masks.empty() ? nullptr : masks[l];
        const LayerNoise* ln = noise && l < noise->size() ? &(*noise)[l] : nullptr;
        auto lr = multi_head_layer(q, kv, spec.weights, spec.cfg, mask, rng, training, ln);
        lr.out = activate(lr.out, spec.activation);
        q = lr.out;
        kv = lr.out;
        res.layers.push_back(std::move(lr));
    }
    res.out = q;
    return res;
}

}  // namespace bam
