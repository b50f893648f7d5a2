#pragma once

// Synthetic alignment task: a query must find the one marked key among n and
// report that key's class. Each instance carries n keys, one per class in a
// random order; the marked key is shifted by `signal` along a marker
// direction u that the query also points along.
//
// The classifier is one attention layer (the query attends over its own
// instance's keys) followed by a linear map to class logits.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "bam/attention.hpp"
#include "bam/objective.hpp"
#include "bam/prior.hpp"

namespace bam {

struct SyntheticParams
{
    std::size_t n = 8;
    std::size_t d = 16;
    double signal = 3.0;
    double key_noise = 0.5;
    double query_noise = 0.1;
    std::size_t num_train = 2000;
    std::size_t num_val = 500;
    std::size_t num_test = 500;

    void validate() const
    {
        if (n < 2 || d < 2) throw ParameterError("synthetic: need n >= 2 and d >= 2");
        if (!(signal >= 0.0) || !(key_noise >= 0.0) || !(query_noise >= 0.0)) {
            throw ParameterError("synthetic: signal and noise levels must be nonnegative");
        }
        if (num_train == 0 || num_val == 0 || num_test == 0) {
            throw ParameterError("synthetic: every split needs at least one instance");
        }
    }
};

struct SyntheticInstance
{
    std::vector<double> keys;   // n x d, row-major
    std::vector<double> query;  // d
    std::vector<int> key_class;  // n
    std::size_t marked = 0;
    int label = 0;
};

struct SyntheticDataset
{
    SyntheticParams params;
    std::vector<std::vector<double>> centroids;  // one per class, orthogonal to u
    std::vector<SyntheticInstance> instances;   // train, then val, then test
    std::size_t num_classes = 0;

    std::vector<std::size_t> items(std::size_t begin, std::size_t count) const
    {
        std::vector<std::size_t> out(count);
        std::iota(out.begin(), out.end(), begin);
        return out;
    }
    std::vector<std::size_t> train_items() const { return items(0, params.num_train); }
    std::vector<std::size_t> val_items() const { return items(params.num_train, params.num_val); }
    std::vector<std::size_t> test_items() const
    {
        return items(params.num_train + params.num_val, params.num_test);
    }
};

/// The marker direction is the first coordinate axis.
inline SyntheticDataset generate_synthetic(const SyntheticParams& p, Rng& rng)
{
    p.validate();
    SyntheticDataset ds;
    ds.params = p;
    ds.num_classes = p.n;
    for (std::size_t c = 0; c < p.n; ++c) {
        std::vector<double> mu(p.d, 0.0);
        for (std::size_t f = 1; f < p.d; ++f) mu[f] = rng.normal();
        ds.centroids.push_back(std::move(mu));
    }
    const std::size_t total = p.num_train + p.num_val + p.num_test;
    ds.instances.reserve(total);
    for (std::size_t t = 0; t < total; ++t) {
        SyntheticInstance in;
        in.key_class.resize(p.n);
        std::iota(in.key_class.begin(), in.key_class.end(), 0);
        for (std::size_t i = p.n; i > 1; --i) std::swap(in.key_class[i - 1], in.key_class[rng.below(i)]);
        in.marked = rng.below(p.n);
        in.label = in.key_class[in.marked];
        in.keys.resize(p.n * p.d);
        for (std::size_t j = 0; j < p.n; ++j) {
            const auto& mu = ds.centroids[static_cast<std::size_t>(in.key_class[j])];
            for (std::size_t f = 0; f < p.d; ++f) in.keys[j * p.d + f] = mu[f] + p.key_noise * rng.normal();
        }
        in.keys[in.marked * p.d] += p.signal;
        in.query.resize(p.d);
        for (std::size_t f = 0; f < p.d; ++f) in.query[f] = (f == 0 ? 1.0 : 0.0) + p.query_noise * rng.normal();
        ds.instances.push_back(std::move(in));
    }
    return ds;
}

/// Accuracy of the rule "take the key with the largest marker coordinate,
/// answer its nearest centroid". Knows the generator's centroids.
inline double oracle_accuracy(const SyntheticDataset& ds, std::span<const std::size_t> items)
{
    const auto& p = ds.params;
    std::size_t correct = 0;
    for (std::size_t t : items) {
        const auto& in = ds.instances[t];
        std::size_t best = 0;
        for (std::size_t j = 1; j < p.n; ++j)
            if (in.keys[j * p.d] > in.keys[best * p.d]) best = j;
        int cls = 0;
        double best_d = INFINITY;
        for (std::size_t c = 0; c < ds.centroids.size(); ++c) {
            double dist = 0;
            for (std::size_t f = 1; f < p.d; ++f) {
                const double diff = in.keys[best * p.d + f] - ds.centroids[c][f];
                dist += diff * diff;
            }
            if (dist < best_d) {
                best_d = dist;
                cls = static_cast<int>(c);
            }
        }
        correct += cls == in.label;
    }
    return static_cast<double>(correct) / static_cast<double>(items.size());
}

struct SyntheticModelConfig
{
    AttentionMode mode = AttentionMode::deterministic;
    double k = 1.0;
    double sigma = 1.0;
    std::size_t heads = 1;
    std::size_t d_att = 16;  // d_k = d_v
    PriorConfig prior;
};

/// Query attends over its instance's keys; a linear head reads the result.
/// A batch is laid out block-diagonally: query b sees keys b*n .. b*n+n-1.
class SyntheticModel : public ClassificationTask
{
public:
    SyntheticModel(const SyntheticDataset& data, const SyntheticModelConfig& cfg, Rng& init_rng)
        : data_(&data), cfg_(cfg), train_(data.train_items()), val_(data.val_items()),
          test_(data.test_items())
    {
        att_.mode = cfg.mode;
        att_.k = cfg.k;
        att_.sigma = cfg.sigma;
        att_.heads = cfg.heads;
        att_.score_fn = ScoreFn::scaled_dot_product;
        att_.d_k = cfg.d_att;
        att_.d_v = cfg.d_att;
        att_.validate();
        cfg.prior.validate();
        check_pairing(att_, cfg.prior);
        for (const auto& in : data.instances) labels_.push_back(in.label);
        const std::size_t d = data.params.d;
        weights_ = init_layer(att_, d, d, init_rng);
        out_w_ = glorot(cfg.heads * cfg.d_att, data.num_classes, init_rng);
        out_b_ = Tensor::zeros({1, data.num_classes}, true);
        if (att_.stochastic() && cfg.prior.kind == PriorKind::contextual) {
            prior_ = LayerPrior::init(cfg.prior, att_, init_rng);
        }
    }

    SyntheticModel(const SyntheticModel&) = delete;
    SyntheticModel& operator=(const SyntheticModel&) = delete;

    struct Pass
    {
        Tensor logits;
        std::vector<Tensor> kl_terms;
        std::vector<std::size_t> kl_entries;
        LayerResult layer;
    };

    Pass run(std::span<const std::size_t> items, Rng& rng, bool training, bool with_kl = true,
             const LayerNoise* noise = nullptr) const
    {
        const auto& p = data_->params;
        const std::size_t b = items.size();
        std::vector<double> q(b * p.d), kv(b * p.n * p.d);
        for (std::size_t i = 0; i < b; ++i) {
            const auto& in = data_->instances.at(items[i]);
            std::copy(in.query.begin(), in.query.end(), q.begin() + static_cast<std::ptrdiff_t>(i * p.d));
            std::copy(in.keys.begin(), in.keys.end(), kv.begin() + static_cast<std::ptrdiff_t>(i * p.n * p.d));
        }
        const Csr blocks = block_pattern(b, p.n);
        const SparseLayout layout(blocks);
        Pass out;
        out.layer = multi_head_layer(Tensor({b, p.d}, std::move(q)), Tensor({b * p.n, p.d}, std::move(kv)),
                                     weights_, att_, layout, rng, training, noise);
        out.logits = add(matmul(out.layer.out, out_w_), out_b_);
        if (training && with_kl) {
            if (auto kl = layer_kl_total(out.layer, att_, cfg_.prior, prior_, layout, &blocks)) {
                out.kl_terms.push_back(*kl);
                out.kl_entries.push_back(layer_kl_entries(att_, layout));
            }
        }
        return out;
    }

    ForwardOutput forward(std::span<const std::size_t> items, Rng& rng, bool training) override
    {
        auto pass = run(items, rng, training);
        return {pass.logits, std::move(pass.kl_terms), std::move(pass.kl_entries)};
    }

    std::vector<NamedTensor> parameters() const override
    {
        std::vector<NamedTensor> out;
        for (std::size_t h = 0; h < weights_.heads.size(); ++h) {
            const auto base = "attention.head" + std::to_string(h);
            out.push_back({base + ".wq", weights_.heads[h].wq});
            out.push_back({base + ".wk", weights_.heads[h].wk});
            out.push_back({base + ".wv", weights_.heads[h].wv});
        }
        out.push_back({"output.w", out_w_});
        out.push_back({"output.b", out_b_});
        for (std::size_t h = 0; h < prior_.nets.size(); ++h) {
            const auto base = "prior.net" + std::to_string(h);
            out.push_back({base + ".w1", prior_.nets[h].w1});
            out.push_back({base + ".b1", prior_.nets[h].b1});
            out.push_back({base + ".w2", prior_.nets[h].w2});
            out.push_back({base + ".b2", prior_.nets[h].b2});
        }
        return out;
    }

    std::vector<Tensor> l2_parameters() const override
    {
        auto out = weights_.parameters();
        out.push_back(out_w_);
        return out;
    }

    std::span<const int> labels() const override { return labels_; }
    std::span<const std::size_t> train_items() const override { return train_; }
    std::span<const std::size_t> val_items() const override { return val_; }
    std::span<const std::size_t> test_items() const override { return test_; }
    std::size_t num_classes() const override { return data_->num_classes; }

    const AttentionConfig& attention_config() const { return att_; }
    const LayerPrior& prior() const { return prior_; }
    const SyntheticDataset& data() const { return *data_; }

    /// Block-diagonal pattern: row b covers columns b*n .. b*n+n-1.
    static Csr block_pattern(std::size_t batch, std::size_t n)
    {
        Csr c;
        c.num_rows = batch;
        c.num_cols = batch * n;
        c.row_ptr.resize(batch + 1);
        c.col.resize(batch * n);
        std::iota(c.col.begin(), c.col.end(), std::size_t{0});
        for (std::size_t i = 0; i <= batch; ++i) c.row_ptr[i] = i * n;
        return c;
    }

private:
    const SyntheticDataset* data_;
    SyntheticModelConfig cfg_;
    AttentionConfig att_;
    LayerWeights weights_;
    Tensor out_w_, out_b_;
    LayerPrior prior_;
    std::vector<int> labels_;
    std::vector<std::size_t> train_, val_, test_;
};

}  // namespace bam
