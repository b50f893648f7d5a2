#pragma once

// Two-layer graph attention network for transductive node classification,
// with optional Bayesian attention in both layers.
//
//   x  = dropout(X)
//   h  = ELU(concat_h attention_h(x) + b1)          hidden heads
//   h  = dropout(h)
//   y  = mean_h attention_h(h) + b2                  output heads
//
// Attention uses additive LeakyReLU scores over each node's neighbors plus
// itself, with dropout on the normalized coefficients.

#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "bam/attention.hpp"
#include "bam/graph.hpp"
#include "bam/objective.hpp"
#include "bam/prior.hpp"

namespace bam {

struct GraphModelConfig
{
    AttentionMode mode = AttentionMode::deterministic;
    double k = 1.0;
    double sigma = 1.0;
    std::size_t hidden_heads = 8;
    std::size_t hidden_features = 8;
    std::size_t output_heads = 1;
    HeadCombine output_combine = HeadCombine::mean;
    double dropout = 0.6;
    double leaky_slope = 0.2;
    PriorConfig prior;
    bool sparse = true;
};

class GatModel : public ClassificationTask
{
public:
    GatModel(const GraphDataset& data, const GraphModelConfig& cfg, Rng& init_rng)
        : cfg_(cfg), x_(model_features(data)), labels_(data.labels), pattern_(attention_pattern(data)),
          mask_(pattern_.to_mask()), sparse_(pattern_), train_(data.nodes_in(SplitTag::train)),
          val_(data.nodes_in(SplitTag::val)), test_(data.nodes_in(SplitTag::test)),
          classes_(data.num_classes())
    {
        if (!cfg.sparse) {
            dense_ = DenseLayout{data.num_nodes, data.num_nodes, &mask_};
        }
        att1_ = layer_config(cfg.hidden_heads, cfg.hidden_features, HeadCombine::concat);
        att2_ = layer_config(cfg.output_heads, classes_, cfg.output_combine);
        cfg.prior.validate();
        check_pairing(att1_, cfg.prior);
        const std::size_t hidden = cfg.hidden_heads * cfg.hidden_features;
        w1_ = init_layer(att1_, data.num_features, data.num_features, init_rng, true);
        w2_ = init_layer(att2_, hidden, hidden, init_rng, true);
        b1_ = Tensor::zeros({1, hidden}, true);
        b2_ = Tensor::zeros({1, classes_}, true);
        if (att1_.stochastic() && cfg.prior.kind == PriorKind::contextual) {
            prior1_ = LayerPrior::init(cfg.prior, att1_, init_rng);
            prior2_ = LayerPrior::init(cfg.prior, att2_, init_rng);
        }
    }

    GatModel(const GatModel&) = delete;
    GatModel& operator=(const GatModel&) = delete;

    struct Pass
    {
        Tensor logits;  // all nodes
        std::vector<Tensor> kl_terms;
        std::vector<std::size_t> kl_entries;
        LayerResult layer1, layer2;
    };

    /// Full forward pass over every node. Random draws in order: input
    /// dropout, layer 1 heads, hidden dropout, layer 2 heads.
    Pass forward_all(Rng& rng, bool training, bool with_kl = true) const
    {
        return cfg_.sparse ? run(sparse_, rng, training, with_kl) : run(dense_, rng, training, with_kl);
    }

    ForwardOutput forward(std::span<const std::size_t> items, Rng& rng, bool training) override
    {
        ForwardOutput out;
        if (training) {
            auto pass = forward_all(rng, true);
            out.logits = gather_rows(pass.logits, items);
            out.kl_terms = std::move(pass.kl_terms);
            out.kl_entries = std::move(pass.kl_entries);
            return out;
        }
        // evaluation is deterministic; reuse it until a parameter changes
        const auto fp = fingerprint();
        if (!cached_.defined() || fp != cached_fp_) {
            cached_ = forward_all(rng, false, false).logits.detach();
            cached_fp_ = fp;
        }
        out.logits = gather_rows(cached_, items);
        return out;
    }

    std::vector<NamedTensor> parameters() const override
    {
        std::vector<NamedTensor> out;
        add_layer(out, "layer1", w1_);
        out.push_back({"layer1.bias", b1_});
        add_layer(out, "layer2", w2_);
        out.push_back({"layer2.bias", b2_});
        add_prior(out, "prior1", prior1_);
        add_prior(out, "prior2", prior2_);
        return out;
    }

    std::vector<Tensor> l2_parameters() const override
    {
        auto out = w1_.parameters();
        for (const auto& t : w2_.parameters()) out.push_back(t);
        return out;
    }

    std::span<const int> labels() const override { return labels_; }
    std::span<const std::size_t> train_items() const override { return train_; }
    std::span<const std::size_t> val_items() const override { return val_; }
    std::span<const std::size_t> test_items() const override { return test_; }
    std::size_t num_classes() const override { return classes_; }

    const Csr& pattern() const { return pattern_; }
    const AttentionConfig& layer_config(std::size_t layer) const { return layer == 0 ? att1_ : att2_; }
    const LayerPrior& layer_prior(std::size_t layer) const { return layer == 0 ? prior1_ : prior2_; }
    const GraphModelConfig& config() const { return cfg_; }

private:
    AttentionConfig layer_config(std::size_t heads, std::size_t width, HeadCombine combine) const
    {
        AttentionConfig a;
        a.mode = cfg_.mode;
        a.k = cfg_.k;
        a.sigma = cfg_.sigma;
        a.heads = heads;
        a.score_fn = ScoreFn::additive_leakyrelu;
        a.d_k = width;
        a.d_v = width;
        a.leaky_slope = cfg_.leaky_slope;
        a.coef_dropout = cfg_.dropout;
        a.combine = combine;
        a.validate();
        return a;
    }

    template <AttentionLayout Layout>
    Pass run(const Layout& layout, Rng& rng, bool training, bool with_kl) const
    {
        Pass p;
        const Tensor x = dropout(x_, cfg_.dropout, rng, training);
        p.layer1 = multi_head_layer(x, x, w1_, att1_, layout, rng, training);
        Tensor h = elu(add(p.layer1.out, b1_));
        h = dropout(h, cfg_.dropout, rng, training);
        p.layer2 = multi_head_layer(h, h, w2_, att2_, layout, rng, training);
        p.logits = add(p.layer2.out, b2_);
        if (training && with_kl) {
            if (auto kl = layer_kl_total(p.layer1, att1_, cfg_.prior, prior1_, layout)) {
                p.kl_terms.push_back(*kl);
                p.kl_entries.push_back(layer_kl_entries(att1_, layout));
            }
            if (auto kl = layer_kl_total(p.layer2, att2_, cfg_.prior, prior2_, layout)) {
                p.kl_terms.push_back(*kl);
                p.kl_entries.push_back(layer_kl_entries(att2_, layout));
            }
        }
        return p;
    }

    static void add_layer(std::vector<NamedTensor>& out, const std::string& prefix, const LayerWeights& lw)
    {
        for (std::size_t h = 0; h < lw.heads.size(); ++h) {
            const auto base = prefix + ".head" + std::to_string(h);
            out.push_back({base + ".w", lw.heads[h].wq});
            out.push_back({base + ".a_dst", lw.heads[h].a_q});
            out.push_back({base + ".a_src", lw.heads[h].a_k});
        }
    }

    static void add_prior(std::vector<NamedTensor>& out, const std::string& prefix, const LayerPrior& lp)
    {
        for (std::size_t h = 0; h < lp.nets.size(); ++h) {
            const auto base = prefix + ".net" + std::to_string(h);
            out.push_back({base + ".w1", lp.nets[h].w1});
            out.push_back({base + ".b1", lp.nets[h].b1});
            out.push_back({base + ".w2", lp.nets[h].w2});
            out.push_back({base + ".b2", lp.nets[h].b2});
        }
    }

    // FNV-1a over the bytes of every parameter value.
    std::uint64_t fingerprint() const
    {
        std::uint64_t h = 1469598103934665603ULL;
        for (const auto& p : parameters()) {
            for (double v : p.tensor.values()) {
                std::uint64_t bits;
                std::memcpy(&bits, &v, sizeof bits);
                h = (h ^ bits) * 1099511628211ULL;
            }
        }
        return h;
    }

    GraphModelConfig cfg_;
    Tensor x_;
    std::vector<int> labels_;
    Csr pattern_;
    Mask mask_;
    SparseLayout sparse_;
    DenseLayout dense_;
    std::vector<std::size_t> train_, val_, test_;
    std::size_t classes_;
    AttentionConfig att1_, att2_;
    LayerWeights w1_, w2_;
    Tensor b1_, b2_;
    LayerPrior prior1_, prior2_;
    Tensor cached_;
    std::uint64_t cached_fp_ = 0;
};

}  // namespace bam
