#pragma once

// Small two-layer, two-head model with a contextual prior in both layers,
// sized for finite-difference checks and estimator-variance experiments.
//
//   layer 1: the 5 keys self-attend           H = 2, d_k = d_v = 4, ELU
//   layer 2: the 3 queries attend over them   H = 2, d_k = d_v = 4
//   logits = layer2 * W_out + b_out            3 classes

#include <vector>

#include "bam/attention.hpp"
#include "bam/objective.hpp"
#include "bam/prior.hpp"

namespace bam {

class TinyModel
{
public:
    static constexpr std::size_t m = 3;
    static constexpr std::size_t n = 5;
    static constexpr std::size_t d_in = 4;
    static constexpr std::size_t width = 4;
    static constexpr std::size_t heads = 2;
    static constexpr std::size_t classes = 3;

    TinyModel(AttentionMode mode, const PriorConfig& prior, Rng& rng) : prior_cfg_(prior)
    {
        att_.mode = mode;
        att_.k = 1.5;
        att_.sigma = 0.5;
        att_.heads = heads;
        att_.d_k = width;
        att_.d_v = width;
        att_.validate();
        prior.validate();
        check_pairing(att_, prior);
        x_q_ = uniform({m, d_in}, rng);
        x_kv_ = uniform({n, d_in}, rng);
        labels_ = {0, 2, 1};
        w1_ = init_layer(att_, d_in, d_in, rng);
        w2_ = init_layer(att_, d_in, heads * width, rng);
        out_w_ = glorot(heads * width, classes, rng);
        out_b_ = uniform({1, classes}, rng).clone_as_parameter();
        prior1_ = LayerPrior::init(prior, att_, rng);
        prior2_ = LayerPrior::init(prior, att_, rng);
    }

    struct Pass
    {
        Tensor logits;
        std::vector<Tensor> kl_terms;
        LayerResult layer1, layer2;
    };

    /// noise[l][h] fixes the draws of layer l, head h; null draws from rng.
    Pass forward(Rng& rng, bool training, const std::vector<LayerNoise>* noise = nullptr) const
    {
        Pass p;
        const DenseLayout self{n, n, nullptr}, cross{m, n, nullptr};
        p.layer1 = multi_head_layer(x_kv_, x_kv_, w1_, att_, self, rng, training, noise ? &(*noise)[0] : nullptr);
        const Tensor h = elu(p.layer1.out);
        p.layer2 = multi_head_layer(x_q_, h, w2_, att_, cross, rng, training, noise ? &(*noise)[1] : nullptr);
        p.logits = add(matmul(p.layer2.out, out_w_), out_b_);
        if (training) {
            if (auto kl = layer_kl_total(p.layer1, att_, prior_cfg_, prior1_, self)) p.kl_terms.push_back(*kl);
            if (auto kl = layer_kl_total(p.layer2, att_, prior_cfg_, prior2_, cross)) p.kl_terms.push_back(*kl);
        }
        return p;
    }

    /// Full objective at fixed noise.
    Tensor objective(const std::vector<LayerNoise>& noise, double kl_weight, double l2_lambda) const
    {
        Rng unused(0);
        const auto p = forward(unused, true, &noise);
        const std::vector<std::size_t> rows{0, 1, 2};
        const auto l2 = l2_parameters();
        return loss(p.logits, labels_, rows, p.kl_terms, kl_weight, l2_lambda, l2).total;
    }

    /// One noise vector per layer and head, drawn in forward-pass order.
    std::vector<LayerNoise> draw(Rng& rng) const
    {
        std::vector<LayerNoise> out(2);
        for (std::size_t h = 0; h < heads; ++h) out[0].push_back(draw_noise(att_.mode, n * n, rng));
        for (std::size_t h = 0; h < heads; ++h) out[1].push_back(draw_noise(att_.mode, m * n, rng));
        return out;
    }

    std::vector<NamedTensor> parameters() const
    {
        std::vector<NamedTensor> out;
        add_layer(out, "layer1", w1_);
        add_layer(out, "layer2", w2_);
        out.push_back({"output.w", out_w_});
        out.push_back({"output.b", out_b_});
        add_prior(out, "prior1", prior1_);
        add_prior(out, "prior2", prior2_);
        return out;
    }

    std::vector<Tensor> l2_parameters() const
    {
        auto out = w1_.parameters();
        for (const auto& t : w2_.parameters()) out.push_back(t);
        out.push_back(out_w_);
        return out;
    }

    const AttentionConfig& attention_config() const { return att_; }
    const PriorConfig& prior_config() const { return prior_cfg_; }
    const LayerPrior& layer_prior(std::size_t l) const { return l == 0 ? prior1_ : prior2_; }

private:
    static Tensor uniform(Shape shape, Rng& rng)
    {
        std::vector<double> v(shape_numel(shape));
        for (auto& x : v) x = rng.uniform() * 2.0 - 1.0;
        return Tensor(std::move(shape), std::move(v));
    }

    static void add_layer(std::vector<NamedTensor>& out, const std::string& prefix, const LayerWeights& lw)
    {
        for (std::size_t h = 0; h < lw.heads.size(); ++h) {
            const auto base = prefix + ".head" + std::to_string(h);
            out.push_back({base + ".wq", lw.heads[h].wq});
            out.push_back({base + ".wk", lw.heads[h].wk});
            out.push_back({base + ".wv", lw.heads[h].wv});
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

    AttentionConfig att_;
    PriorConfig prior_cfg_;
    Tensor x_q_, x_kv_;
    std::vector<int> labels_;
    LayerWeights w1_, w2_;
    Tensor out_w_, out_b_;
    LayerPrior prior1_, prior2_;
};

}  // namespace bam
