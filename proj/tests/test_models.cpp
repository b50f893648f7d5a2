#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "bam/models/gat.hpp"
#include "bam/models/synthetic.hpp"
#include "bam/models/tiny.hpp"
#include "test_util.hpp"

namespace {

using bam::AttentionMode;
using bam::Rng;
using bam::Tensor;
using namespace bam::testing;

bam::GraphDataset random_graph(std::size_t n, std::size_t f, std::size_t classes, std::uint64_t seed)
{
    Rng rng(seed);
    bam::GraphDataset g;
    g.name = "random";
    g.num_nodes = n;
    g.num_features = f;
    for (std::size_t i = 0; i < n * f; ++i) g.features.push_back(rng.bernoulli(0.3) ? rng.uniform() : 0.0);
    for (std::size_t i = 0; i < 2 * n; ++i) g.edges.emplace_back(rng.below(n), rng.below(n));
    for (std::size_t i = 0; i < n; ++i) {
        g.labels.push_back(static_cast<int>(i % classes));
        g.split.push_back(i % 3 == 0 ? bam::SplitTag::train : i % 3 == 1 ? bam::SplitTag::val : bam::SplitTag::test);
    }
    return g;
}

bam::GraphModelConfig small_gat(AttentionMode mode, bool sparse)
{
    bam::GraphModelConfig c;
    c.mode = mode;
    c.hidden_heads = 3;
    c.hidden_features = 4;
    c.output_heads = 2;
    c.dropout = 0.3;
    c.sparse = sparse;
    if (mode != AttentionMode::deterministic) {
        c.prior.kind = bam::PriorKind::contextual;
        c.prior.family = mode == AttentionMode::weibull ? bam::Family::gamma : bam::Family::lognormal;
        c.prior.beta = 1.0;
    }
    return c;
}

std::vector<std::size_t> all_nodes(std::size_t n)
{
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
}

TEST(Gat, DenseAndSparsePathsAgree)
{
    const auto g = random_graph(30, 10, 3, 1);
    for (auto mode : {AttentionMode::deterministic, AttentionMode::weibull, AttentionMode::lognormal}) {
        Rng i1(2), i2(2);
        bam::GatModel dense(g, small_gat(mode, false), i1);
        bam::GatModel sparse(g, small_gat(mode, true), i2);
        for (bool training : {false, true}) {
            Rng r1(3), r2(3);
            const auto a = dense.forward_all(r1, training);
            const auto b = sparse.forward_all(r2, training);
            EXPECT_LT(max_rel_error(a.logits.values(), b.logits.values(), 1.0), 1e-10);
            ASSERT_EQ(a.kl_terms.size(), b.kl_terms.size());
            for (std::size_t l = 0; l < a.kl_terms.size(); ++l) {
                EXPECT_NEAR(a.kl_terms[l].item(), b.kl_terms[l].item(), 1e-10 * std::fabs(a.kl_terms[l].item()));
            }
        }
    }
}

TEST(Gat, EvaluationMatchesDeterministicModel)
{
    const auto g = random_graph(30, 10, 3, 4);
    Rng i1(5), i2(5);
    bam::GatModel det(g, small_gat(AttentionMode::deterministic, true), i1);
    bam::GatModel bam_wc(g, small_gat(AttentionMode::weibull, true), i2);
    Rng r1(6), r2(7);
    const auto items = all_nodes(30);
    const auto a = det.forward(items, r1, false);
    const auto b = bam_wc.forward(items, r2, false);
    EXPECT_EQ(to_vec(a.logits.values()), to_vec(b.logits.values()));
    EXPECT_TRUE(b.kl_terms.empty());
}

TEST(Gat, ZeroAttentionVectorsAverageNeighbors)
{
    auto g = random_graph(12, 5, 2, 8);
    g.row_normalize = false;
    auto cfg = small_gat(AttentionMode::deterministic, true);
    cfg.dropout = 0;
    cfg.hidden_heads = 1;
    cfg.hidden_features = 5;
    Rng init(9);
    bam::GatModel model(g, cfg, init);
    for (auto p : model.parameters()) {
        if (p.name.find(".a_") != std::string::npos) std::ranges::fill(p.tensor.mutable_values(), 0.0);
        if (p.name == "layer1.head0.w") {
            auto v = p.tensor.mutable_values();
            for (std::size_t i = 0; i < 5; ++i)
                for (std::size_t j = 0; j < 5; ++j) v[i * 5 + j] = i == j ? 1.0 : 0.0;
        }
    }
    Rng rng(10);
    const auto pass = model.forward_all(rng, false);
    const auto& csr = model.pattern();
    const auto w = pass.layer1.samples[0].w.values();
    const auto out = pass.layer1.out.values();
    for (std::size_t i = 0; i < 12; ++i) {
        const auto deg = static_cast<double>(csr.row_ptr[i + 1] - csr.row_ptr[i]);
        for (std::size_t f = 0; f < 5; ++f) {
            double mean = 0;
            for (auto e = csr.row_ptr[i]; e < csr.row_ptr[i + 1]; ++e) {
                EXPECT_DOUBLE_EQ(w[e], 1.0 / deg);
                mean += g.features[csr.col[e] * 5 + f] / deg;
            }
            EXPECT_NEAR(out[i * 5 + f], mean, 1e-12);
        }
    }
}

TEST(Gat, AttentionRespectsNeighborhoods)
{
    const auto g = random_graph(20, 6, 3, 11);
    for (auto mode : {AttentionMode::deterministic, AttentionMode::weibull, AttentionMode::lognormal}) {
        Rng init(12);
        bam::GatModel model(g, small_gat(mode, false), init);
        const auto mask = model.pattern().to_mask();
        Rng rng(13);
        for (int rep = 0; rep < 5; ++rep) {
            const auto pass = model.forward_all(rng, true);
            for (const auto* layer : {&pass.layer1, &pass.layer2}) {
                for (const auto& s : layer->samples) {
                    const auto w = s.w.values();
                    for (std::size_t i = 0; i < 20; ++i) {
                        double row = 0;
                        for (std::size_t j = 0; j < 20; ++j) {
                            if (mask.allowed(i, j)) row += w[i * 20 + j];
                            else EXPECT_EQ(w[i * 20 + j], 0.0);
                        }
                        EXPECT_NEAR(row, 1.0, 1e-9);
                    }
                }
            }
        }
    }
}

TEST(Gat, PermutingNodesPermutesLogits)
{
    const auto g = random_graph(25, 7, 4, 14);
    std::vector<std::size_t> perm(25);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng shuffle(15);
    for (std::size_t i = 25; i > 1; --i) std::swap(perm[i - 1], perm[shuffle.below(i)]);
    const auto gp = bam::permute(g, perm);
    Rng i1(16), i2(16);
    bam::GatModel a(g, small_gat(AttentionMode::deterministic, true), i1);
    bam::GatModel b(gp, small_gat(AttentionMode::deterministic, true), i2);
    Rng r1(17), r2(18);
    const auto la = a.forward_all(r1, false).logits;
    const auto lb = b.forward_all(r2, false).logits;
    const std::size_t c = la.cols();
    for (std::size_t i = 0; i < 25; ++i)
        for (std::size_t k = 0; k < c; ++k) EXPECT_NEAR(la.at(i, k), lb.at(perm[i], k), 1e-12);
}

TEST(Gat, ParameterGroupsAndL2Coverage)
{
    const auto g = random_graph(10, 4, 2, 19);
    Rng init(20);
    bam::GatModel model(g, small_gat(AttentionMode::weibull, true), init);
    const auto params = model.parameters();
    std::size_t prior_params = 0;
    for (const auto& p : params)
        if (p.name.rfind("prior", 0) == 0) ++prior_params;
    EXPECT_EQ(prior_params, 4u * (3 + 2));
    // l2 covers the attention weights only
    EXPECT_EQ(model.l2_parameters().size(), 3u * 3 + 2u * 3);
}

TEST(Gat, IsolatedNodesAttendToThemselves)
{
    auto g = random_graph(6, 3, 2, 21);
    g.edges.clear();
    Rng init(22);
    bam::GatModel model(g, small_gat(AttentionMode::weibull, true), init);
    Rng rng(23);
    const auto pass = model.forward_all(rng, true);
    for (double w : pass.layer1.samples[0].w.values()) EXPECT_DOUBLE_EQ(w, 1.0);
}

// ---------------------------------------------------------------------------

bam::SyntheticParams small_synthetic()
{
    bam::SyntheticParams p;
    p.num_train = 300;
    p.num_val = 100;
    p.num_test = 100;
    return p;
}

TEST(Synthetic, GeneratorIsDeterministic)
{
    Rng a(1), b(1);
    const auto x = bam::generate_synthetic(small_synthetic(), a);
    const auto y = bam::generate_synthetic(small_synthetic(), b);
    ASSERT_EQ(x.instances.size(), 500u);
    for (std::size_t t = 0; t < 500; ++t) {
        EXPECT_EQ(x.instances[t].keys, y.instances[t].keys);
        EXPECT_EQ(x.instances[t].query, y.instances[t].query);
        EXPECT_EQ(x.instances[t].label, y.instances[t].label);
    }
}

TEST(Synthetic, LabelIsClassOfMarkedKey)
{
    Rng rng(2);
    const auto ds = bam::generate_synthetic(small_synthetic(), rng);
    for (const auto& in : ds.instances) {
        EXPECT_EQ(in.label, in.key_class[in.marked]);
        auto classes = in.key_class;
        std::ranges::sort(classes);
        for (std::size_t c = 0; c < classes.size(); ++c) EXPECT_EQ(classes[c], static_cast<int>(c));
    }
}

TEST(Synthetic, OracleAccuracyAtSignalExtremes)
{
    auto p = small_synthetic();
    p.num_train = 4000;
    p.signal = 1e3;
    Rng r1(3);
    const auto strong = bam::generate_synthetic(p, r1);
    EXPECT_DOUBLE_EQ(bam::oracle_accuracy(strong, strong.train_items()), 1.0);

    p.signal = 0;
    Rng r2(4);
    const auto none = bam::generate_synthetic(p, r2);
    const double acc = bam::oracle_accuracy(none, none.train_items());
    const double se = std::sqrt(0.125 * 0.875 / 4000);
    EXPECT_NEAR(acc, 0.125, 4 * se);
}

TEST(Synthetic, InvalidParametersRejected)
{
    auto p = small_synthetic();
    p.n = 1;
    Rng rng(5);
    EXPECT_THROW(bam::generate_synthetic(p, rng), bam::ParameterError);
}

TEST(Synthetic, SingleKeyGetsAllWeight)
{
    bam::SyntheticDataset ds;
    ds.params.n = 1;
    ds.params.d = 3;
    ds.params.num_train = ds.params.num_val = ds.params.num_test = 1;
    ds.num_classes = 2;
    for (int t = 0; t < 3; ++t) ds.instances.push_back({{0.5, -1.0, 2.0}, {1.0, 0.2, 0.1}, {0}, 0, 0});
    bam::SyntheticModelConfig cfg;
    cfg.mode = AttentionMode::lognormal;
    cfg.sigma = 0.7;
    cfg.d_att = 4;
    Rng init(6);
    bam::SyntheticModel model(ds, cfg, init);
    Rng rng(7);
    const std::vector<std::size_t> items{0, 1};
    const auto pass = model.run(items, rng, true);
    for (double w : pass.layer.samples[0].w.values()) EXPECT_DOUBLE_EQ(w, 1.0);
    const auto params = model.parameters();
    const Tensor key = Tensor({1, 3}, {0.5, -1.0, 2.0});
    const auto expected = bam::add(bam::matmul(bam::matmul(key, params[2].tensor), params[3].tensor), params[4].tensor);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(pass.logits.at(0, k), expected.at(0, k), 1e-12);
}

TEST(Synthetic, VanishingSigmaMatchesDeterministic)
{
    Rng gen(8);
    const auto ds = bam::generate_synthetic(small_synthetic(), gen);
    bam::SyntheticModelConfig det_cfg, ln_cfg;
    ln_cfg.mode = AttentionMode::lognormal;
    ln_cfg.sigma = 1e-8;
    Rng i1(9), i2(9);
    bam::SyntheticModel det(ds, det_cfg, i1);
    bam::SyntheticModel ln(ds, ln_cfg, i2);
    const auto items = ds.train_items();
    Rng r1(10), r2(11);
    const auto a = det.run(items, r1, true).logits;
    const auto b = ln.run(items, r2, true).logits;
    double worst = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
    EXPECT_LT(worst, 1e-6);
}

TEST(Synthetic, DeterministicModelLearnsTask)
{
    bam::SyntheticParams p;  // n = 8, d = 16, signal 3, 2000 / 500 / 500
    Rng gen(12);
    const auto ds = bam::generate_synthetic(p, gen);
    Rng init(13);
    bam::SyntheticModel model(ds, {}, init);
    bam::TrainConfig cfg;
    cfg.adam.lr = 0.01;
    cfg.batch_size = 100;
    cfg.max_epochs = 60;
    cfg.patience = 10;
    Rng rng(14);
    bam::train(model, cfg, 14, rng);
    EXPECT_GT(bam::evaluate(model, model.test_items(), rng).accuracy, 0.95);
}

// ---------------------------------------------------------------------------

TEST(Tiny, ObjectiveGradientMatchesFiniteDifferences)
{
    for (auto mode : {AttentionMode::weibull, AttentionMode::lognormal}) {
        bam::PriorConfig prior;
        prior.kind = bam::PriorKind::contextual;
        prior.family = mode == AttentionMode::weibull ? bam::Family::gamma : bam::Family::lognormal;
        prior.beta = 1.0;
        prior.d_mid = 2;
        Rng rng(15);
        bam::TinyModel model(mode, prior, rng);
        const auto noise = model.draw(rng);
        for (auto p : model.parameters()) {
            SCOPED_TRACE(p.name);
            // b2 shifts every prior logit equally, so its true gradient is zero and
            // the comparison needs a floor above finite-difference roundoff
            expect_grad_matches(p.tensor, [&] { return model.objective(noise, 0.8, 1e-3); }, 1e-4, 1e-5);
        }
    }
}

}  // namespace
