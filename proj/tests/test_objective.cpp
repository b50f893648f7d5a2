#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "bam/models/tiny.hpp"
#include "bam/objective.hpp"
#include "test_util.hpp"

namespace {

using bam::Rng;
using bam::Tensor;
using namespace bam::testing;

TEST(Anneal, Examples)
{
    EXPECT_DOUBLE_EQ(bam::anneal(0, 0.1), 0.5);
    EXPECT_NEAR(bam::anneal(10, 0.1), 0.7310585786300049, 1e-12);
    EXPECT_NEAR(bam::anneal(250, 0.1), 1.0, 1e-9);
    EXPECT_NEAR(bam::anneal(10, 0.1, 10), 0.5, 0);
    EXPECT_THROW(bam::anneal(1, 0.0), bam::ParameterError);
}

TEST(Loss, UniformLogitsGiveLogC)
{
    const auto logits = Tensor::zeros({4, 5});
    const std::vector<int> labels{0, 1, 2, 3};
    const std::vector<std::size_t> rows{0, 1, 2, 3};
    const auto l = bam::loss(logits, labels, rows, {}, 1.0, 0.0, {});
    EXPECT_NEAR(l.parts.nll, std::log(5.0), 1e-12);
    EXPECT_NEAR(l.parts.total, std::log(5.0), 1e-12);
}

TEST(Loss, DecompositionIsExact)
{
    Rng rng(1);
    const auto logits = random_tensor({3, 4}, rng, -2, 2, false);
    const auto w = random_tensor({2, 2}, rng, -1, 1);
    const std::vector<Tensor> kl{Tensor::scalar(0.7), Tensor::scalar(1.3)};
    const std::vector<int> labels{1, 0, 3};
    const std::vector<std::size_t> rows{0, 1, 2};
    const std::vector<Tensor> l2{w};
    const auto l = bam::loss(logits, labels, rows, kl, 0.25, 0.01, l2);
    double sq = 0;
    for (double v : w.values()) sq += v * v;
    EXPECT_EQ(l.parts.kl_per_layer.size(), 2u);
    EXPECT_DOUBLE_EQ(l.parts.l2, 0.01 * sq);
    EXPECT_NEAR(l.parts.total, l.parts.nll + 0.25 * 2.0 + 0.01 * sq, 1e-12);

    const auto zero = bam::loss(logits, labels, rows, kl, 0.0, 0.01, l2);
    EXPECT_NEAR(zero.parts.total, zero.parts.nll + 0.01 * sq, 1e-12);
}

TEST(Loss, ShapeMismatch)
{
    const auto logits = Tensor::zeros({2, 3});
    const std::vector<int> labels{0};
    const std::vector<std::size_t> rows{0, 1};
    EXPECT_THROW(bam::loss(logits, labels, rows, {}, 1, 0, {}), bam::DimensionError);
}

TEST(Loss, ZeroKlWeightLeavesPriorNetworkUntouched)
{
    Rng rng(2);
    bam::PriorConfig prior;
    prior.kind = bam::PriorKind::contextual;
    prior.family = bam::Family::gamma;
    bam::TinyModel model(bam::AttentionMode::weibull, prior, rng);
    const auto noise = model.draw(rng);
    for (auto p : model.parameters()) p.tensor.zero_grad();
    bam::backward(model.objective(noise, 0.0, 1e-3));
    for (const auto& p : model.parameters()) {
        if (p.name.rfind("prior", 0) != 0) continue;
        for (double g : p.tensor.grad()) EXPECT_EQ(g, 0.0) << p.name;
    }
}

TEST(Adam, ZeroGradientsLeaveParametersUnchanged)
{
    auto x = Tensor::vector({1.0, -2.0}, true);
    bam::backward(bam::scale(bam::sum(x), 0.0));
    bam::Adam adam({{"x", x}}, {});
    adam.step();
    EXPECT_EQ(to_vec(x.values()), (std::vector<double>{1.0, -2.0}));
    EXPECT_EQ(adam.steps(), 1u);
}

TEST(Adam, FirstStepMovesByLearningRate)
{
    auto x = Tensor::scalar(3.0, true);
    bam::AdamConfig cfg;
    cfg.lr = 0.001;
    bam::Adam adam({{"x", x}}, cfg);
    bam::backward(x);
    adam.step();
    EXPECT_NEAR(x.item(), 3.0 - 0.001, 1e-9);
}

TEST(Adam, QuadraticBowl)
{
    auto x = Tensor::scalar(5.0, true);
    bam::AdamConfig cfg;
    cfg.lr = 0.01;
    bam::Adam adam({{"x", x}}, cfg);
    for (int i = 0; i < 5000 && std::fabs(x.item()) >= 1e-3; ++i) {
        adam.zero_grad();
        bam::backward(bam::square(x));
        adam.step();
    }
    EXPECT_LT(std::fabs(x.item()), 1e-3);
}

TEST(Adam, NanGradientAborts)
{
    auto x = Tensor::scalar(-1.0, true);
    bam::Adam adam({{"x", x}}, {});
    bam::backward(bam::mul(x, Tensor::scalar(std::nan(""))));
    EXPECT_THROW(adam.step(), bam::DivergenceError);
    EXPECT_EQ(x.item(), -1.0);
    EXPECT_EQ(adam.steps(), 0u);
}

// Linearly separable points in the plane (margin 0.2 in a + b), classified by a linear map.
class SeparableTask : public bam::ClassificationTask
{
public:
    explicit SeparableTask(Rng& rng)
    {
        for (std::size_t i = 0; i < 60; ++i) {
            double a, b;
            do {
                a = rng.uniform() * 2 - 1;
                b = rng.uniform() * 2 - 1;
            } while (std::fabs(a + b) < 0.2);
            x_.push_back(a);
            x_.push_back(b);
            labels_.push_back((a + b > 0) != (i == 45) ? 1 : 0);  // one mislabeled val point
            (i < 40 ? train_ : i < 50 ? val_ : test_).push_back(i);
        }
        w_ = random_tensor({2, 2}, rng, -0.1, 0.1);
        b_ = Tensor::zeros({1, 2}, true);
    }

    bam::ForwardOutput forward(std::span<const std::size_t> items, Rng&, bool) override
    {
        std::vector<double> rows;
        for (auto i : items) {
            rows.push_back(x_[2 * i]);
            rows.push_back(x_[2 * i + 1]);
        }
        return {bam::add(bam::matmul(Tensor({items.size(), 2}, rows), w_), b_), {}};
    }
    std::vector<bam::NamedTensor> parameters() const override { return {{"w", w_}, {"b", b_}}; }
    std::vector<Tensor> l2_parameters() const override { return {w_}; }
    std::span<const int> labels() const override { return labels_; }
    std::span<const std::size_t> train_items() const override { return train_; }
    std::span<const std::size_t> val_items() const override { return val_; }
    std::span<const std::size_t> test_items() const override { return test_; }
    std::size_t num_classes() const override { return 2; }

private:
    std::vector<double> x_;
    std::vector<int> labels_;
    std::vector<std::size_t> train_, val_, test_;
    Tensor w_, b_;
};

TEST(Train, SeparableTaskReachesFullTrainAccuracy)
{
    Rng init(3);
    SeparableTask task(init);
    bam::TrainConfig cfg;
    cfg.adam.lr = 0.05;
    cfg.max_epochs = 200;
    cfg.patience = 200;
    Rng rng(4);
    const auto res = bam::train(task, cfg, 4, rng);
    double best = 0;
    for (const auto& r : res.history)
        if (r.split == "train") best = std::max(best, r.accuracy);
    EXPECT_DOUBLE_EQ(best, 1.0);
}

TEST(Train, IdenticalSeedsGiveIdenticalHistories)
{
    const auto run = [] {
        Rng init(5);
        SeparableTask task(init);
        bam::TrainConfig cfg;
        cfg.max_epochs = 30;
        cfg.batch_size = 8;
        Rng rng(6);
        return bam::train(task, cfg, 6, rng).history;
    };
    const auto a = run(), b = run();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].nll, b[i].nll);
        EXPECT_EQ(a[i].total, b[i].total);
        EXPECT_EQ(a[i].accuracy, b[i].accuracy);
        EXPECT_EQ(a[i].step, b[i].step);
    }
}

TEST(Train, KlWeightFollowsSchedule)
{
    Rng init(7);
    SeparableTask task(init);
    bam::TrainConfig cfg;
    cfg.max_epochs = 40;
    cfg.rho = 0.1;
    Rng rng(8);
    std::vector<double> weights;
    const auto res = bam::train(task, cfg, 8, rng, [&](const bam::MetricsRecord& r) {
        if (r.split == "train") weights.push_back(r.kl_weight);
    });
    ASSERT_EQ(weights.size(), res.epochs_run);
    // full batch: epoch e takes step e-1 -> e, with the weight set before the step
    for (std::size_t e = 0; e < weights.size(); ++e) {
        EXPECT_DOUBLE_EQ(weights[e], bam::sigmoid(static_cast<double>(e) * 0.1));
    }
}

TEST(Train, EarlyStoppingRestoresBestValidationParameters)
{
    Rng init(9);
    SeparableTask task(init);
    bam::TrainConfig cfg;
    cfg.adam.lr = 0.5;
    cfg.max_epochs = 300;
    cfg.patience = 10;
    Rng rng(10);
    const auto res = bam::train(task, cfg, 10, rng);
    EXPECT_LT(res.epochs_run, 300u);
    double best = INFINITY;
    for (const auto& r : res.history)
        if (r.split == "val") best = std::min(best, r.nll);
    EXPECT_EQ(res.best_val_nll, best);
    EXPECT_DOUBLE_EQ(bam::evaluate(task, task.val_items(), rng).nll, best);
}

// SeparableTask plus a constant KL term of 12 spread over `entries` latent weights.
class ConstantKlTask : public SeparableTask
{
public:
    ConstantKlTask(Rng& rng, std::vector<std::size_t> entries) : SeparableTask(rng), entries_(std::move(entries)) {}

    bam::ForwardOutput forward(std::span<const std::size_t> items, Rng& rng, bool training) override
    {
        auto out = SeparableTask::forward(items, rng, training);
        out.kl_terms = {Tensor::scalar(12.0)};
        out.kl_entries = entries_;
        return out;
    }

private:
    std::vector<std::size_t> entries_;
};

TEST(Train, KlScaleModes)
{
    const std::vector<std::size_t> batch{0, 1, 2};
    const auto kl_after_step = [&](bam::KlScale mode, std::vector<std::size_t> entries) {
        Rng init(11);
        ConstantKlTask task(init, std::move(entries));
        bam::TrainConfig cfg;
        cfg.kl_scale = mode;
        auto params = task.parameters();
        bam::Adam adam(params, cfg.adam);
        Rng rng(12);
        return bam::train_step(task, adam, batch, cfg, rng).kl();
    };
    EXPECT_DOUBLE_EQ(kl_after_step(bam::KlScale::sum, {4}), 12.0);
    EXPECT_DOUBLE_EQ(kl_after_step(bam::KlScale::per_instance, {4}), 4.0);
    EXPECT_DOUBLE_EQ(kl_after_step(bam::KlScale::per_entry, {4}), 3.0);
    EXPECT_THROW(kl_after_step(bam::KlScale::per_entry, {}), bam::DimensionError);
}

}  // namespace
