#pragma once

// Training objective, KL annealing, Adam, and the early-stopped training loop.
//
// Minimized objective per step:
//   nll + kl_weight * sum_l KL_l + l2_lambda * sum ||theta||^2
// with kl_weight = sigmoid((t - t0) * rho) at gradient step t.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bam/error.hpp"
#include "bam/ops.hpp"
#include "bam/rng.hpp"
#include "bam/special.hpp"

namespace bam {

inline double anneal(double t, double rho, double t0 = 0.0)
{
    if (!(rho > 0.0)) throw ParameterError("anneal: rho must be positive");
    return sigmoid((t - t0) * rho);
}

struct LossBreakdown
{
    double nll = 0.0;
    std::vector<double> kl_per_layer;
    double l2 = 0.0;  // l2_lambda * sum of squares
    double kl_weight = 0.0;
    double total = 0.0;

    double kl() const { return std::accumulate(kl_per_layer.begin(), kl_per_layer.end(), 0.0); }
};

struct Loss
{
    Tensor total;
    LossBreakdown parts;
};

/// Assembles the objective. KL terms are skipped entirely when kl_weight is
/// zero, so nothing upstream of them receives a gradient.
inline Loss loss(const Tensor& logits, std::span<const int> labels,
                 std::span<const std::size_t> rows, std::span<const Tensor> kl_terms,
                 double kl_weight, double l2_lambda, std::span<const Tensor> l2_params)
{
    Loss out;
    const Tensor nll = cross_entropy(logits, labels, rows);
    out.parts.nll = nll.item();
    out.parts.kl_weight = kl_weight;
    Tensor total = nll;
    if (!kl_terms.empty()) {
        Tensor kl_sum;
        for (const auto& k : kl_terms) {
            out.parts.kl_per_layer.push_back(k.item());
            kl_sum = kl_sum.defined() ? add(kl_sum, k) : k;
        }
        if (kl_weight != 0.0) total = add(total, scale(kl_sum, kl_weight));
    }
    if (l2_lambda != 0.0 && !l2_params.empty()) {
        Tensor sq;
        for (const auto& p : l2_params) {
            const Tensor s = sum(square(p));
            sq = sq.defined() ? add(sq, s) : s;
        }
        const Tensor l2 = scale(sq, l2_lambda);
        out.parts.l2 = l2.item();
        total = add(total, l2);
    }
    out.total = total;
    out.parts.total = total.item();
    return out;
}

struct NamedTensor
{
    std::string name;
    Tensor tensor;
};

struct AdamConfig
{
    double lr = 0.005;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed parameter list.
class Adam
{
public:
    Adam(std::vector<NamedTensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg)
    {
        for (const auto& p : params_) {
            m_.emplace_back(p.tensor.numel(), 0.0);
            v_.emplace_back(p.tensor.numel(), 0.0);
        }
    }

    /// Applies one update from the accumulated gradients. A NaN gradient
    /// aborts before any parameter is touched.
    void step()
    {
        for (const auto& p : params_) {
            for (double g : p.tensor.grad()) {
                if (std::isnan(g)) {
                    throw DivergenceError("NaN gradient in parameter '" + p.name + "' at step " +
                                          std::to_string(t_ + 1));
                }
            }
        }
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].tensor;
            const auto g = p.grad();
            if (g.empty()) continue;
            auto x = p.mutable_values();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < x.size(); ++j) {
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
                x[j] -= cfg_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
            }
        }
    }

    void zero_grad()
    {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    std::size_t steps() const { return t_; }
    const std::vector<NamedTensor>& parameters() const { return params_; }

private:
    std::vector<NamedTensor> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Tasks and the training loop

struct ForwardOutput
{
    Tensor logits;                // one row per requested item
    std::vector<Tensor> kl_terms;  // one per layer that carries a KL term
    std::vector<std::size_t> kl_entries;  // latent weights behind each KL term
};

/// A supervised classification problem the training loop can drive.
/// Items are instance ids (nodes of a graph, or synthetic instances).
class ClassificationTask
{
public:
    virtual ~ClassificationTask() = default;

    /// training = sampled attention and active dropout; otherwise the
    /// posterior-mean (deterministic) forward pass.
    virtual ForwardOutput forward(std::span<const std::size_t> items, Rng& rng, bool training) = 0;

    virtual std::vector<NamedTensor> parameters() const = 0;
    /// Tensors that receive the L2 penalty.
    virtual std::vector<Tensor> l2_parameters() const = 0;

    virtual std::span<const int> labels() const = 0;  // indexed by item id
    virtual std::span<const std::size_t> train_items() const = 0;
    virtual std::span<const std::size_t> val_items() const = 0;
    virtual std::span<const std::size_t> test_items() const = 0;
    virtual std::size_t num_classes() const = 0;
};

/// per_instance divides the summed KL by the number of instances in the
/// batch, matching the per-instance mean of the nll; per_entry divides each
/// layer's KL by its number of latent attention weights; sum keeps it whole.
enum class KlScale { per_instance, per_entry, sum };

struct TrainConfig
{
    AdamConfig adam;
    KlScale kl_scale = KlScale::per_instance;
    double l2_lambda = 0.0;
    double rho = 0.1;
    double t0 = 0.0;
    std::size_t max_epochs = 1000;
    std::size_t patience = 100;
    std::size_t batch_size = 0;  // 0: full batch, one step per epoch
};

struct MetricsRecord
{
    std::uint64_t seed = 0;
    std::size_t epoch = 0;
    std::size_t step = 0;  // gradient steps taken when the record was made
    std::string split;
    double nll = 0.0;
    double kl = 0.0;
    double l2 = 0.0;
    double total = 0.0;
    double kl_weight = 0.0;
    double accuracy = 0.0;
    std::optional<double> pavpu;
};

struct EvalResult
{
    double nll = 0.0;
    double accuracy = 0.0;
    std::vector<int> predictions;
};

inline std::vector<int> argmax_rows(const Tensor& logits)
{
    const std::size_t c = logits.cols();
    const auto v = logits.values();
    std::vector<int> out(logits.rows());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<int>(std::max_element(&v[i * c], &v[i * c] + c) - &v[i * c]);
    }
    return out;
}

/// Point-estimate evaluation (expectation substitution, no dropout).
inline EvalResult evaluate(ClassificationTask& task, std::span<const std::size_t> items, Rng& rng)
{
    EvalResult r;
    const auto fwd = task.forward(items, rng, false);
    std::vector<int> lab(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) lab[i] = task.labels()[items[i]];
    std::vector<std::size_t> rows(items.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    r.nll = cross_entropy(fwd.logits.detach(), lab, rows).item();
    r.predictions = argmax_rows(fwd.logits);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < items.size(); ++i) correct += r.predictions[i] == lab[i];
    r.accuracy = static_cast<double>(correct) / static_cast<double>(items.size());
    return r;
}

using ParameterSnapshot = std::vector<std::vector<double>>;

inline ParameterSnapshot snapshot(const std::vector<NamedTensor>& params)
{
    ParameterSnapshot s;
    for (const auto& p : params) s.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
    return s;
}

inline void restore(std::vector<NamedTensor>& params, const ParameterSnapshot& s)
{
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto v = params[i].tensor.mutable_values();
        std::copy(s[i].begin(), s[i].end(), v.begin());
    }
}

struct TrainResult
{
    std::vector<MetricsRecord> history;
    std::size_t best_epoch = 0;
    double best_val_nll = std::numeric_limits<double>::infinity();
    std::size_t epochs_run = 0;
    std::size_t steps = 0;
};

/// One step on one batch: sample, forward, loss, backward, Adam.
inline LossBreakdown train_step(ClassificationTask& task, Adam& adam,
                                std::span<const std::size_t> batch, const TrainConfig& cfg, Rng& rng)
{
    const double kl_weight = anneal(static_cast<double>(adam.steps()), cfg.rho, cfg.t0);
    const auto fwd = task.forward(batch, rng, true);
    std::vector<int> lab(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) lab[i] = task.labels()[batch[i]];
    std::vector<std::size_t> rows(batch.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    std::vector<Tensor> kl_terms = fwd.kl_terms;
    if (cfg.kl_scale == KlScale::per_instance) {
        for (auto& k : kl_terms) k = scale(k, 1.0 / static_cast<double>(batch.size()));
    } else if (cfg.kl_scale == KlScale::per_entry) {
        if (fwd.kl_entries.size() != kl_terms.size()) {
            throw DimensionError("train_step: per_entry KL scaling needs an entry count per KL term");
        }
        for (std::size_t l = 0; l < kl_terms.size(); ++l) {
            kl_terms[l] = scale(kl_terms[l], 1.0 / static_cast<double>(fwd.kl_entries[l]));
        }
    }
    const auto l2 = task.l2_parameters();
    const auto obj = loss(fwd.logits, lab, rows, kl_terms, kl_weight, cfg.l2_lambda, l2);
    adam.zero_grad();
    backward(obj.total);
    adam.step();
    return obj.parts;
}

/// Trains until neither validation loss nor validation accuracy has improved
/// for `patience` epochs, then restores the parameters with the lowest
/// validation loss. `on_record` sees every record as soon as it exists;
/// `on_step` gets the wall time of each gradient step.
inline TrainResult train(ClassificationTask& task, const TrainConfig& cfg, std::uint64_t seed, Rng& rng,
                         const std::function<void(const MetricsRecord&)>& on_record = {},
                         const std::function<void(std::size_t step, double wall_ms)>& on_step = {})
{
    auto params = task.parameters();
    Adam adam(params, cfg.adam);
    TrainResult res;
    ParameterSnapshot best = snapshot(params);
    double best_acc = -1.0;
    std::size_t waited = 0;

    const auto emit = [&](MetricsRecord rec) {
        rec.seed = seed;
        if (on_record) on_record(rec);
        res.history.push_back(std::move(rec));
    };

    std::vector<std::size_t> order(task.train_items().begin(), task.train_items().end());
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const std::size_t bs = cfg.batch_size == 0 ? order.size() : std::min(cfg.batch_size, order.size());
        if (cfg.batch_size != 0) {
            for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        }
        MetricsRecord tr;
        tr.epoch = epoch;
        tr.split = "train";
        std::size_t batches = 0;
        for (std::size_t b = 0; b < order.size(); b += bs) {
            const std::span<const std::size_t> batch(order.data() + b, std::min(bs, order.size() - b));
            const auto start = std::chrono::steady_clock::now();
            const auto parts = train_step(task, adam, batch, cfg, rng);
            if (on_step) {
                const std::chrono::duration<double, std::milli> ms = std::chrono::steady_clock::now() - start;
                on_step(adam.steps(), ms.count());
            }
            tr.nll += parts.nll;
            tr.kl += parts.kl();
            tr.l2 += parts.l2;
            tr.total += parts.total;
            tr.kl_weight = parts.kl_weight;
            ++batches;
        }
        tr.nll /= batches;
        tr.kl /= batches;
        tr.l2 /= batches;
        tr.total /= batches;
        tr.step = adam.steps();
        tr.accuracy = evaluate(task, task.train_items(), rng).accuracy;
        emit(tr);

        const auto val = evaluate(task, task.val_items(), rng);
        MetricsRecord vr;
        vr.epoch = epoch;
        vr.step = adam.steps();
        vr.split = "val";
        vr.nll = val.nll;
        vr.total = val.nll;
        vr.kl_weight = tr.kl_weight;
        vr.accuracy = val.accuracy;
        emit(vr);
        res.epochs_run = epoch;

        bool improved = false;
        if (val.nll < res.best_val_nll) {
            res.best_val_nll = val.nll;
            res.best_epoch = epoch;
            best = snapshot(params);
            improved = true;
        }
        if (val.accuracy > best_acc) {
            best_acc = val.accuracy;
            improved = true;
        }
        waited = improved ? 0 : waited + 1;
        if (waited >= cfg.patience) break;
    }
    restore(params, best);
    res.steps = adam.steps();
    return res;
}

}  // namespace bam
