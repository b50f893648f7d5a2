#pragma once

// Oracle suites run by `bam verify`: closed-form KL against quadrature,
// objective gradients against finite differences, the deterministic limit,
// and the layer-wise (semi-analytic) KL estimator.

#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "bam/distributions.hpp"
#include "bam/format.hpp"
#include "bam/models/gat.hpp"
#include "bam/models/synthetic.hpp"
#include "bam/models/tiny.hpp"
#include "bam/quadrature.hpp"

namespace bam {

struct Check
{
    std::string suite;
    std::string name;
    double measured = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

struct VerifyReport
{
    std::vector<Check> checks;

    /// Passes when measured <= tolerance.
    void add(const std::string& suite, const std::string& name, double measured, double tolerance)
    {
        checks.push_back({suite, name, measured, tolerance, measured <= tolerance});
    }

    void append(const VerifyReport& other)
    {
        checks.insert(checks.end(), other.checks.begin(), other.checks.end());
    }

    bool ok() const
    {
        for (const auto& c : checks)
            if (!c.passed) return false;
        return !checks.empty();
    }

    std::size_t failures() const
    {
        std::size_t n = 0;
        for (const auto& c : checks) n += !c.passed;
        return n;
    }

    /// One line per check: suite, name, measured, tolerance, PASS/FAIL.
    void print(std::ostream& os) const
    {
        for (const auto& c : checks) {
            os << c.suite << '\t' << c.name << '\t' << format_double(c.measured) << '\t'
               << format_double(c.tolerance) << '\t' << (c.passed ? "PASS" : "FAIL") << '\n';
        }
    }
};

namespace detail {

inline std::string params_str(std::initializer_list<std::pair<const char*, double>> kv)
{
    std::string s;
    for (const auto& [k, v] : kv) {
        if (!s.empty()) s += ' ';
        s += k;
        s += '=';
        append_double(s, v);
    }
    return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// Weibull-gamma on the 4x3x3x3 grid (relative error, with the denominator
/// floored at 1e-3 where the divergence itself vanishes) and
/// lognormal-lognormal on 60 random parameter sets.
inline VerifyReport verify_kl()
{
    VerifyReport r;
    for (double k : {0.5, 1.0, 2.0, 5.0})
        for (double lambda : {0.1, 1.0, 10.0})
            for (double alpha : {0.5, 1.0, 2.0})
                for (double beta : {0.5, 1.0, 2.0}) {
                    const double formula = kl_weibull_gamma(k, lambda, alpha, beta);
                    const double quad = quadrature::kl_weibull_gamma_quadrature(k, lambda, alpha, beta);
                    r.add("kl", "weibull-gamma " + detail::params_str({{"k", k}, {"lambda", lambda}, {"alpha", alpha}, {"beta", beta}}),
                          std::fabs(formula - quad) / std::max(std::fabs(quad), 1e-3), 1e-5);
                }
    Rng rng(20240601);
    for (int i = 0; i < 60; ++i) {
        const double mu1 = -2.0 + 4.0 * rng.uniform();
        const double mu2 = -2.0 + 4.0 * rng.uniform();
        const double s1 = 0.1 + 2.0 * rng.uniform();
        const double s2 = 0.1 + 2.0 * rng.uniform();
        const double formula = kl_lognormal_lognormal(mu1, s1, mu2, s2);
        const double quad = quadrature::kl_lognormal_quadrature(mu1, s1, mu2, s2);
        r.add("kl", "lognormal " + detail::params_str({{"mu1", mu1}, {"sigma1", s1}, {"mu2", mu2}, {"sigma2", s2}}),
              std::fabs(formula - quad) / std::fabs(quad), 1e-6);
    }
    return r;
}

// ---------------------------------------------------------------------------

/// Every parameter group of the full objective on the tiny two-layer model
/// at fixed noise, against central differences (h = 1e-5). Relative errors
/// use max(|analytic|, |numeric|, 1e-5) as denominator.
inline VerifyReport verify_grad()
{
    VerifyReport r;
    for (auto mode : {AttentionMode::weibull, AttentionMode::lognormal}) {
        PriorConfig prior;
        prior.kind = PriorKind::contextual;
        prior.family = mode == AttentionMode::weibull ? Family::gamma : Family::lognormal;
        prior.beta = 1.0;
        prior.d_mid = 2;
        Rng rng(31);
        TinyModel model(mode, prior, rng);
        const auto noise = model.draw(rng);
        const auto f = [&] { return model.objective(noise, 0.8, 1e-3); };
        auto params = model.parameters();
        for (auto& p : params) p.tensor.zero_grad();
        backward(f());
        for (auto& p : params) {
            const std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
            auto v = p.tensor.mutable_values();
            double worst = 0.0;
            for (std::size_t i = 0; i < v.size(); ++i) {
                const double orig = v[i], h = 1e-5;
                v[i] = orig + h;
                const double up = f().item();
                v[i] = orig - h;
                const double down = f().item();
                v[i] = orig;
                const double numeric = (up - down) / (2.0 * h);
                const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-5});
                worst = std::max(worst, std::fabs(analytic[i] - numeric) / denom);
            }
            r.add("grad", std::string(to_string(mode)) + " " + p.name, worst, 1e-4);
        }
    }
    return r;
}

// ---------------------------------------------------------------------------

inline double max_abs_diff(const Tensor& a, const Tensor& b)
{
    if (a.shape() != b.shape()) return INFINITY;
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
    return worst;
}

/// Lognormal attention at sigma = 1e-8 against deterministic attention, and
/// evaluation-mode stochastic attention against the deterministic map
/// (required to be bit-identical, i.e. tolerance 0).
inline VerifyReport verify_limit()
{
    VerifyReport r;
    Rng rng(41);
    const auto random = [&](Shape shape) {
        std::vector<double> v(shape_numel(shape));
        for (auto& x : v) x = rng.uniform() * 4.0 - 2.0;
        return Tensor(std::move(shape), std::move(v));
    };
    const Tensor phi = random({6, 7}), v = random({7, 3});
    auto mask = Mask::all(6, 7);
    for (std::size_t i = 0; i < 6; ++i) mask.set(i, (i * 3) % 7, false);
    const auto det = deterministic_attention(phi, v, &mask);

    AttentionConfig ln;
    ln.mode = AttentionMode::lognormal;
    ln.sigma = 1e-8;
    const auto tiny_sigma = stochastic_attention(phi, v, ln, draw_noise(ln.mode, mask.count(), rng), &mask, true);
    r.add("limit", "lognormal sigma=1e-8 attention output", max_abs_diff(tiny_sigma.out, det.out), 1e-6);

    for (auto mode : {AttentionMode::weibull, AttentionMode::lognormal}) {
        AttentionConfig c;
        c.mode = mode;
        c.k = 0.7;
        c.sigma = 1.3;
        const auto e = stochastic_attention(phi, v, c, {}, &mask, false);
        r.add("limit", std::string(to_string(mode)) + " evaluation vs deterministic attention",
              max_abs_diff(e.out, det.out), 0.0);
    }

    SyntheticParams sp;
    sp.num_train = 200;
    sp.num_val = 50;
    sp.num_test = 50;
    Rng gen(42);
    const auto ds = generate_synthetic(sp, gen);
    SyntheticModelConfig det_cfg, ln_cfg;
    ln_cfg.mode = AttentionMode::lognormal;
    ln_cfg.sigma = 1e-8;
    Rng i1(43), i2(43);
    SyntheticModel det_model(ds, det_cfg, i1), ln_model(ds, ln_cfg, i2);
    const auto items = ds.train_items();
    Rng r1(44), r2(45);
    r.add("limit", "synthetic model lognormal sigma=1e-8 logits",
          max_abs_diff(det_model.run(items, r1, true).logits, ln_model.run(items, r2, true).logits), 1e-6);

    PlantedPartitionParams gp;
    gp.nodes = 120;
    gp.classes = 3;
    gp.features = 30;
    gp.val = 30;
    gp.test = 30;
    Rng ggen(46);
    const auto graph = planted_partition(gp, ggen);
    for (auto mode : {AttentionMode::weibull, AttentionMode::lognormal}) {
        GraphModelConfig dc, bc;
        bc.mode = mode;
        bc.prior.kind = PriorKind::contextual;
        bc.prior.family = mode == AttentionMode::weibull ? Family::gamma : Family::lognormal;
        Rng a(47), b(47);
        GatModel det_gat(graph, dc, a), bam_gat(graph, bc, b);
        Rng ra(48), rb(49);
        r.add("limit", std::string("graph model ") + to_string(mode) + " evaluation vs deterministic",
              max_abs_diff(det_gat.forward_all(ra, false).logits, bam_gat.forward_all(rb, false).logits), 0.0);
    }
    return r;
}

// ---------------------------------------------------------------------------

struct RunningStats
{
    std::size_t n = 0;
    double mean = 0.0;
    double m2 = 0.0;

    void push(double x)
    {
        ++n;
        const double d = x - mean;
        mean += d / static_cast<double>(n);
        m2 += d * (x - mean);
    }
    double variance() const { return n > 1 ? m2 / static_cast<double>(n - 1) : 0.0; }
    double standard_error() const { return std::sqrt(variance() / static_cast<double>(n)); }
};

/// One layer: the analytic KL must lie within 3 standard errors of the mean
/// sampled log-ratio over `draws` samples. Two layers: summing analytic
/// conditional KLs at sampled lower layers must not have more variance than
/// the fully sampled log-ratio.
inline VerifyReport verify_rao_blackwell(std::size_t draws = 100000, std::size_t two_layer_draws = 4000)
{
    VerifyReport r;
    for (auto family : {Family::gamma, Family::lognormal}) {
        Rng rng(51);
        AttentionConfig att;
        att.mode = family == Family::gamma ? AttentionMode::weibull : AttentionMode::lognormal;
        att.k = 1.5;
        att.sigma = 0.8;
        std::vector<double> pv(12), kv(12);
        for (auto& x : pv) x = rng.uniform() * 2.0 - 1.0;
        for (auto& x : kv) x = rng.uniform() * 2.0 - 1.0;
        const Tensor phi({3, 4}, pv), keys({4, 3}, kv);
        const auto net = ContextualPriorNet::init(3, 2, rng);
        const auto psi = contextual_psi(keys, net);
        PriorConfig pc;
        pc.kind = PriorKind::contextual;
        pc.family = family;
        const auto prior = prior_params(&psi, pc, 3, 4);
        auto mask = Mask::all(3, 4);
        mask.set(2, 0, false);
        const auto v = Tensor::zeros({4, 1});
        double analytic = 0.0;
        RunningStats mc;
        for (std::size_t d = 0; d < draws; ++d) {
            const auto s = stochastic_attention(phi, v, att, draw_noise(att.mode, mask.count(), rng), &mask, true);
            if (d == 0) analytic = layer_kl(s.sample, att, prior).item();
            mc.push(sampled_log_ratio(s.sample, att, prior));
        }
        r.add("rao-blackwell", std::string("one layer ") + to_string(att.mode) + " |analytic - monte carlo| vs 3 SE",
              std::fabs(analytic - mc.mean), 3.0 * mc.standard_error());
    }
    for (auto mode : {AttentionMode::weibull, AttentionMode::lognormal}) {
        PriorConfig pc;
        pc.kind = PriorKind::contextual;
        pc.family = mode == AttentionMode::weibull ? Family::gamma : Family::lognormal;
        pc.d_mid = 2;
        Rng rng(52);
        TinyModel model(mode, pc, rng);
        const auto& att = model.attention_config();
        const DenseLayout layouts[2] = {{TinyModel::n, TinyModel::n, nullptr}, {TinyModel::m, TinyModel::n, nullptr}};
        RunningStats semi, full;
        for (std::size_t d = 0; d < two_layer_draws; ++d) {
            const auto pass = model.forward(rng, true);
            double s = 0.0, f = 0.0;
            for (const auto& kl : pass.kl_terms) s += kl.item();
            const LayerResult* layers[2] = {&pass.layer1, &pass.layer2};
            for (std::size_t l = 0; l < 2; ++l) {
                const auto params = layer_prior_params(*layers[l], pc, model.layer_prior(l), layouts[l]);
                for (std::size_t h = 0; h < params.size(); ++h) f += sampled_log_ratio(layers[l]->samples[h], att, params[h]);
            }
            semi.push(s);
            full.push(f);
        }
        r.add("rao-blackwell", std::string("two layers ") + to_string(mode) + " semi-analytic variance vs sampled variance",
              semi.variance(), full.variance());
    }
    return r;
}

inline VerifyReport verify_suite(const std::string& suite)
{
    if (suite == "kl") return verify_kl();
    if (suite == "grad") return verify_grad();
    if (suite == "limit") return verify_limit();
    if (suite == "rao-blackwell") return verify_rao_blackwell();
    if (suite == "all") {
        VerifyReport r = verify_kl();
        r.append(verify_grad());
        r.append(verify_limit());
        r.append(verify_rao_blackwell());
        return r;
    }
    throw ConfigError("verify: unknown suite '" + suite + "' (kl, grad, limit, rao-blackwell, all)");
}

}  // namespace bam
