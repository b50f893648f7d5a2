#pragma once

// Experiment configuration, read from a JSON file. Every key is optional and
// falls back to the defaults below; unknown keys are rejected.
//
// {
//   "task": "graph" | "synthetic",
//   "dataset": "path/to/manifest.json",            graph task, relative to the config file
//   "synthetic": {"n", "d", "signal", "key_noise", "query_noise", "train", "val", "test", "seed"},
//   "attention": {"mode": "deterministic" | "weibull" | "lognormal", "k", "sigma"},
//   "prior": {"kind": "none" | "fixed" | "contextual", "family": "gamma" | "lognormal",
//             "beta", "sigma1", "alpha", "mu", "d_mid", "share_across_heads"},
//   "model": {"hidden_heads", "hidden_features", "output_heads", "output_combine": "mean" | "concat",
//             "dropout", "leaky_slope", "sparse", "heads", "d_att"},
//   "train": {"lr", "beta1", "beta2", "eps", "l2_lambda", "rho", "t0", "patience", "max_epochs", "batch_size",
//             "kl_scale": "per_instance" | "per_entry" | "sum"},
//   "seeds": [0, 1, 2],
//   "uncertainty": {"samples", "p_threshold"},
//   "output_dir": "runs/name"
// }

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bam/attention.hpp"
#include "bam/data.hpp"
#include "bam/models/gat.hpp"
#include "bam/models/synthetic.hpp"
#include "bam/objective.hpp"
#include "bam/prior.hpp"

namespace bam {

enum class TaskKind { graph, synthetic };

struct ExperimentConfig
{
    TaskKind task = TaskKind::synthetic;
    std::filesystem::path dataset;
    SyntheticParams synthetic;
    std::uint64_t synthetic_seed = 1;

    AttentionMode mode = AttentionMode::deterministic;
    double k = 1.0;
    double sigma = 1.0;
    PriorConfig prior;

    // graph model
    std::size_t hidden_heads = 8;
    std::size_t hidden_features = 8;
    std::size_t output_heads = 1;
    HeadCombine output_combine = HeadCombine::mean;
    double dropout = 0.6;
    double leaky_slope = 0.2;
    bool sparse = true;
    // synthetic model
    std::size_t heads = 1;
    std::size_t d_att = 16;

    TrainConfig train;
    std::vector<std::uint64_t> seeds{0};
    std::size_t uncertainty_samples = 20;
    double p_threshold = 0.05;
    std::filesystem::path output_dir = "runs/default";

    GraphModelConfig graph_model() const
    {
        GraphModelConfig g;
        g.mode = mode;
        g.k = k;
        g.sigma = sigma;
        g.hidden_heads = hidden_heads;
        g.hidden_features = hidden_features;
        g.output_heads = output_heads;
        g.output_combine = output_combine;
        g.dropout = dropout;
        g.leaky_slope = leaky_slope;
        g.prior = prior;
        g.sparse = sparse;
        return g;
    }

    SyntheticModelConfig synthetic_model() const
    {
        SyntheticModelConfig s;
        s.mode = mode;
        s.k = k;
        s.sigma = sigma;
        s.heads = heads;
        s.d_att = d_att;
        s.prior = prior;
        return s;
    }
};

namespace detail {

template <class E>
E parse_enum(const std::string& key, const std::string& value, const std::map<std::string, E>& options)
{
    const auto it = options.find(value);
    if (it != options.end()) return it->second;
    std::string names;
    for (const auto& [n, _] : options) names += (names.empty() ? "" : ", ") + n;
    throw ConfigError("config: '" + key + "' is '" + value + "', expected one of " + names);
}

/// Visits each member of an object, failing on keys without a handler.
inline void for_members(const nlohmann::json& obj, const std::string& prefix,
                        const std::map<std::string, std::function<void(const nlohmann::json&, const std::string&)>>& handlers)
{
    if (!obj.is_object()) throw ConfigError("config: '" + (prefix.empty() ? "<root>" : prefix) + "' must be an object");
    for (const auto& [key, value] : obj.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        const auto it = handlers.find(key);
        if (it == handlers.end()) throw ConfigError("config: unknown key '" + path + "'");
        try {
            it->second(value, path);
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("config: '" + path + "' has the wrong type");
        }
    }
}

template <class T>
auto set(T& target)
{
    return [&target](const nlohmann::json& v, const std::string& path) {
        if constexpr (std::is_same_v<T, double>) {
            if (!v.is_number()) throw ConfigError("config: '" + path + "' must be a number");
        } else if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError("config: '" + path + "' must be true or false");
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer() || v.get<long long>() < 0) {
                throw ConfigError("config: '" + path + "' must be a nonnegative integer");
            }
        }
        target = v.get<T>();
    };
}

}  // namespace detail

/// Parses and validates a configuration. Relative dataset paths are resolved
/// against `base_dir`.
inline ExperimentConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {})
{
    using detail::set;
    ExperimentConfig c;
    bool family_given = false;
    std::string dataset;
    std::string output_dir = c.output_dir.string();

    detail::for_members(j, "", {
        {"task", [&](const nlohmann::json& v, const std::string& p) {
             c.task = detail::parse_enum<TaskKind>(p, v.get<std::string>(), {{"graph", TaskKind::graph}, {"synthetic", TaskKind::synthetic}});
         }},
        {"dataset", set(dataset)},
        {"synthetic", [&](const nlohmann::json& v, const std::string& p) {
             detail::for_members(v, p, {{"n", set(c.synthetic.n)},
                                        {"d", set(c.synthetic.d)},
                                        {"signal", set(c.synthetic.signal)},
                                        {"key_noise", set(c.synthetic.key_noise)},
                                        {"query_noise", set(c.synthetic.query_noise)},
                                        {"train", set(c.synthetic.num_train)},
                                        {"val", set(c.synthetic.num_val)},
                                        {"test", set(c.synthetic.num_test)},
                                        {"seed", set(c.synthetic_seed)}});
         }},
        {"attention", [&](const nlohmann::json& v, const std::string& p) {
             detail::for_members(v, p, {{"mode", [&](const nlohmann::json& m, const std::string& mp) {
                                             c.mode = detail::parse_enum<AttentionMode>(
                                                 mp, m.get<std::string>(),
                                                 {{"deterministic", AttentionMode::deterministic},
                                                  {"weibull", AttentionMode::weibull},
                                                  {"lognormal", AttentionMode::lognormal}});
                                         }},
                                        {"k", set(c.k)},
                                        {"sigma", set(c.sigma)}});
         }},
        {"prior", [&](const nlohmann::json& v, const std::string& p) {
             detail::for_members(v, p, {{"kind", [&](const nlohmann::json& m, const std::string& mp) {
                                             c.prior.kind = detail::parse_enum<PriorKind>(
                                                 mp, m.get<std::string>(),
                                                 {{"none", PriorKind::none}, {"fixed", PriorKind::fixed}, {"contextual", PriorKind::contextual}});
                                         }},
                                        {"family", [&](const nlohmann::json& m, const std::string& mp) {
                                             c.prior.family = detail::parse_enum<Family>(
                                                 mp, m.get<std::string>(),
                                                 {{"gamma", Family::gamma}, {"lognormal", Family::lognormal}, {"weibull", Family::weibull}});
                                             family_given = true;
                                         }},
                                        {"beta", set(c.prior.beta)},
                                        {"sigma1", set(c.prior.sigma1)},
                                        {"alpha", set(c.prior.alpha_fixed)},
                                        {"mu", set(c.prior.mu_fixed)},
                                        {"d_mid", set(c.prior.d_mid)},
                                        {"share_across_heads", set(c.prior.share_across_heads)}});
         }},
        {"model", [&](const nlohmann::json& v, const std::string& p) {
             detail::for_members(v, p, {{"hidden_heads", set(c.hidden_heads)},
                                        {"hidden_features", set(c.hidden_features)},
                                        {"output_heads", set(c.output_heads)},
                                        {"output_combine", [&](const nlohmann::json& m, const std::string& mp) {
                                             c.output_combine = detail::parse_enum<HeadCombine>(
                                                 mp, m.get<std::string>(), {{"mean", HeadCombine::mean}, {"concat", HeadCombine::concat}});
                                         }},
                                        {"dropout", set(c.dropout)},
                                        {"leaky_slope", set(c.leaky_slope)},
                                        {"sparse", set(c.sparse)},
                                        {"heads", set(c.heads)},
                                        {"d_att", set(c.d_att)}});
         }},
        {"train", [&](const nlohmann::json& v, const std::string& p) {
             detail::for_members(v, p, {{"lr", set(c.train.adam.lr)},
                                        {"beta1", set(c.train.adam.beta1)},
                                        {"beta2", set(c.train.adam.beta2)},
                                        {"eps", set(c.train.adam.eps)},
                                        {"l2_lambda", set(c.train.l2_lambda)},
                                        {"rho", set(c.train.rho)},
                                        {"t0", set(c.train.t0)},
                                        {"patience", set(c.train.patience)},
                                        {"max_epochs", set(c.train.max_epochs)},
                                        {"batch_size", set(c.train.batch_size)},
                                        {"kl_scale", [&](const nlohmann::json& m, const std::string& mp) {
                                             c.train.kl_scale = detail::parse_enum<KlScale>(
                                                 mp, m.get<std::string>(),
                                                 {{"per_instance", KlScale::per_instance},
                                                  {"per_entry", KlScale::per_entry},
                                                  {"sum", KlScale::sum}});
                                         }}});
         }},
        {"seeds", [&](const nlohmann::json& v, const std::string& p) {
             if (!v.is_array()) throw ConfigError("config: '" + p + "' must be a list of integers");
             c.seeds.clear();
             for (const auto& s : v) {
                 if (!s.is_number_integer() || s.get<long long>() < 0) {
                     throw ConfigError("config: '" + p + "' must be a list of nonnegative integers");
                 }
                 c.seeds.push_back(s.get<std::uint64_t>());
             }
         }},
        {"uncertainty", [&](const nlohmann::json& v, const std::string& p) {
             detail::for_members(v, p, {{"samples", set(c.uncertainty_samples)}, {"p_threshold", set(c.p_threshold)}});
         }},
        {"output_dir", set(output_dir)},
    });

    if (!family_given && c.mode != AttentionMode::deterministic) {
        c.prior.family = c.mode == AttentionMode::weibull ? Family::gamma : Family::lognormal;
    }
    if (!dataset.empty()) {
        const std::filesystem::path d(dataset);
        c.dataset = d.is_absolute() ? d : base_dir / d;
    }
    c.output_dir = output_dir;

    const auto positive = [](double v, const char* key) {
        if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string("config: '") + key + "' must be positive");
    };
    positive(c.k, "attention.k");
    positive(c.sigma, "attention.sigma");
    positive(c.train.adam.lr, "train.lr");
    positive(c.train.adam.eps, "train.eps");
    positive(c.train.rho, "train.rho");
    positive(c.p_threshold, "uncertainty.p_threshold");
    if (c.p_threshold >= 1.0) throw ConfigError("config: 'uncertainty.p_threshold' must be below 1");
    if (!(c.train.adam.beta1 >= 0.0 && c.train.adam.beta1 < 1.0) || !(c.train.adam.beta2 >= 0.0 && c.train.adam.beta2 < 1.0)) {
        throw ConfigError("config: 'train.beta1' and 'train.beta2' must lie in [0, 1)");
    }
    if (!(c.dropout >= 0.0 && c.dropout < 1.0)) throw ConfigError("config: 'model.dropout' must lie in [0, 1)");
    if (!(c.train.l2_lambda >= 0.0)) throw ConfigError("config: 'train.l2_lambda' must be nonnegative");
    if (c.train.max_epochs == 0 || c.train.patience == 0) {
        throw ConfigError("config: 'train.max_epochs' and 'train.patience' must be positive");
    }
    if (c.hidden_heads == 0 || c.hidden_features == 0 || c.output_heads == 0 || c.heads == 0 || c.d_att == 0) {
        throw ConfigError("config: model head counts and widths must be positive");
    }
    if (c.seeds.empty()) throw ConfigError("config: 'seeds' must list at least one seed");
    if (c.uncertainty_samples == 1) throw ConfigError("config: 'uncertainty.samples' must be 0 (off) or at least 2");
    if (c.task == TaskKind::graph && c.dataset.empty()) throw ConfigError("config: graph task needs 'dataset'");
    if (c.task == TaskKind::synthetic) {
        try {
            c.synthetic.validate();
        } catch (const ParameterError& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
    }

    if (c.mode == AttentionMode::deterministic) {
        if (c.prior.kind != PriorKind::none) {
            throw ConfigError("config: 'prior.kind' must be 'none' when 'attention.mode' is 'deterministic'");
        }
    } else if (c.prior.kind != PriorKind::none) {
        const bool ok = (c.mode == AttentionMode::weibull && c.prior.family == Family::gamma) ||
                        (c.mode == AttentionMode::lognormal && c.prior.family == Family::lognormal);
        if (!ok) {
            throw ConfigError(std::string("config: 'attention.mode' = '") + to_string(c.mode) +
                              "' conflicts with 'prior.family' = '" + to_string(c.prior.family) +
                              "' (weibull pairs with gamma, lognormal with lognormal)");
        }
        try {
            c.prior.validate();
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
    }
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path)
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return parse_config(j, path.parent_path());
}

}  // namespace bam
