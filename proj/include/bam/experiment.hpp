#pragma once

// Experiment runs driven by an ExperimentConfig: training over seeds, evaluation
// of saved parameters, and attention dumps.
//
// A training run writes into the output directory:
//   metrics.jsonl       one record per split per epoch, then one test record per seed
//   timing.jsonl        wall time of every gradient step
//   params_seed<N>.txt  parameters restored by early stopping
//   summary.json        test accuracy per seed with mean and sample std
//
// Each seed s gives three independent streams, in order, from Rng(s).split():
// initialization, training, evaluation.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bam/config.hpp"
#include "bam/format.hpp"
#include "bam/params_io.hpp"
#include "bam/uncertainty.hpp"

namespace bam {

inline nlohmann::ordered_json to_json(const MetricsRecord& r)
{
    nlohmann::ordered_json j;
    j["seed"] = r.seed;
    j["epoch"] = r.epoch;
    j["step"] = r.step;
    j["split"] = r.split;
    j["nll"] = r.nll;
    j["kl"] = r.kl;
    j["l2"] = r.l2;
    j["total"] = r.total;
    j["kl_weight"] = r.kl_weight;
    j["accuracy"] = r.accuracy;
    if (r.pavpu) j["pavpu"] = *r.pavpu;
    return j;
}

inline std::string metrics_line(const MetricsRecord& r)
{
    return to_json(r).dump();
}

inline MetricsRecord parse_metrics_line(const std::string& line)
{
    try {
        const auto j = nlohmann::json::parse(line);
        const auto num = [&](const char* key) {
            const auto& v = j.at(key);
            return v.is_null() ? std::nan("") : v.get<double>();
        };
        MetricsRecord r;
        r.seed = j.at("seed").get<std::uint64_t>();
        r.epoch = j.at("epoch").get<std::size_t>();
        r.step = j.at("step").get<std::size_t>();
        r.split = j.at("split").get<std::string>();
        r.nll = num("nll");
        r.kl = num("kl");
        r.l2 = num("l2");
        r.total = num("total");
        r.kl_weight = num("kl_weight");
        r.accuracy = num("accuracy");
        if (j.contains("pavpu")) r.pavpu = num("pavpu");
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("metrics line: ") + e.what());
    }
}

inline std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<MetricsRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(parse_metrics_line(line));
    }
    return out;
}

/// BAM_OUTPUT_ROOT (or the working directory) joined with the configured
/// output directory.
inline std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg)
{
    if (cfg.output_dir.is_absolute()) return cfg.output_dir;
    const char* root = std::getenv("BAM_OUTPUT_ROOT");
    return (root && *root ? std::filesystem::path(root) : std::filesystem::current_path()) / cfg.output_dir;
}

struct SeedStreams
{
    Rng init, train, eval;

    explicit SeedStreams(std::uint64_t seed) : SeedStreams(Rng(seed)) {}

private:
    explicit SeedStreams(Rng root) : init(root.split()), train(root.split()), eval(root.split()) {}
};

/// Dataset for a configuration; models keep pointers into it.
class Workload
{
public:
    explicit Workload(ExperimentConfig cfg) : cfg_(std::move(cfg))
    {
        if (cfg_.task == TaskKind::graph) {
            graph_ = load_graph(cfg_.dataset);
        } else {
            Rng rng(cfg_.synthetic_seed);
            synthetic_ = generate_synthetic(cfg_.synthetic, rng);
        }
    }

    Workload(const Workload&) = delete;
    Workload& operator=(const Workload&) = delete;

    std::unique_ptr<ClassificationTask> make_model(Rng& init, std::optional<double> dropout = std::nullopt) const
    {
        if (graph_) {
            auto g = cfg_.graph_model();
            if (dropout) g.dropout = *dropout;
            return std::make_unique<GatModel>(*graph_, g, init);
        }
        return std::make_unique<SyntheticModel>(*synthetic_, cfg_.synthetic_model(), init);
    }

    const ExperimentConfig& config() const { return cfg_; }
    const GraphDataset* graph() const { return graph_ ? &*graph_ : nullptr; }
    const SyntheticDataset* synthetic() const { return synthetic_ ? &*synthetic_ : nullptr; }

private:
    ExperimentConfig cfg_;
    std::optional<GraphDataset> graph_;
    std::optional<SyntheticDataset> synthetic_;
};

struct TestOutcome
{
    EvalResult eval;
    std::optional<PavpuResult> pavpu;
    std::vector<bool> certain;
};

/// Point-estimate test accuracy, then (when samples >= 2) certainty from
/// repeated stochastic passes and PAvPU.
inline TestOutcome test_model(ClassificationTask& model, const ExperimentConfig& cfg, Rng& eval_rng)
{
    TestOutcome t;
    const auto items = model.test_items();
    t.eval = evaluate(model, items, eval_rng);
    if (cfg.uncertainty_samples >= 2 && !items.empty()) {
        const auto preds = posterior_sample(model, items, cfg.uncertainty_samples, eval_rng);
        t.certain = certainty(preds, cfg.p_threshold);
        std::vector<bool> accurate(items.size());
        for (std::size_t i = 0; i < items.size(); ++i) accurate[i] = t.eval.predictions[i] == model.labels()[items[i]];
        t.pavpu = pavpu(accurate, t.certain);
    }
    return t;
}

struct SeedOutcome
{
    std::uint64_t seed = 0;
    std::size_t epochs = 0;
    std::size_t steps = 0;
    std::size_t best_epoch = 0;
    double test_accuracy = 0.0;
    double test_nll = 0.0;
    std::optional<double> pavpu;
};

struct TrainSummary
{
    std::vector<SeedOutcome> seeds;
    double mean_accuracy = 0.0;
    double std_accuracy = 0.0;  // sample std, 0 for a single seed
};

inline std::pair<double, double> mean_and_sample_std(const std::vector<double>& x)
{
    if (x.empty()) return {std::nan(""), std::nan("")};
    double mean = 0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    if (x.size() < 2) return {mean, 0.0};
    double ss = 0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / static_cast<double>(x.size() - 1))};
}

inline std::string summary_json(const TrainSummary& s)
{
    nlohmann::ordered_json j;
    j["seeds"] = nlohmann::ordered_json::array();
    for (const auto& o : s.seeds) {
        nlohmann::ordered_json e;
        e["seed"] = o.seed;
        e["epochs"] = o.epochs;
        e["steps"] = o.steps;
        e["best_epoch"] = o.best_epoch;
        e["test_accuracy"] = o.test_accuracy;
        e["test_nll"] = o.test_nll;
        if (o.pavpu) e["pavpu"] = *o.pavpu;
        j["seeds"].push_back(e);
    }
    j["test_accuracy_mean"] = s.mean_accuracy;
    j["test_accuracy_std"] = s.std_accuracy;
    return j.dump(2) + "\n";
}

/// Trains one model per seed. A DivergenceError propagates after the records
/// written so far are flushed.
inline TrainSummary run_train(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log)
{
    std::filesystem::create_directories(out_dir);
    std::ofstream metrics(out_dir / "metrics.jsonl", std::ios::trunc);
    std::ofstream timing(out_dir / "timing.jsonl", std::ios::trunc);
    if (!metrics || !timing) throw IoError("cannot write into " + out_dir.string());

    const Workload work(cfg);
    TrainSummary summary;
    for (const auto seed : cfg.seeds) {
        SeedStreams rng(seed);
        auto model = work.make_model(rng.init);
        const auto res = train(
            *model, cfg.train, seed, rng.train,
            [&](const MetricsRecord& r) { metrics << metrics_line(r) << '\n' << std::flush; },
            [&](std::size_t step, double ms) {
                nlohmann::ordered_json j;
                j["seed"] = seed;
                j["step"] = step;
                j["wall_ms"] = ms;
                timing << j.dump() << '\n';
            });
        timing.flush();

        const auto test = test_model(*model, cfg, rng.eval);
        MetricsRecord tr;
        tr.seed = seed;
        tr.epoch = res.best_epoch;
        tr.step = res.steps;
        tr.split = "test";
        tr.nll = test.eval.nll;
        tr.total = test.eval.nll;
        tr.accuracy = test.eval.accuracy;
        if (test.pavpu) tr.pavpu = test.pavpu->value;
        metrics << metrics_line(tr) << '\n' << std::flush;

        save_params(out_dir / ("params_seed" + std::to_string(seed) + ".txt"), seed, model->parameters());

        SeedOutcome o{seed, res.epochs_run, res.steps, res.best_epoch, test.eval.accuracy, test.eval.nll, tr.pavpu};
        log << "seed " << seed << ": epochs " << o.epochs << ", best epoch " << o.best_epoch << ", test accuracy "
            << format_double(o.test_accuracy);
        if (o.pavpu) log << ", pavpu " << format_double(*o.pavpu);
        log << '\n';
        summary.seeds.push_back(o);
    }

    std::vector<double> acc;
    for (const auto& o : summary.seeds) acc.push_back(o.test_accuracy);
    std::tie(summary.mean_accuracy, summary.std_accuracy) = mean_and_sample_std(acc);
    write_file(out_dir / "summary.json", summary_json(summary));
    log << "test accuracy " << format_double(summary.mean_accuracy) << " +- " << format_double(summary.std_accuracy)
        << " over " << summary.seeds.size() << " seed(s)\n";
    return summary;
}

/// Model with saved parameters loaded.
inline std::unique_ptr<ClassificationTask> load_model(const Workload& work, const ParamsFile& params,
                                                      std::optional<double> dropout = std::nullopt)
{
    SeedStreams rng(params.seed);
    auto model = work.make_model(rng.init, dropout);
    apply_params(model->parameters(), params);
    return model;
}

/// Re-evaluates saved parameters on the test split and writes certainty.tsv.
/// Uses the seed's evaluation stream, so it reproduces the training run's
/// test record.
inline TestOutcome run_eval(const ExperimentConfig& cfg, const std::filesystem::path& params_path,
                            const std::filesystem::path& out_dir, std::ostream& log)
{
    const auto params = load_params(params_path);
    const Workload work(cfg);
    auto model = load_model(work, params);
    SeedStreams rng(params.seed);
    const auto test = test_model(*model, cfg, rng.eval);

    std::filesystem::create_directories(out_dir);
    std::string tsv = "item\tlabel\tprediction\taccurate\tcertain\n";
    const auto items = model->test_items();
    for (std::size_t i = 0; i < items.size(); ++i) {
        const int label = model->labels()[items[i]];
        tsv += std::to_string(items[i]) + "\t" + std::to_string(label) + "\t" + std::to_string(test.eval.predictions[i]) +
               "\t" + (test.eval.predictions[i] == label ? "1" : "0") + "\t" +
               (test.certain.empty() ? "" : (test.certain[i] ? "1" : "0")) + "\n";
    }
    write_file(out_dir / "certainty.tsv", tsv);

    log << "test accuracy " << format_double(test.eval.accuracy) << "\ntest nll " << format_double(test.eval.nll) << '\n';
    if (test.pavpu) {
        const auto& c = test.pavpu->counts;
        log << "pavpu " << format_double(test.pavpu->value) << " (ac " << c.n_ac << ", au " << c.n_au << ", ic "
            << c.n_ic << ", iu " << c.n_iu << ")\n";
    }
    return test;
}

struct AttentionEdge
{
    std::size_t query = 0;
    std::size_t key = 0;
    std::optional<double> psi;
    double w_expected = 0.0;
    double w_sampled = 0.0;
};

namespace detail {

inline double entry(const Tensor& w, const Csr& pattern, std::size_t e, std::size_t i, std::size_t j)
{
    return w.numel() == pattern.nnz() ? w[e] : w.at(i, j);
}

inline std::vector<AttentionEdge> edges_of(const Csr& pattern, const LayerResult& expected,
                                           const LayerResult& sampled, std::size_t head,
                                           const std::optional<Tensor>& psi,
                                           const std::vector<std::size_t>& query_ids, bool local_keys)
{
    std::vector<AttentionEdge> out;
    const auto& we = expected.samples.at(head).w;
    const auto& ws = sampled.samples.at(head).w;
    for (std::size_t i = 0; i < pattern.num_rows; ++i) {
        for (std::size_t e = pattern.row_ptr[i]; e < pattern.row_ptr[i + 1]; ++e) {
            const std::size_t j = pattern.col[e];
            AttentionEdge a;
            a.query = query_ids.empty() ? i : query_ids[i];
            a.key = local_keys ? e - pattern.row_ptr[i] : j;
            if (psi) a.psi = (*psi)[j];
            a.w_expected = entry(we, pattern, e, i, j);
            a.w_sampled = entry(ws, pattern, e, i, j);
            out.push_back(a);
        }
    }
    return out;
}

}  // namespace detail

/// Attention weights of one head: the expected weights of the evaluation pass
/// and one sampled draw with dropout disabled, plus the contextual prior mean
/// share psi of each key when the model has one. Layers count from 1. For the
/// synthetic task, queries are test instances and keys index into the
/// instance's key set.
inline std::vector<AttentionEdge> dump_attention(const ExperimentConfig& cfg, const ParamsFile& params,
                                                 std::size_t layer, std::size_t head)
{
    const Workload work(cfg);
    auto model = load_model(work, params, 0.0);
    SeedStreams rng(params.seed);
    const bool contextual = cfg.mode != AttentionMode::deterministic && cfg.prior.kind == PriorKind::contextual;

    if (const auto* gat = dynamic_cast<GatModel*>(model.get())) {
        if (layer < 1 || layer > 2) throw ConfigError("dump-attention: graph models have layers 1 and 2");
        if (head >= gat->layer_config(layer - 1).heads) {
            throw ConfigError("dump-attention: layer " + std::to_string(layer) + " has " +
                              std::to_string(gat->layer_config(layer - 1).heads) + " heads");
        }
        const auto expected = gat->forward_all(rng.eval, false, false);
        const auto sampled = gat->forward_all(rng.eval, true, false);
        const auto& le = layer == 1 ? expected.layer1 : expected.layer2;
        const auto& ls = layer == 1 ? sampled.layer1 : sampled.layer2;
        std::optional<Tensor> psi;
        if (contextual) psi = contextual_psi(le.keys.at(head), gat->layer_prior(layer - 1).for_head(head));
        return detail::edges_of(gat->pattern(), le, ls, head, psi, {}, false);
    }

    auto& syn = dynamic_cast<SyntheticModel&>(*model);
    if (layer != 1) throw ConfigError("dump-attention: the synthetic model has a single layer");
    if (head >= syn.attention_config().heads) {
        throw ConfigError("dump-attention: the model has " + std::to_string(syn.attention_config().heads) + " heads");
    }
    const std::vector<std::size_t> items(syn.test_items().begin(), syn.test_items().end());
    const Csr blocks = SyntheticModel::block_pattern(items.size(), syn.data().params.n);
    const auto expected = syn.run(items, rng.eval, false, false);
    const auto sampled = syn.run(items, rng.eval, true, false);
    std::optional<Tensor> psi;
    if (contextual) psi = contextual_psi(expected.layer.keys.at(head), syn.prior().for_head(head), &blocks);
    return detail::edges_of(blocks, expected.layer, sampled.layer, head, psi, items, true);
}

inline std::string attention_tsv(const std::vector<AttentionEdge>& edges)
{
    const bool with_psi = !edges.empty() && edges.front().psi.has_value();
    std::string out = with_psi ? "query\tkey\tpsi\tw_expected\tw_sampled\n" : "query\tkey\tw_expected\tw_sampled\n";
    for (const auto& e : edges) {
        out += std::to_string(e.query) + "\t" + std::to_string(e.key) + "\t";
        if (with_psi) out += format_double(*e.psi) + "\t";
        out += format_double(e.w_expected) + "\t" + format_double(e.w_sampled) + "\n";
    }
    return out;
}

}  // namespace bam
