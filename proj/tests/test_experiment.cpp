#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "bam/experiment.hpp"
#include "bam/verify.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path scratch(const std::string& name)
{
    const auto dir = fs::temp_directory_path() / ("bam_test_experiment_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string config_error(const json& j)
{
    try {
        bam::parse_config(j);
    } catch (const bam::ConfigError& e) {
        return e.what();
    }
    return "";
}

json tiny_synthetic(const fs::path& out)
{
    return {
        {"task", "synthetic"},
        {"synthetic", {{"n", 4}, {"d", 6}, {"train", 60}, {"val", 20}, {"test", 20}, {"seed", 3}}},
        {"attention", {{"mode", "weibull"}, {"k", 2}}},
        {"prior", {{"kind", "contextual"}, {"beta", 1}}},
        {"model", {{"heads", 2}, {"d_att", 4}}},
        {"train", {{"lr", 0.01}, {"batch_size", 20}, {"max_epochs", 3}, {"patience", 5}}},
        {"seeds", {5, 6}},
        {"uncertainty", {{"samples", 4}}},
        {"output_dir", out.string()},
    };
}

TEST(Config, DefaultsParse)
{
    const auto c = bam::parse_config(json::object());
    EXPECT_EQ(c.task, bam::TaskKind::synthetic);
    EXPECT_EQ(c.mode, bam::AttentionMode::deterministic);
    EXPECT_EQ(c.prior.kind, bam::PriorKind::none);
    EXPECT_EQ(c.seeds, std::vector<std::uint64_t>{0});
    EXPECT_EQ(c.uncertainty_samples, 20u);
    EXPECT_DOUBLE_EQ(c.p_threshold, 0.05);
}

TEST(Config, UnknownKeysNameTheirPath)
{
    EXPECT_NE(config_error({{"trian", json::object()}}).find("'trian'"), std::string::npos);
    EXPECT_NE(config_error({{"train", {{"lrr", 0.1}}}}).find("'train.lrr'"), std::string::npos);
    EXPECT_NE(config_error({{"prior", {{"famly", "gamma"}}}}).find("'prior.famly'"), std::string::npos);
}

TEST(Config, ModeFamilyConflictNamesBothFields)
{
    const auto msg = config_error({{"attention", {{"mode", "weibull"}}},
                                   {"prior", {{"kind", "contextual"}, {"family", "lognormal"}}}});
    EXPECT_NE(msg.find("attention.mode"), std::string::npos) << msg;
    EXPECT_NE(msg.find("prior.family"), std::string::npos) << msg;
}

TEST(Config, FamilyFollowsMode)
{
    EXPECT_EQ(bam::parse_config({{"attention", {{"mode", "weibull"}}}, {"prior", {{"kind", "fixed"}}}}).prior.family,
              bam::Family::gamma);
    EXPECT_EQ(bam::parse_config({{"attention", {{"mode", "lognormal"}}}, {"prior", {{"kind", "fixed"}}}}).prior.family,
              bam::Family::lognormal);
}

TEST(Config, RejectsInvalidValues)
{
    EXPECT_FALSE(config_error({{"train", {{"lr", -1}}}}).empty());
    EXPECT_FALSE(config_error({{"train", {{"lr", "fast"}}}}).empty());
    EXPECT_FALSE(config_error({{"attention", {{"sigma", 0}}}}).empty());
    EXPECT_FALSE(config_error({{"attention", {{"mode", "gumbel"}}}}).empty());
    EXPECT_FALSE(config_error({{"prior", {{"kind", "contextual"}}}}).empty());  // deterministic mode
    EXPECT_FALSE(config_error({{"seeds", json::array()}}).empty());
    EXPECT_FALSE(config_error({{"seeds", {-1}}}).empty());
    EXPECT_FALSE(config_error({{"uncertainty", {{"samples", 1}}}}).empty());
    EXPECT_FALSE(config_error({{"uncertainty", {{"p_threshold", 1.5}}}}).empty());
    EXPECT_FALSE(config_error({{"model", {{"dropout", 1.0}}}}).empty());
    EXPECT_FALSE(config_error({{"task", "graph"}}).empty());  // no dataset
    EXPECT_FALSE(config_error({{"synthetic", {{"n", 1}}}}).empty());
    EXPECT_THROW(bam::parse_config(json::array()), bam::ConfigError);
}

TEST(Config, KlScale)
{
    EXPECT_EQ(bam::parse_config(json::object()).train.kl_scale, bam::KlScale::per_instance);
    EXPECT_EQ(bam::parse_config({{"train", {{"kl_scale", "per_entry"}}}}).train.kl_scale, bam::KlScale::per_entry);
    EXPECT_EQ(bam::parse_config({{"train", {{"kl_scale", "sum"}}}}).train.kl_scale, bam::KlScale::sum);
    EXPECT_FALSE(config_error({{"train", {{"kl_scale", "mean"}}}}).empty());
}

TEST(Config, PathsResolve)
{
    const auto dir = scratch("paths");
    bam::write_file(dir / "c.json", R"({"task": "graph", "dataset": "data/manifest.json", "output_dir": "runs/x"})");
    const auto c = bam::load_config(dir / "c.json");
    EXPECT_EQ(c.dataset, dir / "data/manifest.json");

    ::setenv("BAM_OUTPUT_ROOT", dir.c_str(), 1);
    EXPECT_EQ(bam::resolve_output_dir(c), dir / "runs/x");
    ::unsetenv("BAM_OUTPUT_ROOT");
    EXPECT_EQ(bam::resolve_output_dir(c), fs::current_path() / "runs/x");

    bam::write_file(dir / "bad.json", "{\"task\": ");
    EXPECT_THROW(bam::load_config(dir / "bad.json"), bam::ConfigError);
}

TEST(Metrics, RoundTrip)
{
    bam::MetricsRecord r;
    r.seed = 7;
    r.epoch = 3;
    r.step = 60;
    r.split = "train";
    r.nll = 0.1 + 0.2;
    r.kl = 1e-300;
    r.l2 = 0.0;
    r.total = 12345.678901234567;
    r.kl_weight = 1.0 / 3.0;
    r.accuracy = 0.95;
    const auto back = bam::parse_metrics_line(bam::metrics_line(r));
    EXPECT_EQ(back.seed, r.seed);
    EXPECT_EQ(back.epoch, r.epoch);
    EXPECT_EQ(back.step, r.step);
    EXPECT_EQ(back.split, r.split);
    EXPECT_EQ(back.nll, r.nll);
    EXPECT_EQ(back.kl, r.kl);
    EXPECT_EQ(back.total, r.total);
    EXPECT_EQ(back.kl_weight, r.kl_weight);
    EXPECT_EQ(back.accuracy, r.accuracy);
    EXPECT_FALSE(back.pavpu.has_value());
    EXPECT_EQ(bam::metrics_line(back), bam::metrics_line(r));

    r.pavpu = 0.75;
    r.nll = std::numeric_limits<double>::quiet_NaN();
    const auto line = bam::metrics_line(r);
    EXPECT_NE(line.find("\"nll\":null"), std::string::npos);
    const auto back2 = bam::parse_metrics_line(line);
    EXPECT_TRUE(std::isnan(back2.nll));
    EXPECT_EQ(back2.pavpu, 0.75);
    EXPECT_THROW(bam::parse_metrics_line("{\"seed\": 1"), bam::ParseError);
}

std::vector<bam::NamedTensor> sample_params()
{
    return {{"a", bam::Tensor({2, 3}, {0.1, -0.0, 1e300, 5e-324, -2.5, 1.0 / 3.0}, true)},
            {"b", bam::Tensor({1, 1}, {42.0}, true)},
            {"c", bam::Tensor({4}, {1, 2, 3, 4}, true)}};
}

TEST(Params, RoundTripIsExact)
{
    const auto params = sample_params();
    const auto text = bam::params_text(9, params);
    const auto f = bam::parse_params(text);
    EXPECT_EQ(f.seed, 9u);
    ASSERT_EQ(f.tensors.size(), 3u);
    for (std::size_t i = 0; i < params.size(); ++i) {
        EXPECT_EQ(f.tensors[i].name, params[i].name);
        EXPECT_EQ(f.tensors[i].shape, params[i].tensor.shape());
        const auto v = params[i].tensor.values();
        ASSERT_EQ(f.tensors[i].values.size(), v.size());
        for (std::size_t j = 0; j < v.size(); ++j) {
            EXPECT_EQ(std::signbit(f.tensors[i].values[j]), std::signbit(v[j]));
            EXPECT_EQ(f.tensors[i].values[j], v[j]);
        }
    }
    auto target = sample_params();
    for (auto t : target) std::ranges::fill(t.tensor.mutable_values(), 0.0);
    bam::apply_params(target, f);
    EXPECT_EQ(bam::params_text(9, target), text);
}

TEST(Params, CorruptionAndMismatch)
{
    const auto text = bam::params_text(1, sample_params());
    auto bad = text;
    bad[bad.find("0x1.") + 4] ^= 1;
    EXPECT_THROW(bam::parse_params(bad), bam::IntegrityError);
    EXPECT_THROW(bam::parse_params(text.substr(0, text.size() / 2)), bam::IntegrityError);

    const auto f = bam::parse_params(text);
    auto params = sample_params();
    params.pop_back();
    EXPECT_THROW(bam::apply_params(params, f), bam::DimensionError);
    params = sample_params();
    params[1] = {"b", bam::Tensor({1, 2}, {0, 0}, true)};
    EXPECT_THROW(bam::apply_params(params, f), bam::DimensionError);
    params = sample_params();
    params[0].name = "z";
    EXPECT_THROW(bam::apply_params(params, f), bam::DimensionError);
}

TEST(Params, MalformedBodyIsAParseError)
{
    std::string body = "bam-params v1\nseed 1\ntensor a 1x2\n0x1p+0\n";
    body += "sha256 " + bam::sha256_hex(body) + "\n";
    try {
        bam::parse_params(body);
        FAIL() << "expected a parse error";
    } catch (const bam::ParseError& e) {
        EXPECT_EQ(e.line(), 4u);
    }
}

TEST(Train, WritesDeterministicOutputs)
{
    const auto a = scratch("det_a"), b = scratch("det_b");
    std::ostringstream log;
    const auto sa = bam::run_train(bam::parse_config(tiny_synthetic(a)), a, log);
    bam::run_train(bam::parse_config(tiny_synthetic(b)), b, log);
    EXPECT_EQ(bam::read_file(a / "metrics.jsonl"), bam::read_file(b / "metrics.jsonl"));
    EXPECT_EQ(bam::read_file(a / "summary.json"), bam::read_file(b / "summary.json"));
    EXPECT_EQ(bam::read_file(a / "params_seed5.txt"), bam::read_file(b / "params_seed5.txt"));

    const auto records = bam::read_metrics(a / "metrics.jsonl");
    std::map<std::string, int> per_split;
    for (const auto& r : records) ++per_split[r.split];
    EXPECT_EQ(per_split["test"], 2);
    EXPECT_EQ(per_split["train"], per_split["val"]);
    EXPECT_GE(per_split["train"], 2);
    ASSERT_EQ(sa.seeds.size(), 2u);
    EXPECT_TRUE(records.back().pavpu.has_value());
    EXPECT_EQ(records.back().accuracy, sa.seeds[1].test_accuracy);

    std::size_t timing_lines = 0;
    std::istringstream timing(bam::read_file(a / "timing.jsonl"));
    for (std::string line; std::getline(timing, line);) {
        EXPECT_GE(json::parse(line).at("wall_ms").get<double>(), 0.0);
        ++timing_lines;
    }
    EXPECT_EQ(timing_lines, sa.seeds[0].steps + sa.seeds[1].steps);
}

TEST(Eval, ReproducesTheTestRecord)
{
    const auto dir = scratch("eval");
    std::ostringstream log;
    const auto cfg = bam::parse_config(tiny_synthetic(dir));
    const auto summary = bam::run_train(cfg, dir, log);
    std::ostringstream eval_log;
    const auto t = bam::run_eval(cfg, dir / "params_seed6.txt", dir, eval_log);
    EXPECT_EQ(t.eval.accuracy, summary.seeds[1].test_accuracy);
    ASSERT_TRUE(t.pavpu.has_value());
    EXPECT_EQ(t.pavpu->value, *summary.seeds[1].pavpu);
    EXPECT_NE(eval_log.str().find("test accuracy"), std::string::npos);
    EXPECT_NE(eval_log.str().find("pavpu"), std::string::npos);
    const auto tsv = bam::read_file(dir / "certainty.tsv");
    EXPECT_EQ(std::count(tsv.begin(), tsv.end(), '\n'), 21);

    auto other = tiny_synthetic(dir);
    other["model"]["heads"] = 3;
    EXPECT_THROW(bam::run_eval(bam::parse_config(other), dir / "params_seed6.txt", dir, eval_log), bam::DimensionError);
}

TEST(Eval, TwoSamplesIsEnough)
{
    const auto dir = scratch("eval_m2");
    auto j = tiny_synthetic(dir);
    j["uncertainty"]["samples"] = 2;
    j["seeds"] = {1};
    std::ostringstream log;
    const auto cfg = bam::parse_config(j);
    bam::run_train(cfg, dir, log);
    const auto t = bam::run_eval(cfg, dir / "params_seed1.txt", dir, log);
    ASSERT_TRUE(t.pavpu.has_value());
    EXPECT_GE(t.pavpu->value, 0.0);
    EXPECT_LE(t.pavpu->value, 1.0);
}

void expect_attention_rows(const std::vector<bam::AttentionEdge>& edges, bool psi_per_row)
{
    std::map<std::size_t, double> we, ws, psi;
    std::map<std::size_t, double> psi_by_key;
    for (const auto& e : edges) {
        we[e.query] += e.w_expected;
        ws[e.query] += e.w_sampled;
        ASSERT_TRUE(e.psi.has_value());
        if (psi_per_row) psi[e.query] += *e.psi;
        else psi_by_key[e.key] = *e.psi;
    }
    for (const auto& [q, s] : we) EXPECT_NEAR(s, 1.0, 1e-9) << q;
    for (const auto& [q, s] : ws) EXPECT_NEAR(s, 1.0, 1e-9) << q;
    for (const auto& [q, s] : psi) EXPECT_NEAR(s, 1.0, 1e-12) << q;
    if (!psi_per_row) {
        double total = 0;
        for (const auto& [k, v] : psi_by_key) total += v;
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(DumpAttention, SyntheticRowsAndPriorSumToOne)
{
    const auto dir = scratch("dump_syn");
    std::ostringstream log;
    const auto cfg = bam::parse_config(tiny_synthetic(dir));
    bam::run_train(cfg, dir, log);
    const auto params = bam::load_params(dir / "params_seed5.txt");
    const auto edges = bam::dump_attention(cfg, params, 1, 1);
    EXPECT_EQ(edges.size(), 20u * 4u);
    expect_attention_rows(edges, true);
    EXPECT_EQ(bam::attention_tsv(edges), bam::attention_tsv(bam::dump_attention(cfg, params, 1, 1)));
    EXPECT_EQ(bam::attention_tsv(edges).substr(0, 6), "query\t");
    EXPECT_THROW(bam::dump_attention(cfg, params, 2, 0), bam::ConfigError);
    EXPECT_THROW(bam::dump_attention(cfg, params, 1, 2), bam::ConfigError);
}

TEST(DumpAttention, GraphPriorCoversAllNodes)
{
    const auto dir = scratch("dump_graph");
    bam::PlantedPartitionParams p;
    p.nodes = 60;
    p.classes = 3;
    p.features = 12;
    p.train_per_class = 4;
    p.val = 10;
    p.test = 20;
    bam::Rng rng(4);
    bam::write_graph(bam::planted_partition(p, rng), dir / "data");
    json j = {{"task", "graph"},
              {"dataset", (dir / "data/manifest.json").string()},
              {"attention", {{"mode", "lognormal"}, {"sigma", 0.3}}},
              {"prior", {{"kind", "contextual"}}},
              {"model", {{"hidden_heads", 2}, {"hidden_features", 4}}},
              {"train", {{"max_epochs", 2}}},
              {"seeds", {0}},
              {"uncertainty", {{"samples", 3}}},
              {"output_dir", (dir / "out").string()}};
    const auto cfg = bam::parse_config(j);
    std::ostringstream log;
    bam::run_train(cfg, dir / "out", log);
    const auto params = bam::load_params(dir / "out/params_seed0.txt");
    for (std::size_t layer : {1u, 2u}) {
        const auto edges = bam::dump_attention(cfg, params, layer, 0);
        std::set<std::size_t> queries;
        for (const auto& e : edges) queries.insert(e.query);
        EXPECT_EQ(queries.size(), 60u);
        expect_attention_rows(edges, false);
    }
    EXPECT_THROW(bam::dump_attention(cfg, params, 3, 0), bam::ConfigError);
    EXPECT_THROW(bam::dump_attention(cfg, params, 1, 2), bam::ConfigError);
}

TEST(Train, DivergenceKeepsParseableMetrics)
{
    const auto dir = scratch("diverge");
    auto j = tiny_synthetic(dir);
    j["attention"] = {{"mode", "deterministic"}};
    j["prior"] = {{"kind", "none"}};
    j["train"]["lr"] = 1e300;
    j["train"]["max_epochs"] = 50;
    j["train"]["patience"] = 50;
    std::ostringstream log;
    EXPECT_THROW(bam::run_train(bam::parse_config(j), dir, log), bam::DivergenceError);
    const auto records = bam::read_metrics(dir / "metrics.jsonl");
    for (const auto& r : records) EXPECT_EQ(r.seed, 5u);
}

TEST(Verify, LimitSuitePasses)
{
    const auto r = bam::verify_suite("limit");
    EXPECT_TRUE(r.ok());
    std::ostringstream os;
    r.print(os);
    EXPECT_NE(os.str().find("PASS"), std::string::npos);
    EXPECT_THROW(bam::verify_suite("everything"), bam::ConfigError);
}

int run_cli(const std::string& args)
{
    const std::string cmd = std::string(BAM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, ExitCodes)
{
    const auto dir = scratch("cli");
    auto good = tiny_synthetic(dir / "out");
    good["seeds"] = {2};
    bam::write_file(dir / "good.json", good.dump());
    auto conflict = good;
    conflict["prior"]["family"] = "lognormal";
    bam::write_file(dir / "conflict.json", conflict.dump());
    bam::write_file(dir / "typo.json", R"({"trian": {}})");

    EXPECT_EQ(run_cli("train " + (dir / "good.json").string()), 0);
    EXPECT_TRUE(fs::exists(dir / "out/metrics.jsonl"));
    EXPECT_EQ(run_cli("eval " + (dir / "good.json").string() + " " + (dir / "out/params_seed2.txt").string()), 0);
    EXPECT_TRUE(fs::exists(dir / "out/certainty.tsv"));
    EXPECT_EQ(run_cli("dump-attention " + (dir / "good.json").string() + " " + (dir / "out/params_seed2.txt").string() +
                      " --layer 1 --head 0"),
              0);
    EXPECT_TRUE(fs::exists(dir / "out/attention_layer1_head0.tsv"));
    EXPECT_EQ(run_cli("train " + (dir / "conflict.json").string()), 2);
    EXPECT_EQ(run_cli("train " + (dir / "typo.json").string()), 2);
    EXPECT_EQ(run_cli("frobnicate"), 2);
    EXPECT_EQ(run_cli("verify nonsense"), 2);
    EXPECT_EQ(run_cli("eval " + (dir / "good.json").string() + " " + (dir / "missing.txt").string()), 1);
}

}  // namespace
