// bam: train, evaluate, verify and inspect attention models.
//
// Exit status: 0 success, 1 runtime failure or failed checks, 2 bad
// configuration or usage, 3 training diverged.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "bam/experiment.hpp"
#include "bam/verify.hpp"

namespace {

enum Exit { ok = 0, failure = 1, usage = 2, diverged = 3 };

int train_cmd(const std::string& config_path)
{
    const auto cfg = bam::load_config(config_path);
    const auto out = bam::resolve_output_dir(cfg);
    std::cout << "output " << out.string() << '\n';
    bam::run_train(cfg, out, std::cout);
    return ok;
}

int eval_cmd(const std::string& config_path, const std::string& params_path)
{
    const auto cfg = bam::load_config(config_path);
    bam::run_eval(cfg, params_path, bam::resolve_output_dir(cfg), std::cout);
    return ok;
}

int verify_cmd(const std::string& suite)
{
    const auto report = bam::verify_suite(suite);
    report.print(std::cout);
    std::cout << report.checks.size() - report.failures() << "/" << report.checks.size() << " checks passed\n";
    return report.ok() ? ok : failure;
}

int dump_cmd(const std::string& config_path, const std::string& params_path, std::size_t layer, std::size_t head)
{
    const auto cfg = bam::load_config(config_path);
    const auto edges = bam::dump_attention(cfg, bam::load_params(params_path), layer, head);
    const auto dir = bam::resolve_output_dir(cfg);
    std::filesystem::create_directories(dir);
    const auto path = dir / ("attention_layer" + std::to_string(layer) + "_head" + std::to_string(head) + ".tsv");
    bam::write_file(path, bam::attention_tsv(edges));
    std::cout << "wrote " << edges.size() << " edges to " << path.string() << '\n';
    return ok;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Stochastic attention experiments"};
    app.require_subcommand(1);

    std::string config, params, suite;
    std::size_t layer = 1, head = 0;

    auto* train = app.add_subcommand("train", "Train one model per configured seed");
    train->add_option("config", config, "Experiment config (JSON)")->required();

    auto* eval = app.add_subcommand("eval", "Test accuracy and PAvPU of saved parameters");
    eval->add_option("config", config, "Experiment config (JSON)")->required();
    eval->add_option("params", params, "Parameters file")->required();

    auto* verify = app.add_subcommand("verify", "Run a numerical check suite");
    verify->add_option("suite", suite, "kl, grad, limit, rao-blackwell or all")->required();

    auto* dump = app.add_subcommand("dump-attention", "Write attention weights of one head as TSV");
    dump->add_option("config", config, "Experiment config (JSON)")->required();
    dump->add_option("params", params, "Parameters file")->required();
    dump->add_option("--layer", layer, "Layer, counting from 1")->required();
    dump->add_option("--head", head, "Head, counting from 0")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : usage;
    }

    try {
        if (*train) return train_cmd(config);
        if (*eval) return eval_cmd(config, params);
        if (*verify) return verify_cmd(suite);
        if (*dump) return dump_cmd(config, params, layer, head);
    } catch (const bam::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return usage;
    } catch (const bam::DivergenceError& e) {
        std::cerr << "error: training diverged: " << e.what() << '\n';
        return diverged;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return failure;
    }
    return usage;
}
