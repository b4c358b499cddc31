#include <cstdint>
#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nr2d3/config.hpp"
#include "nr2d3/experiment.hpp"
#include "nr2d3/gradsuite.hpp"

namespace {

using nr2d3::ExperimentConfig;

// Loads the config and applies the command-line overrides of the run seed and out dir.
ExperimentConfig effective_config(const std::string& path, const CLI::App* sub, std::uint64_t seed,
                                  const std::string& out_dir) {
    ExperimentConfig cfg = nr2d3::load_config(path);
    if (sub->count("--seed") > 0) cfg.seed = seed;
    if (sub->count("--out") > 0) cfg.out_dir = out_dir;
    nr2d3::validate_config(cfg);
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale laboratory for reward finetuning of a 3d shape diffusion model"};
    app.require_subcommand(1);

    std::vector<std::string> configs;
    std::uint64_t seed = 0;
    std::string out_dir;
    int instances = 100;

    CLI::App* pretrain = app.add_subcommand("pretrain", "train the base diffusion net on the shape corpus");
    CLI::App* finetune = app.add_subcommand("finetune", "reward-finetune from the pretrained base");
    CLI::App* eval = app.add_subcommand("eval", "score the newest checkpoint without training");
    for (CLI::App* sub : {pretrain, finetune, eval}) {
        sub->add_option("--config", configs, "experiment config file")->required()->expected(1);
        sub->add_option("--seed", seed, "override run.seed");
        sub->add_option("--out", out_dir, "override run.out_dir");
    }

    CLI::App* compare = app.add_subcommand("compare", "run several configs and emit a combined table");
    compare->add_option("--config", configs, "experiment config files, one per method")->required();
    compare->add_option("--out", out_dir, "directory for the combined table and plots");

    CLI::App* gradcheck =
        app.add_subcommand("gradcheck", "finite-difference verification of every differentiable path");
    gradcheck->add_option("--seed", seed, "suite seed");
    gradcheck->add_option("--instances", instances, "random instances per path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (pretrain->parsed()) {
            nr2d3::run_pretrain(effective_config(configs.front(), pretrain, seed, out_dir));
        } else if (finetune->parsed()) {
            nr2d3::run_finetune(effective_config(configs.front(), finetune, seed, out_dir));
        } else if (eval->parsed()) {
            nr2d3::run_eval(effective_config(configs.front(), eval, seed, out_dir));
        } else if (compare->parsed()) {
            nr2d3::run_compare(configs, compare->count("--out") > 0 ? out_dir : "out/compare");
        } else if (gradcheck->parsed()) {
            const std::vector<nr2d3::PathResult> results = nr2d3::run_gradient_suite(instances, seed);
            std::cout << nr2d3::gradient_suite_table(results);
            return nr2d3::gradient_suite_ok(results) ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
