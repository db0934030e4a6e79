// Command-line driver: one experiment per invocation.

#include "gmsflow/cli.hpp"

#include "CLI11.hpp"

#include <iostream>

int main(int argc, char** argv)
{
    CLI::App app{"Conservative multiscale flow experiments"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<int> level;
    std::vector<int> coarse;
    std::optional<int> refine;

    for (const auto& name : gmsflow::subcommands) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "experiment config (key = value with [sections])")->check(CLI::ExistingFile);
        sub->add_option("--out", out_dir, "output directory");
        sub->add_option("--seed", seed, "seed of the random field generator");
        sub->add_option("--level", level, "enrichment level L")->check(CLI::PositiveNumber);
        sub->add_option("--coarse", coarse, "coarse cells NX NY")->expected(2)->check(CLI::PositiveNumber);
        sub->add_option("--refine", refine, "fine cells per coarse cell and axis")->check(CLI::PositiveNumber);
    }
    CLI11_PARSE(app, argc, argv);

    gmsflow::ExperimentConfig cfg;
    try {
        if (!config_path.empty())
            cfg = gmsflow::load_config(config_path);
    } catch (const gmsflow::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    }
    if (!out_dir.empty())
        cfg.out_dir = out_dir;
    if (seed)
        cfg.seed = *seed;
    if (level) {
        cfg.level = *level;
        cfg.levels = {*level};
    }
    if (coarse.size() == 2) {
        cfg.nx = coarse[0];
        cfg.ny = coarse[1];
    }
    if (refine)
        cfg.refine = *refine;

    return gmsflow::run(app.get_subcommands().front()->get_name(), cfg, std::cout, std::cerr);
}
