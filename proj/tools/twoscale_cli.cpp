#include "twoscale/harness.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace twoscale;

int main(int argc, char** argv) {
    CLI::App app{"Two-scale adaptive simulation of nonlinear flow in heterogeneous media"};
    app.require_subcommand(1);

    std::string config_path, out_dir, problem;
    bool serial = false;
    unsigned seed = 0;
    app.add_option("--config", config_path, "JSON configuration file")->check(CLI::ExistingFile);
    app.add_option("--out", out_dir, "output directory");
    app.add_flag("--serial", serial, "single-threaded cell solves");
    app.add_option("--seed", seed, "recorded in the config; all runs are deterministic");

    auto* upscale = app.add_subcommand("upscale", "effective tensors on the level-0 grid");
    auto* macro = app.add_subcommand("run-macro", "macro-scale simulation");
    auto* fine = app.add_subcommand("run-fine", "fine-scale reference simulation");
    for (auto* sub : {upscale, macro, fine}) {
        sub->add_option("--problem", problem, "table1 | quasi-periodic | spe10 preset")
            ->default_val("quasi-periodic");
    }
    std::string experiment;
    auto* exp = app.add_subcommand("experiment", "run a named experiment");
    exp->add_option("name", experiment, "table1 | quasi-periodic | spe10 | compare-harmonic")
        ->required()
        ->check(CLI::IsMember({"table1", "quasi-periodic", "spe10", "compare-harmonic"}));
    auto* harmonic = app.add_subcommand("compare-harmonic", "homogenized vs harmonic-mean tensors on SPE10");

    CLI11_PARSE(app, argc, argv);

    try {
        std::string base = problem.empty() ? "quasi-periodic" : problem;
        if (exp->parsed()) base = experiment;
        if (harmonic->parsed()) base = "compare-harmonic";
        ExperimentConfig cfg = preset(base);
        if (!config_path.empty()) cfg = load_config(config_path, cfg);
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (serial) cfg.serial = true;
        if (app.count("--seed")) cfg.seed = seed;
        cfg.validate();

        nlohmann::json report;
        if (upscale->parsed()) report = upscale_command(cfg);
        else if (macro->parsed()) report = run_macro_command(cfg);
        else if (fine->parsed()) report = run_fine_command(cfg);
        else report = run_experiment(base, cfg);
        std::cout << report.dump(2) << '\n';
    } catch (const InvalidInput& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const NonConvergence& e) {
        std::cerr << "nonlinear solver failed: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
