#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tca/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitNumeric = 2;

void print_rows(const tca::ExperimentResult& result) {
    std::printf("%-22s %6s %9s %9s %10s %10s %7s\n", "method", "seed", "accuracy", "ece", "atfd", "mtas", "failed");
    for (const auto& c : result.cells) {
        const auto& r = c.row;
        std::printf("%-22s %6llu %9.4f %9.2e %10.6f %10.6f %7zu\n", r.method.c_str(),
                    static_cast<unsigned long long>(r.seed), r.accuracy, r.ece, r.mean_atfd, r.mean_mtas,
                    r.n_failed);
    }
}

int cmd_validate(const std::string& path) {
    const auto cfg = tca::load_config(path);
    tca::validate_config(cfg);
    std::cout << tca::manifest_json(cfg).dump(2) << "\n";
    return kExitOk;
}

int cmd_run(const std::string& path, const std::string& out_override) {
    auto cfg = tca::load_config(path);
    if (!out_override.empty()) {
        cfg.output_dir = out_override;
    }
    const auto result = tca::run_experiment(cfg);
    tca::write_results(result, cfg.output_dir);
    print_rows(result);
    const std::size_t failures = result.total_failures();
    std::cout << "results: " << cfg.output_dir << "\n";
    if (failures > cfg.failure_budget) {
        std::cerr << "numeric failures: " << failures << " exceed budget " << cfg.failure_budget << "\n";
        return kExitNumeric;
    }
    return kExitOk;
}

int cmd_grid(const std::string& path, const std::vector<double>& alphas, const std::vector<double>& betas,
             const std::string& out_override) {
    auto cfg = tca::load_config(path);
    if (!out_override.empty()) {
        cfg.output_dir = out_override;
    }
    const auto grid = tca::grid_search(cfg, alphas, betas);
    tca::write_grid(grid, cfg.output_dir);
    std::printf("%10s %10s %12s %12s\n", "alpha", "beta", "mean_ece", "mean_acc");
    for (const auto& c : grid.cells) {
        std::printf("%10g %10g %12.4e %12.6f\n", c.alpha, c.beta, c.mean_ece, c.mean_accuracy);
    }
    std::printf("best: alpha=%g beta=%g\n", grid.best_alpha, grid.best_beta);
    return kExitOk;
}

int cmd_plots(const std::string& dir) {
    const auto s = tca::emit_plot_data(dir);
    std::printf("reliability rows: %zu, pca points: %zu, scatter rows: %zu\n", s.reliability_rows, s.pca_points,
                s.scatter_rows);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Test-time prompt calibration experiments"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::string results_dir;
    std::vector<double> alphas;
    std::vector<double> betas;

    auto* run = app.add_subcommand("run", "Run every configured method over every seed");
    run->add_option("config", config_path, "Experiment config (JSON)")->required();
    run->add_option("-o,--output", out_dir, "Override the output directory");

    auto* grid = app.add_subcommand("grid", "Grid search (alpha, beta) for the lowest mean ECE");
    grid->add_option("config", config_path, "Experiment config (JSON)")->required();
    grid->add_option("--alpha", alphas, "Alpha values")->required()->expected(1, -1);
    grid->add_option("--beta", betas, "Beta values")->required()->expected(1, -1);
    grid->add_option("-o,--output", out_dir, "Override the output directory");

    auto* plots = app.add_subcommand("plots", "Emit reliability, PCA and dispersion plot data");
    plots->add_option("results_dir", results_dir, "Directory written by `run`")->required();

    auto* validate = app.add_subcommand("validate", "Check a config and print the resolved manifest");
    validate->add_option("config", config_path, "Experiment config (JSON)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitValidation;
    }

    try {
        if (*run) {
            return cmd_run(config_path, out_dir);
        }
        if (*grid) {
            return cmd_grid(config_path, alphas, betas, out_dir);
        }
        if (*plots) {
            return cmd_plots(results_dir);
        }
        return cmd_validate(config_path);
    } catch (const tca::NumericFailure& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
}
