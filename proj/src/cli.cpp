#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "oslab/harness.hpp"

namespace oslab::harness {

namespace fs = std::filesystem;

namespace {

ExperimentConfig load_with_overrides(const std::string& config_path, long seed_override,
                                     const std::string& dir_override) {
    ini::Config raw = ini::Config::parse_file(config_path);
    if (seed_override >= 0) raw.set("experiment", "seed", std::to_string(seed_override));
    if (!dir_override.empty()) raw.set("experiment", "output_dir", dir_override);
    return config_from_ini(raw);
}

detect::LossHistory load_losses(const std::string& path) {
    const fs::path p(path);
    if (p.extension() == ".csv") return detect::read_losses_csv(path);
    fs::path sidecar = p;
    sidecar.replace_extension(".json");
    return detect::read_losses_binary(path, sidecar.string());
}

int run_guarded(const std::function<void()>& body) {
    try {
        body();
        return 0;
    } catch (const config_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const numeric_error& e) {
        std::cerr << "numerical fault: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int cli(int argc, char** argv) {
    CLI::App app{"training-dynamics laboratory: loss-oscillation detection, curvature probes "
                 "and reduced-model simulation"};
    app.require_subcommand(1);

    long seed_override = -1;
    std::string dir_override;
    app.add_option("--seed", seed_override, "override the config seed");
    app.add_option("--output-dir", dir_override, "override the config output directory");

    std::string config_path;
    auto* c_run = app.add_subcommand("run", "execute an experiment config");
    c_run->add_option("config", config_path, "config file")->required();

    auto* c_sim = app.add_subcommand("simulate-theory", "integrate the reduced gradient flow");
    c_sim->add_option("config", config_path, "config file")->required();

    auto* c_verify = app.add_subcommand("verify-theorems", "numeric theorem verification");
    c_verify->add_option("config", config_path, "config file")->required();

    std::string losses_path;
    int det_k = 20;
    double det_rho = 0.5;
    std::string det_window;
    std::string det_out = "groups.json";
    auto* c_detect = app.add_subcommand("detect", "pair opposing groups from a loss matrix");
    c_detect->add_option("--losses", losses_path, "losses.csv or losses.bin")->required();
    c_detect->add_option("--k", det_k, "selection size per step");
    c_detect->add_option("--rho", det_rho, "correlation threshold");
    c_detect->add_option("--window", det_window, "start:end step window")->required();
    c_detect->add_option("--out", det_out, "output json path");

    std::string run_dir;
    long curv_step = -1;
    auto* c_curv = app.add_subcommand("curvature", "curvature report for a finished run");
    c_curv->add_option("--run", run_dir, "run directory")->required();
    c_curv->add_option("--step", curv_step, "metrics step to inspect")->required();

    auto* c_cmp = app.add_subcommand("compare", "optimizer comparison from one initialization");
    c_cmp->add_option("--config", config_path, "config file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    if (c_run->parsed()) {
        return run_guarded([&] {
            auto cfg = load_with_overrides(config_path, seed_override, dir_override);
            auto res = run_experiment(cfg);
            std::cout << "run complete: " << res.dir.string() << " (final train loss "
                      << fmt_double(res.final_train_loss) << ")\n";
        });
    }
    if (c_sim->parsed()) {
        return run_guarded([&] {
            auto cfg = load_with_overrides(config_path, seed_override, dir_override);
            auto res = run_theory_sim(cfg);
            std::cout << "flow written to " << (res.dir / "flow.csv").string() << "\n";
        });
    }
    if (c_verify->parsed()) {
        return run_guarded([&] {
            auto cfg = load_with_overrides(config_path, seed_override, dir_override);
            run_verify_theorems(cfg);
            std::cout << "verdicts written to "
                      << (resolve_output_dir(cfg) / "verdicts.json").string() << "\n";
        });
    }
    if (c_detect->parsed()) {
        return run_guarded([&] {
            const auto parts = ini::split(det_window, ':');
            if (parts.size() != 2) throw config_error("--window must be start:end");
            auto history = load_losses(losses_path);
            auto pairs = detect_on_losses(history, parse_long(parts[0]), parse_long(parts[1]),
                                          det_k, det_rho,
                                          detect::PairMethod::delta_correlation);
            write_groups_json(pairs, det_out);
            std::cout << pairs.pairs.size() << " pair(s) written to " << det_out << "\n";
        });
    }
    if (c_curv->parsed()) {
        return run_guarded([&] {
            // Reproduce the run's dataset and report per-sample metrics at a step.
            auto cfg = config_from_ini(ini::Config::parse_file(run_dir + "/config.ini"));
            if (cfg.kind != ExperimentKind::chebyshev)
                throw config_error("curvature reports are supported for chebyshev runs");
            auto data = chebyshev_dataset(cfg.cheb_degree, cfg.cheb_points);
            // Replay training to the requested step.
            auto params = nn::init_network(cfg.network, cfg.seed);
            auto opt = cfg.optimizer.config;
            auto state = optim::make_state(opt, params.size());
            for (long s = 1; s <= curv_step; ++s) {
                auto g = nn::gradient(params, cfg.network, data, cfg.loss);
                optim::step(opt, state, params.values, g.values);
            }
            auto rep = curv::curvature_report(params, cfg.network, data, cfg.loss,
                                              cfg.curvature_tol, cfg.curvature_max_iter,
                                              cfg.seed);
            std::cout << "step," << curv_step << "\nsharpness," << fmt_double(rep.sharpness)
                      << "\n";
            for (const auto& [name, frac] : rep.layer_fractions)
                std::cout << "fraction_" << name << ',' << fmt_double(frac) << "\n";
            for (std::size_t i = 0; i < rep.per_sample_grad_norm.size(); ++i)
                std::cout << "sample," << i << ',' << fmt_double(rep.per_sample_grad_norm[i])
                          << ',' << fmt_double(rep.per_sample_curvature[i]) << "\n";
        });
    }
    if (c_cmp->parsed()) {
        return run_guarded([&] {
            auto cfg = load_with_overrides(config_path, seed_override, dir_override);
            if (cfg.kind != ExperimentKind::optimizer_compare)
                throw config_error("compare needs an optimizer_compare config");
            auto res = run_optimizer_compare(cfg);
            std::cout << "comparison written to " << res.dir.string() << "\n";
        });
    }
    return 1;
}

}  // namespace oslab::harness
