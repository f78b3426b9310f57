#pragma once

// Experiment definitions, run persistence and the drivers behind the CLI.
// A run owns its output directory; rerunning with the same config and seed
// reproduces every artifact bit for bit on one platform.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "oslab/curvature.hpp"
#include "oslab/detect.hpp"
#include "oslab/ini.hpp"
#include "oslab/net.hpp"
#include "oslab/optim.hpp"
#include "oslab/theory.hpp"

namespace oslab::harness {

// Compact one-line optimizer description, e.g. "gd eta=0.01",
// "sgd eta=0.05 beta=0.9 tau=0", "adam eta=1e-3",
// "splitsgd eta1=0.1 eta2=1e-3 beta=0.9 tau=0.9 threshold_q=0.1".
struct OptimizerSpec {
    optim::OptimizerConfig config;
    std::optional<double> threshold_q;  // SplitSGD: resolve r from the first gradient
    std::string text;                   // original description
};

OptimizerSpec parse_optimizer_spec(const std::string& text);

enum class ExperimentKind {
    chebyshev,
    synthetic_opposing,
    gauss_mixture,
    theory_sim,
    optimizer_compare,
};

ExperimentKind experiment_kind_from_string(const std::string& s);
std::string to_string(ExperimentKind k);

enum class LossesFormat { csv, binary };

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::chebyshev;
    long steps = 1;
    std::uint64_t seed = 1;
    std::string output_dir;
    long stop_after_eos = 0;  // extra steps after the first 2/eta crossing; 0 = run all
    LossesFormat losses_format = LossesFormat::binary;

    nn::NetworkSpec network;
    nn::LossKind loss;
    OptimizerSpec optimizer;

    // detection
    int detect_k = 20;
    double detect_rho = 0.5;
    long detect_window = 500;
    detect::PairMethod detect_method = detect::PairMethod::delta_correlation;

    // curvature instrumentation
    long cadence = 50;  // metrics rows every this many steps
    double curvature_tol = 1e-3;
    int curvature_max_iter = 10000;

    // probes
    std::vector<std::vector<double>> probes;
    bool planted_probe = false;

    // chebyshev
    int cheb_degree = 5;
    int cheb_points = 64;

    // gauss mixture
    int gauss_classes = 10;
    int gauss_n = 5000;
    int gauss_dim = 50;
    double gauss_separation = 3.0;
    bool gauss_planted = true;
    int gauss_planted_size = 100;
    double gauss_planted_amplitude = 8.0;
    long batch_size = 0;  // 0 = full batch

    // theory
    theory::TheoryConfig theory_cfg;
    int theory_n_samples = 10000;

    // flow integration (simulate-theory)
    double flow_dt = 0.0;  // 0 = default_dt
    double flow_t_end = 1.0;
    long flow_sample_stride = 1;

    // theorem verification
    double verify_dt1 = 0.0, verify_tmax1 = 0.0;
    double verify_dt2 = 0.0, verify_tmax2 = 0.0;

    // optimizer comparison
    std::vector<OptimizerSpec> compare_optimizers;
    long compare_window = 500;

    ini::Config raw;  // snapshot written into the run directory
};

ExperimentConfig load_config(const std::string& path);
ExperimentConfig config_from_ini(const ini::Config& cfg);

// Applies OSLAB_OUTPUT_ROOT to relative output directories.
std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg);

struct RunResult {
    std::filesystem::path dir;
    bool eos_crossed = false;
    long eos_crossing_step = -1;
    double final_train_loss = 0.0;
    long last_step = 0;
};

RunResult run_experiment(const ExperimentConfig& cfg);    // dispatch on kind
RunResult run_chebyshev(const ExperimentConfig& cfg);
RunResult run_synthetic_opposing(const ExperimentConfig& cfg);
RunResult run_gauss_mixture(const ExperimentConfig& cfg);
RunResult run_optimizer_compare(const ExperimentConfig& cfg);
RunResult run_theory_sim(const ExperimentConfig& cfg);    // flow integration to CSV
void run_verify_theorems(const ExperimentConfig& cfg);    // verdict JSON

// One probe row: output logits, softmax probabilities for classification,
// and the feature-embedding norm.
struct ProbeRow {
    std::vector<double> outputs;
    std::vector<double> probabilities;  // empty for regression losses
    double feature_norm = 0.0;
};

ProbeRow track_probe(const nn::ParameterVector& params, const nn::NetworkSpec& spec,
                     const nn::LossKind& loss, std::span<const double> probe);

// Dataset builders (deterministic in seed).
nn::Dataset chebyshev_dataset(int degree, int points);
nn::Dataset gauss_mixture_dataset(const ExperimentConfig& cfg, std::uint64_t seed);

// Re-runs detection on a persisted loss matrix exactly as a run does.
detect::PairingResult detect_on_losses(const detect::LossHistory& history, long window_start,
                                       long window_end, int k, double rho,
                                       detect::PairMethod method);
void write_groups_json(const detect::PairingResult& pairs, const std::filesystem::path& path);

int cli(int argc, char** argv);

}  // namespace oslab::harness
