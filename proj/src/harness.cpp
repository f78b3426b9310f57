#include "oslab/harness.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

namespace oslab::harness {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Optimizer spec strings

OptimizerSpec parse_optimizer_spec(const std::string& text) {
    std::stringstream ss(ini::trim(text));
    std::string name;
    ss >> name;
    std::map<std::string, double> kv;
    std::string tok;
    while (ss >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos)
            throw config_error("optimizer option '" + tok + "' is not key=value");
        kv[tok.substr(0, eq)] = parse_double(tok.substr(eq + 1));
    }
    auto take = [&kv](const std::string& key, double fallback) {
        auto it = kv.find(key);
        if (it == kv.end()) return fallback;
        const double v = it->second;
        kv.erase(it);
        return v;
    };

    OptimizerSpec spec;
    spec.text = ini::trim(text);
    if (name == "gd") {
        spec.config = optim::GdConfig{take("eta", 0.01)};
    } else if (name == "sgd") {
        spec.config = optim::SgdConfig{take("eta", 0.01), take("beta", 0.9), take("tau", 0.0)};
    } else if (name == "adam") {
        spec.config = optim::AdamConfig{take("eta", 1e-3), take("beta1", 0.9),
                                        take("beta2", 0.999), take("eps", 1e-8)};
    } else if (name == "splitsgd") {
        optim::SplitSgdConfig c;
        c.eta1 = take("eta1", 0.1);
        c.eta2 = take("eta2", 1e-3);
        c.beta = take("beta", 0.9);
        c.tau = take("tau", 0.9);
        const double q = take("threshold_q", -1.0);
        c.threshold_r = take("threshold_r", 0.0);
        if (q > 0.0) spec.threshold_q = q;
        spec.config = c;
    } else {
        throw config_error("unknown optimizer '" + name + "'");
    }
    if (!kv.empty()) throw config_error("unknown optimizer option '" + kv.begin()->first + "'");
    optim::validate(spec.config);
    return spec;
}

ExperimentKind experiment_kind_from_string(const std::string& s) {
    if (s == "chebyshev") return ExperimentKind::chebyshev;
    if (s == "synthetic_opposing") return ExperimentKind::synthetic_opposing;
    if (s == "gauss_mixture") return ExperimentKind::gauss_mixture;
    if (s == "theory_sim") return ExperimentKind::theory_sim;
    if (s == "optimizer_compare") return ExperimentKind::optimizer_compare;
    throw config_error("unknown experiment kind '" + s + "'");
}

std::string to_string(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::chebyshev: return "chebyshev";
        case ExperimentKind::synthetic_opposing: return "synthetic_opposing";
        case ExperimentKind::gauss_mixture: return "gauss_mixture";
        case ExperimentKind::theory_sim: return "theory_sim";
        case ExperimentKind::optimizer_compare: return "optimizer_compare";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Config loading

namespace {

nn::NetworkSpec network_from_ini(const ini::Config& cfg, const std::vector<int>& default_widths,
                                 nn::Activation default_act) {
    nn::NetworkSpec spec;
    spec.layer_widths = cfg.has("network", "widths") ? cfg.get_ints("network", "widths")
                                                     : default_widths;
    spec.activation = nn::activation_from_string(
        cfg.get_string("network", "activation", nn::to_string(default_act)));
    if (cfg.has("network", "bias")) {
        const std::string b = cfg.get_string("network", "bias");
        if (b == "true" || b == "false") {
            spec.use_bias.assign(spec.layer_widths.size() - 1, b == "true");
        } else {
            for (const auto& item : ini::split(b, ','))
                spec.use_bias.push_back(item == "true" || item == "1");
        }
    }
    spec.validate();
    return spec;
}

theory::TheoryConfig theory_from_ini(const ini::Config& cfg) {
    theory::TheoryConfig t;
    t.d1 = static_cast<int>(cfg.get_long("theory", "d1", t.d1));
    t.d2 = static_cast<int>(cfg.get_long("theory", "d2", t.d2));
    t.alpha = cfg.get_double("theory", "alpha", t.alpha);
    t.p = cfg.get_double("theory", "p", t.p);
    t.beta_norm = cfg.get_double("theory", "beta_norm", t.beta_norm);
    t.validate();
    return t;
}

}  // namespace

ExperimentConfig load_config(const std::string& path) {
    return config_from_ini(ini::Config::parse_file(path));
}

ExperimentConfig config_from_ini(const ini::Config& cfg) {
    ExperimentConfig ec;
    ec.raw = cfg;
    ec.kind = experiment_kind_from_string(cfg.get_string("experiment", "kind"));
    ec.seed = static_cast<std::uint64_t>(cfg.get_long("experiment", "seed", 1));
    ec.output_dir = cfg.get_string("experiment", "output_dir", "");
    ec.stop_after_eos = cfg.get_long("experiment", "stop_after_eos", 0);
    const std::string fmt = cfg.get_string("experiment", "losses_format", "binary");
    if (fmt == "csv")
        ec.losses_format = LossesFormat::csv;
    else if (fmt == "binary")
        ec.losses_format = LossesFormat::binary;
    else
        throw config_error("losses_format must be csv or binary");

    ec.detect_k = static_cast<int>(cfg.get_long("detect", "k", 20));
    ec.detect_rho = cfg.get_double("detect", "rho", 0.5);
    ec.detect_window = cfg.get_long("detect", "window", 500);
    ec.detect_method = detect::pair_method_from_string(
        cfg.get_string("detect", "method", "delta_correlation"));

    ec.cadence = cfg.get_long("curvature", "every_n_steps", 50);
    if (ec.cadence < 1) throw config_error("curvature cadence must be >= 1");
    ec.curvature_tol = cfg.get_double("curvature", "tol", 1e-3);
    ec.curvature_max_iter = static_cast<int>(cfg.get_long("curvature", "max_iter", 10000));

    for (const auto& p : cfg.get_all("probes", "probe")) {
        std::vector<double> v;
        for (const auto& item : ini::split(p, ',')) v.push_back(parse_double(item));
        ec.probes.push_back(std::move(v));
    }
    ec.planted_probe = cfg.get_bool("probes", "planted", false);

    switch (ec.kind) {
        case ExperimentKind::chebyshev: {
            ec.steps = cfg.get_long("experiment", "steps", 160000);
            ec.stop_after_eos = cfg.get_long("experiment", "stop_after_eos", 3000);
            ec.network = network_from_ini(cfg, {1, 32, 32, 1}, nn::Activation::tanh);
            ec.loss.kind = nn::loss_kind_from_string(cfg.get_string("loss", "kind", "square"));
            ec.optimizer =
                parse_optimizer_spec(cfg.get_string("optimizer", "spec", "gd eta=0.01"));
            ec.cheb_degree = static_cast<int>(cfg.get_long("chebyshev", "degree", 5));
            ec.cheb_points = static_cast<int>(cfg.get_long("chebyshev", "points", 64));
            break;
        }
        case ExperimentKind::gauss_mixture: {
            ec.steps = cfg.get_long("experiment", "steps", 3000);
            ec.network = network_from_ini(cfg, {50, 128, 128, 10}, nn::Activation::relu);
            ec.loss.kind =
                nn::loss_kind_from_string(cfg.get_string("loss", "kind", "cross_entropy"));
            ec.loss.label_smoothing = cfg.get_double("loss", "label_smoothing", 0.0);
            ec.optimizer =
                parse_optimizer_spec(cfg.get_string("optimizer", "spec", "adam eta=1e-3"));
            ec.gauss_classes = static_cast<int>(cfg.get_long("gauss", "classes", 10));
            ec.gauss_n = static_cast<int>(cfg.get_long("gauss", "n", 5000));
            ec.gauss_dim = static_cast<int>(cfg.get_long("gauss", "dim", 50));
            ec.gauss_separation = cfg.get_double("gauss", "separation", 3.0);
            ec.gauss_planted = cfg.get_bool("gauss", "planted", true);
            ec.gauss_planted_size = static_cast<int>(cfg.get_long("gauss", "planted_size", 100));
            ec.gauss_planted_amplitude = cfg.get_double("gauss", "planted_amplitude", 8.0);
            ec.batch_size = cfg.get_long("experiment", "batch_size", 0);
            break;
        }
        case ExperimentKind::synthetic_opposing: {
            ec.steps = cfg.get_long("experiment", "steps", 800);
            ec.theory_cfg = theory_from_ini(cfg);
            ec.theory_n_samples = static_cast<int>(cfg.get_long("theory", "n_samples", 10000));
            ec.loss.kind = nn::LossKind::square;
            ec.optimizer =
                parse_optimizer_spec(cfg.get_string("optimizer", "spec", "gd eta=1e-3"));
            ec.network = theory::linear_net_spec(ec.theory_cfg);
            break;
        }
        case ExperimentKind::theory_sim: {
            ec.theory_cfg = theory_from_ini(cfg);
            ec.flow_dt = cfg.get_double("flow", "dt", 0.0);
            ec.flow_t_end = cfg.get_double("flow", "t_end", 1.0);
            ec.flow_sample_stride = cfg.get_long("flow", "sample_stride", 1);
            ec.verify_dt1 = cfg.get_double("verify", "dt1", 0.0);
            ec.verify_tmax1 = cfg.get_double("verify", "tmax1", 0.0);
            ec.verify_dt2 = cfg.get_double("verify", "dt2", 0.0);
            ec.verify_tmax2 = cfg.get_double("verify", "tmax2", 0.0);
            ec.steps = 1;
            break;
        }
        case ExperimentKind::optimizer_compare: {
            ec.steps = cfg.get_long("experiment", "steps", 2500);
            ec.network = network_from_ini(cfg, {50, 64, 64, 10}, nn::Activation::relu);
            ec.loss.kind =
                nn::loss_kind_from_string(cfg.get_string("loss", "kind", "cross_entropy"));
            ec.gauss_classes = static_cast<int>(cfg.get_long("gauss", "classes", 10));
            ec.gauss_n = static_cast<int>(cfg.get_long("gauss", "n", 2000));
            ec.gauss_dim = static_cast<int>(cfg.get_long("gauss", "dim", 50));
            ec.gauss_separation = cfg.get_double("gauss", "separation", 3.0);
            ec.gauss_planted = cfg.get_bool("gauss", "planted", true);
            ec.gauss_planted_size = static_cast<int>(cfg.get_long("gauss", "planted_size", 50));
            ec.gauss_planted_amplitude = cfg.get_double("gauss", "planted_amplitude", 8.0);
            const std::string specs = cfg.get_string(
                "compare", "optimizers", "gd eta=0.1; sgd eta=0.02 beta=0.9 tau=0; adam eta=1e-3");
            for (const auto& item : ini::split(specs, ';'))
                if (!item.empty()) ec.compare_optimizers.push_back(parse_optimizer_spec(item));
            if (ec.compare_optimizers.size() < 2)
                throw config_error("optimizer_compare needs at least two optimizers");
            if (!std::holds_alternative<optim::GdConfig>(ec.compare_optimizers[0].config))
                throw config_error("the first compare optimizer must be gd (it defines v)");
            ec.compare_window = cfg.get_long("compare", "window", 500);
            break;
        }
    }
    return ec;
}

std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg) {
    if (cfg.output_dir.empty()) throw config_error("output_dir is not set");
    fs::path p = cfg.output_dir;
    if (p.is_relative()) {
        if (const char* root = std::getenv("OSLAB_OUTPUT_ROOT")) p = fs::path(root) / p;
    }
    return p;
}

// ---------------------------------------------------------------------------
// Datasets

nn::Dataset chebyshev_dataset(int degree, int points) {
    if (points < 2) throw config_error("chebyshev needs at least 2 points");
    if (degree < 0) throw config_error("chebyshev degree must be >= 0");
    nn::Dataset data;
    data.n = static_cast<std::size_t>(points);
    data.d = 1;
    data.inputs.resize(data.n);
    data.targets.resize(data.n);
    for (int i = 0; i < points; ++i) {
        const double x = -1.0 + 2.0 * i / (points - 1);
        data.inputs[i] = x;
        double tm1 = 1.0, t0 = x;  // T_0, T_1
        double y = degree == 0 ? 1.0 : x;
        for (int k = 2; k <= degree; ++k) {
            y = 2.0 * x * t0 - tm1;
            tm1 = t0;
            t0 = y;
        }
        data.targets[i] = y;
    }
    return data;
}

nn::Dataset gauss_mixture_dataset(const ExperimentConfig& cfg, std::uint64_t seed) {
    const int C = cfg.gauss_classes;
    if (C < 2) throw config_error("gauss_mixture needs at least 2 classes");
    const int d = cfg.gauss_dim;
    const int n_planted = cfg.gauss_planted ? 2 * cfg.gauss_planted_size : 0;
    const int n_gauss = cfg.gauss_n - n_planted;
    if (n_gauss < C) throw config_error("not enough samples for the requested classes");

    nn::Dataset data;
    data.n = static_cast<std::size_t>(cfg.gauss_n);
    data.d = static_cast<std::size_t>(d);
    data.inputs.assign(data.n * data.d, 0.0);
    data.targets.assign(data.n, 0.0);
    data.group_tags.assign(data.n, 0);

    Rng rng(seed);
    std::vector<double> means(static_cast<std::size_t>(C) * d);
    for (int c = 0; c < C; ++c) {
        double* mu = means.data() + static_cast<std::size_t>(c) * d;
        double norm = 0.0;
        for (int j = 0; j < d; ++j) {
            mu[j] = rng.gaussian();
            norm += mu[j] * mu[j];
        }
        norm = std::sqrt(norm);
        for (int j = 0; j < d; ++j) mu[j] *= cfg.gauss_separation / norm;
    }

    std::size_t row = 0;
    for (int c = 0; c < C; ++c) {
        const int count = n_gauss / C + (c < n_gauss % C ? 1 : 0);
        const double* mu = means.data() + static_cast<std::size_t>(c) * d;
        for (int i = 0; i < count; ++i, ++row) {
            double* x = data.inputs.data() + row * data.d;
            for (int j = 0; j < d; ++j) x[j] = mu[j] + rng.gaussian();
            data.targets[row] = c;
        }
    }
    if (cfg.gauss_planted) {
        // Two clusters sharing a dominant first coordinate but labeled with
        // different classes; the shared feature cannot help both.
        for (int g = 0; g < 2; ++g) {
            for (int i = 0; i < cfg.gauss_planted_size; ++i, ++row) {
                double* x = data.inputs.data() + row * data.d;
                x[0] = cfg.gauss_planted_amplitude + 0.5 * rng.gaussian();
                for (int j = 1; j < d; ++j) x[j] = 0.3 * rng.gaussian();
                data.targets[row] = g;  // classes 0 and 1
                data.group_tags[row] = g + 1;
            }
        }
    }
    return data;
}

// ---------------------------------------------------------------------------
// Probes

ProbeRow track_probe(const nn::ParameterVector& params, const nn::NetworkSpec& spec,
                     const nn::LossKind& loss, std::span<const double> probe) {
    ProbeRow row;
    row.outputs = nn::forward(params, spec, probe, 1);
    if (loss.kind == nn::LossKind::cross_entropy) {
        double mx = row.outputs[0];
        for (double v : row.outputs) mx = std::max(mx, v);
        double sum = 0.0;
        row.probabilities.resize(row.outputs.size());
        for (std::size_t i = 0; i < row.outputs.size(); ++i) {
            row.probabilities[i] = std::exp(row.outputs[i] - mx);
            sum += row.probabilities[i];
        }
        for (double& p : row.probabilities) p /= sum;
    }
    auto emb = nn::feature_embedding(params, spec, probe);
    row.feature_norm = nrm2(emb);
    return row;
}

// ---------------------------------------------------------------------------
// Shared instrumented training loop

namespace {

struct MetricsRow {
    long step = 0;
    double train_loss = 0.0;
    double sharpness = std::numeric_limits<double>::quiet_NaN();
    double fraction_increasing = std::numeric_limits<double>::quiet_NaN();
    double masked_fraction = std::numeric_limits<double>::quiet_NaN();
    int eos_flag = 0;
};

struct TrainOutput {
    detect::LossHistory history;
    std::vector<MetricsRow> metrics;
    std::vector<std::pair<long, double>> sharpness_series;
    nn::ParameterVector params;
    bool eos_crossed = false;
    long eos_crossing_step = -1;
    long last_step = 0;
    double final_train_loss = 0.0;
    double resolved_threshold_r = std::numeric_limits<double>::quiet_NaN();
};

struct ProbeLogRow {
    long step = 0;
    int probe_id = 0;
    ProbeRow row;
};

// Per-step observer for experiment-specific extras (reduced coordinates).
using StepHook = std::function<void(long step, const nn::ParameterVector&, double train_loss)>;

struct TrainOptions {
    bool compute_sharpness = true;
    bool record_losses = true;
    StepHook hook;
};

TrainOutput train_and_instrument(const ExperimentConfig& cfg, const nn::NetworkSpec& spec,
                                 nn::ParameterVector params, const nn::Dataset& data,
                                 std::vector<ProbeLogRow>* probe_log,
                                 const TrainOptions& options) {
    optim::OptimizerConfig opt = cfg.optimizer.config;

    // Deterministic epoch-shuffled batch schedule; 0 means full batch.
    const long B = cfg.batch_size;
    std::vector<int> perm(data.n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng batch_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    if (B < 0 || static_cast<std::size_t>(B) > data.n)
        throw config_error("batch_size must lie in [0, n]");
    std::size_t batch_pos = data.n;  // forces a shuffle on first use
    auto next_batch = [&]() {
        if (batch_pos + static_cast<std::size_t>(B) > data.n) {
            for (std::size_t j = data.n; j > 1; --j)
                std::swap(perm[j - 1], perm[batch_rng.uniform_int(j)]);
            batch_pos = 0;  // tail shorter than B is dropped
        }
        std::vector<int> idx(perm.begin() + static_cast<std::ptrdiff_t>(batch_pos),
                             perm.begin() + static_cast<std::ptrdiff_t>(batch_pos) + B);
        batch_pos += static_cast<std::size_t>(B);
        return idx;
    };

    // SplitSGD threshold from the first (full or first-batch) gradient.
    TrainOutput out;
    if (cfg.optimizer.threshold_q) {
        std::vector<int> first_idx;
        const std::vector<int>* subset = nullptr;
        if (B > 0) {
            first_idx = next_batch();
            subset = &first_idx;
        }
        auto g0 = nn::gradient(params, spec, data, cfg.loss, subset);
        auto split = std::get<optim::SplitSgdConfig>(opt);
        split.threshold_r =
            optim::threshold_from_first_gradient(g0.values, *cfg.optimizer.threshold_q);
        out.resolved_threshold_r = split.threshold_r;
        opt = split;
    }

    auto state = optim::make_state(opt, params.size());
    const double eta = optim::base_eta(opt);
    const double eos_threshold = 2.0 / eta;

    std::vector<double> warm;  // power-iteration warm start across cadence points
    auto measure = [&](long step) {
        MetricsRow row;
        row.step = step;
        if (auto r = out.history.row_of(step)) {
            double sum = 0.0;
            for (double v : out.history.row(*r)) sum += v;
            row.train_loss = sum / static_cast<double>(out.history.samples());
        } else {
            row.train_loss = nn::batch_loss(params, spec, data, cfg.loss);
        }
        if (options.compute_sharpness) {
            auto eig = curv::top_eigenpair(curv::hvp_operator(params, spec, data, cfg.loss),
                                           params.size(), cfg.curvature_tol,
                                           cfg.curvature_max_iter, cfg.seed,
                                           warm.empty() ? nullptr : &warm);
            warm = eig.v;
            row.sharpness = eig.lambda;
            out.sharpness_series.emplace_back(step, eig.lambda);
            if (!out.eos_crossed && eig.lambda >= eos_threshold) {
                out.eos_crossed = true;
                out.eos_crossing_step = step;
            }
        }
        row.eos_flag = out.eos_crossed ? 1 : 0;
        if (step > 0 && options.record_losses && out.history.row_of(step - 1))
            row.fraction_increasing = detect::fraction_increasing(out.history, step);
        if (state.split && state.t > 0) row.masked_fraction = optim::masked_fraction(state);
        out.metrics.push_back(row);
        if (probe_log) {
            for (std::size_t pi = 0; pi < cfg.probes.size(); ++pi)
                probe_log->push_back(
                    {step, static_cast<int>(pi),
                     track_probe(params, spec, cfg.loss, cfg.probes[pi])});
        }
        return row.train_loss;
    };

    auto record_step = [&](long step) {
        double loss = std::numeric_limits<double>::quiet_NaN();
        if (options.record_losses) {
            auto li = nn::per_sample_loss(params, spec, data, cfg.loss);
            out.history.record(step, li);
            double sum = 0.0;
            for (double v : li) sum += v;
            loss = sum / static_cast<double>(li.size());
        }
        if (options.hook) {
            if (std::isnan(loss)) loss = nn::batch_loss(params, spec, data, cfg.loss);
            options.hook(step, params, loss);
        }
        return loss;
    };

    record_step(0);
    long stop_at = cfg.steps;
    long step = 0;
    for (step = 1; step <= stop_at; ++step) {
        std::vector<int> batch;
        const std::vector<int>* subset = nullptr;
        if (B > 0) {
            batch = next_batch();
            subset = &batch;
        }
        auto g = nn::gradient(params, spec, data, cfg.loss, subset);
        optim::step(opt, state, params.values, g.values);
        const double loss = record_step(step);
        out.final_train_loss = loss;
        if (step % cfg.cadence == 0 || step == stop_at) {
            const bool was_crossed = out.eos_crossed;
            out.final_train_loss = measure(step);
            if (!was_crossed && out.eos_crossed && cfg.stop_after_eos > 0)
                stop_at = std::min(stop_at, step + cfg.stop_after_eos);
        }
    }
    out.last_step = stop_at;
    if (std::isnan(out.final_train_loss))
        out.final_train_loss = nn::batch_loss(params, spec, data, cfg.loss);
    out.params = std::move(params);
    return out;
}

// ---------------------------------------------------------------------------
// Artifact writers

void write_metrics_csv(const std::vector<MetricsRow>& rows, bool masked_column,
                       const fs::path& path) {
    std::ofstream outf(path);
    if (!outf) throw config_error("cannot write " + path.string());
    outf << "step,train_loss,sharpness,fraction_increasing";
    if (masked_column) outf << ",masked_fraction";
    outf << ",eos_flag\n";
    for (const auto& r : rows) {
        outf << r.step << ',' << fmt_double(r.train_loss) << ',' << fmt_double(r.sharpness) << ','
             << fmt_double(r.fraction_increasing);
        if (masked_column) outf << ',' << fmt_double(r.masked_fraction);
        outf << ',' << r.eos_flag << "\n";
    }
}

void write_probes_csv(const std::vector<ProbeLogRow>& rows, const nn::NetworkSpec& spec,
                      bool classification, const fs::path& path) {
    std::ofstream outf(path);
    if (!outf) throw config_error("cannot write " + path.string());
    const int C = spec.output_dim();
    outf << "step,probe_id";
    for (int c = 0; c < C; ++c) outf << ",out_" << c;
    if (classification)
        for (int c = 0; c < C; ++c) outf << ",prob_" << c;
    outf << ",feature_norm\n";
    for (const auto& r : rows) {
        outf << r.step << ',' << r.probe_id;
        for (double v : r.row.outputs) outf << ',' << fmt_double(v);
        if (classification)
            for (double v : r.row.probabilities) outf << ',' << fmt_double(v);
        outf << ',' << fmt_double(r.row.feature_norm) << "\n";
    }
}

void write_losses(const detect::LossHistory& history, const ExperimentConfig& cfg,
                  const fs::path& dir) {
    if (cfg.losses_format == LossesFormat::csv) {
        detect::write_losses_csv(history, (dir / "losses.csv").string());
    } else {
        detect::write_losses_binary(history, (dir / "losses.bin").string(),
                                    (dir / "losses.json").string());
    }
}

json group_pair_to_json(const detect::GroupPair& p) {
    json j;
    j["group_a"] = p.group_a;
    j["group_b"] = p.group_b;
    j["anti_correlation"] = p.anti_correlation;
    j["window"] = {p.window_start, p.window_end};
    return j;
}

}  // namespace

void write_groups_json(const detect::PairingResult& pairs, const std::filesystem::path& path) {
    json j;
    j["pairs"] = json::array();
    for (const auto& p : pairs.pairs) j["pairs"].push_back(group_pair_to_json(p));
    j["excluded_zero_variance"] = pairs.excluded;
    std::ofstream out(path);
    if (!out) throw config_error("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

detect::PairingResult detect_on_losses(const detect::LossHistory& history, long window_start,
                                       long window_end, int k, double rho,
                                       detect::PairMethod method) {
    return detect::pair_groups(history, window_start, window_end, k, rho, method);
}

namespace {

// Post-crossing detection window used by run drivers and the detect CLI.
std::pair<long, long> detection_window(const detect::LossHistory& history, bool crossed,
                                       long crossing_step, long window) {
    const long last = history.step_at(history.rows() - 1);
    long start = crossed ? crossing_step : std::max(history.step_at(0), last - window);
    long end = std::min(last, start + window);
    return {start, end};
}

void write_summary_json(const fs::path& dir, const ExperimentConfig& cfg, const TrainOutput& out,
                        std::pair<long, long> window) {
    json j;
    j["experiment"] = to_string(cfg.kind);
    j["seed"] = cfg.seed;
    j["last_step"] = out.last_step;
    j["final_train_loss"] = out.final_train_loss;
    j["eos"] = {{"crossed", out.eos_crossed},
                {"crossing_step", out.eos_crossing_step},
                {"threshold", 2.0 / optim::base_eta(cfg.optimizer.config)}};
    j["detect_window"] = {window.first, window.second};
    if (!std::isnan(out.resolved_threshold_r))
        j["resolved_threshold_r"] = out.resolved_threshold_r;
    std::ofstream f(dir / "summary.json");
    f << j.dump(2) << "\n";
}

RunResult finish_run(const ExperimentConfig& cfg, const nn::NetworkSpec& spec, TrainOutput& out,
                     const std::vector<ProbeLogRow>& probe_log, const fs::path& dir) {
    write_metrics_csv(out.metrics, optim::is_split(cfg.optimizer.config), dir / "metrics.csv");
    write_losses(out.history, cfg, dir);
    const auto window = detection_window(out.history, out.eos_crossed, out.eos_crossing_step,
                                         cfg.detect_window);
    detect::PairingResult pairs;
    try {
        pairs = detect::pair_groups(out.history, window.first, window.second, cfg.detect_k,
                                    cfg.detect_rho, cfg.detect_method);
    } catch (const config_error&) {
        // window too small for pairing (short runs): emit an empty list
    }
    write_groups_json(pairs, dir / "groups.json");
    write_probes_csv(probe_log, spec, cfg.loss.kind == nn::LossKind::cross_entropy,
                     dir / "probes.csv");
    write_summary_json(dir, cfg, out, window);

    RunResult res;
    res.dir = dir;
    res.eos_crossed = out.eos_crossed;
    res.eos_crossing_step = out.eos_crossing_step;
    res.final_train_loss = out.final_train_loss;
    res.last_step = out.last_step;
    return res;
}

fs::path prepare_dir(const ExperimentConfig& cfg) {
    const fs::path dir = resolve_output_dir(cfg);
    fs::create_directories(dir);
    cfg.raw.write_file((dir / "config.ini").string());
    return dir;
}

}  // namespace

RunResult run_chebyshev(const ExperimentConfig& cfg) {
    if (cfg.network.input_dim() != 1 || cfg.network.output_dim() != 1)
        throw config_error("chebyshev needs a 1-input 1-output regression network");
    const fs::path dir = prepare_dir(cfg);
    auto data = chebyshev_dataset(cfg.cheb_degree, cfg.cheb_points);
    auto params = nn::init_network(cfg.network, cfg.seed);
    std::vector<ProbeLogRow> probe_log;
    TrainOptions options;
    auto out = train_and_instrument(cfg, cfg.network, std::move(params), data, &probe_log,
                                    options);
    return finish_run(cfg, cfg.network, out, probe_log, dir);
}

RunResult run_gauss_mixture(const ExperimentConfig& cfg) {
    if (cfg.loss.kind == nn::LossKind::cross_entropy &&
        cfg.network.output_dim() != cfg.gauss_classes)
        throw config_error("network output width must match the class count");
    const fs::path dir = prepare_dir(cfg);
    auto data = gauss_mixture_dataset(cfg, cfg.seed);
    auto params = nn::init_network(cfg.network, cfg.seed);

    ExperimentConfig effective = cfg;
    if (cfg.planted_probe) {
        // Probe on the planted dominant coordinate.
        std::vector<double> probe(static_cast<std::size_t>(cfg.gauss_dim), 0.0);
        probe[0] = cfg.gauss_planted_amplitude;
        effective.probes.push_back(std::move(probe));
    }

    std::vector<ProbeLogRow> probe_log;
    TrainOptions options;
    options.compute_sharpness = std::holds_alternative<optim::GdConfig>(cfg.optimizer.config);
    auto out = train_and_instrument(effective, cfg.network, std::move(params), data, &probe_log,
                                    options);
    return finish_run(effective, cfg.network, out, probe_log, dir);
}

RunResult run_synthetic_opposing(const ExperimentConfig& cfg) {
    const fs::path dir = prepare_dir(cfg);
    const nn::NetworkSpec spec = theory::linear_net_spec(cfg.theory_cfg);
    auto sampled = theory::sample_empirical_dataset(cfg.theory_cfg, cfg.theory_n_samples,
                                                    cfg.seed);
    auto params = theory::theory_init_params(cfg.theory_cfg);

    ExperimentConfig effective = cfg;
    if (cfg.planted_probe) {
        // Probe carrying only the planted conflicting feature.
        const int d1 = cfg.theory_cfg.d1, d2 = cfg.theory_cfg.d2;
        const double a =
            std::sqrt(cfg.theory_cfg.alpha / (cfg.theory_cfg.p * d2));
        std::vector<double> probe(static_cast<std::size_t>(d1 + d2), 0.0);
        for (int j = 0; j < d2; ++j) probe[static_cast<std::size_t>(d1) + j] = a;
        effective.probes.push_back(std::move(probe));
    }

    std::vector<theory::ReducedCoords> reduced;
    const double eta = optim::base_eta(cfg.optimizer.config);
    TrainOptions options;
    options.hook = [&](long step, const nn::ParameterVector& p, double loss) {
        reduced.push_back(theory::reduced_from_params(p, cfg.theory_cfg, step, eta, loss));
    };
    std::vector<ProbeLogRow> probe_log;
    auto out = train_and_instrument(effective, spec, std::move(params), sampled.data, &probe_log,
                                    options);

    {
        std::ofstream f(dir / "theory.csv");
        f << "step,t_flow,eps,delta,o,c,b_signed,train_loss\n";
        for (const auto& rc : reduced)
            f << rc.step << ',' << fmt_double(rc.t_flow) << ',' << fmt_double(rc.eps) << ','
              << fmt_double(rc.delta) << ',' << fmt_double(rc.o) << ',' << fmt_double(rc.c) << ','
              << fmt_double(rc.b_signed) << ',' << fmt_double(rc.train_loss) << "\n";
    }
    {
        json j;
        j["group_plus"] = sampled.group_plus;
        j["group_minus"] = sampled.group_minus;
        std::ofstream f(dir / "planted.json");
        f << j.dump(2) << "\n";
    }
    return finish_run(effective, spec, out, probe_log, dir);
}

RunResult run_theory_sim(const ExperimentConfig& cfg) {
    const fs::path dir = prepare_dir(cfg);
    const double dt = cfg.flow_dt > 0.0 ? cfg.flow_dt : theory::default_dt(cfg.theory_cfg);
    auto traj = theory::integrate_flow(theory::init_state(cfg.theory_cfg), cfg.theory_cfg,
                                       cfg.flow_t_end, dt, cfg.flow_sample_stride);
    std::ofstream f(dir / "flow.csv");
    f << "t,eps,delta,o,c,loss,lambda_max\n";
    for (const auto& pt : traj.points)
        f << fmt_double(pt.state.t) << ',' << fmt_double(pt.state.eps) << ','
          << fmt_double(pt.state.delta) << ',' << fmt_double(pt.state.o) << ','
          << fmt_double(pt.state.c) << ',' << fmt_double(pt.loss) << ','
          << fmt_double(pt.lambda_max) << "\n";
    if (traj.aborted) throw numeric_error("flow integration aborted on non-finite state");
    RunResult res;
    res.dir = dir;
    res.final_train_loss = traj.points.back().loss;
    return res;
}

namespace {

json theorem_report_to_json(const theory::TheoremReport& rep) {
    json j;
    j["applicable"] = rep.applicable;
    j["pass"] = rep.pass;
    j["inconclusive"] = rep.inconclusive;
    j["gate_note"] = rep.gate_note;
    j["values"] = rep.values;
    j["clauses"] = json::array();
    for (const auto& [name, ok] : rep.clauses) j["clauses"].push_back({{name, ok}});
    return j;
}

}  // namespace

void run_verify_theorems(const ExperimentConfig& cfg) {
    const fs::path dir = prepare_dir(cfg);
    auto rep1 = theory::verify_theorem1(cfg.theory_cfg, cfg.verify_dt1, cfg.verify_tmax1);
    auto rep2 = theory::verify_theorem2(cfg.theory_cfg, cfg.verify_dt2, cfg.verify_tmax2);
    json j;
    j["theorem1"] = theorem_report_to_json(rep1);
    j["theorem2"] = theorem_report_to_json(rep2);
    std::ofstream f(dir / "verdicts.json");
    f << j.dump(2) << "\n";
}

RunResult run_optimizer_compare(const ExperimentConfig& cfg) {
    const fs::path dir = prepare_dir(cfg);
    auto data = gauss_mixture_dataset(cfg, cfg.seed);
    const auto init = nn::init_network(cfg.network, cfg.seed);

    // Pass 1: GD run with sharpness instrumentation defines the shared top
    // eigenvector at its first 2/eta crossing (final step when none, flagged).
    ExperimentConfig gd_cfg = cfg;
    gd_cfg.optimizer = cfg.compare_optimizers[0];
    const double gd_eta = optim::base_eta(gd_cfg.optimizer.config);
    std::vector<double> v_shared;
    bool crossed = false;
    long v_step = -1;

    {
        nn::ParameterVector params = init;
        auto opt_state = optim::make_state(gd_cfg.optimizer.config, params.size());
        std::vector<double> warm;
        for (long step = 1; step <= cfg.steps; ++step) {
            auto g = nn::gradient(params, cfg.network, data, cfg.loss);
            optim::step(gd_cfg.optimizer.config, opt_state, params.values, g.values);
            if (step % cfg.cadence == 0 || step == cfg.steps) {
                auto eig = curv::top_eigenpair(
                    curv::hvp_operator(params, cfg.network, data, cfg.loss), params.size(),
                    cfg.curvature_tol, cfg.curvature_max_iter, cfg.seed,
                    warm.empty() ? nullptr : &warm);
                warm = eig.v;
                if (eig.lambda >= 2.0 / gd_eta) {
                    v_shared = eig.v;
                    crossed = true;
                    v_step = step;
                    break;
                }
                if (step == cfg.steps) {  // fallback: final step, flagged
                    v_shared = eig.v;
                    v_step = step;
                }
            }
        }
    }
    if (v_shared.empty()) throw numeric_error("compare could not compute a shared eigenvector");

    // Pass 2: every optimizer from the identical initial point; per-step
    // projections onto v and effective step sizes along v.
    std::vector<std::string> names;
    std::vector<std::vector<double>> projections, effective, losses;
    for (const auto& ospec : cfg.compare_optimizers) {
        names.push_back(optim::variant_name(ospec.config));
        nn::ParameterVector params = init;
        optim::OptimizerConfig opt = ospec.config;
        if (ospec.threshold_q) {
            auto g0 = nn::gradient(params, cfg.network, data, cfg.loss);
            auto split = std::get<optim::SplitSgdConfig>(opt);
            split.threshold_r =
                optim::threshold_from_first_gradient(g0.values, *ospec.threshold_q);
            opt = split;
        }
        auto opt_state = optim::make_state(opt, params.size());
        std::vector<double> proj(cfg.steps + 1, 0.0), eff(cfg.steps + 1, 0.0),
            lrow(cfg.steps + 1, std::numeric_limits<double>::quiet_NaN());
        std::vector<double> prev = params.values;
        proj[0] = 0.0;
        lrow[0] = nn::batch_loss(params, cfg.network, data, cfg.loss);
        for (long step = 1; step <= cfg.steps; ++step) {
            auto g = nn::gradient(params, cfg.network, data, cfg.loss);
            optim::step(opt, opt_state, params.values, g.values);
            double p = 0.0, e = 0.0;
            for (std::size_t i = 0; i < params.size(); ++i) {
                p += (params.values[i] - init.values[i]) * v_shared[i];
                e += (params.values[i] - prev[i]) * v_shared[i];
            }
            proj[static_cast<std::size_t>(step)] = p;
            eff[static_cast<std::size_t>(step)] = std::abs(e);
            prev = params.values;
            if (step % cfg.cadence == 0 || step == cfg.steps)
                lrow[static_cast<std::size_t>(step)] =
                    nn::batch_loss(params, cfg.network, data, cfg.loss);
        }
        projections.push_back(std::move(proj));
        effective.push_back(std::move(eff));
        losses.push_back(std::move(lrow));
    }

    auto write_series = [&](const fs::path& path, const std::string& prefix,
                            const std::vector<std::vector<double>>& cols, bool skip_nan) {
        std::ofstream f(path);
        f << "step";
        for (std::size_t i = 0; i < names.size(); ++i) f << ',' << prefix << '_' << names[i]
                                                         << '_' << i;
        f << "\n";
        for (long step = 0; step <= cfg.steps; ++step) {
            bool any = false;
            for (const auto& col : cols)
                if (!std::isnan(col[static_cast<std::size_t>(step)])) any = true;
            if (skip_nan && !any) continue;
            f << step;
            for (const auto& col : cols) f << ',' << fmt_double(col[static_cast<std::size_t>(step)]);
            f << "\n";
        }
    };
    write_series(dir / "projections.csv", "proj", projections, false);
    write_series(dir / "effective_steps.csv", "eff", effective, false);
    write_series(dir / "compare_loss.csv", "loss", losses, true);

    json j;
    j["eos_crossed"] = crossed;
    j["v_step"] = v_step;
    j["v_fallback_final_step"] = !crossed;
    j["optimizers"] = names;
    std::ofstream f(dir / "compare.json");
    f << j.dump(2) << "\n";

    RunResult res;
    res.dir = dir;
    res.eos_crossed = crossed;
    res.eos_crossing_step = crossed ? v_step : -1;
    res.last_step = cfg.steps;
    return res;
}

RunResult run_experiment(const ExperimentConfig& cfg) {
    switch (cfg.kind) {
        case ExperimentKind::chebyshev: return run_chebyshev(cfg);
        case ExperimentKind::synthetic_opposing: return run_synthetic_opposing(cfg);
        case ExperimentKind::gauss_mixture: return run_gauss_mixture(cfg);
        case ExperimentKind::theory_sim: return run_theory_sim(cfg);
        case ExperimentKind::optimizer_compare: return run_optimizer_compare(cfg);
    }
    throw config_error("unhandled experiment kind");
}

}  // namespace oslab::harness
