#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "oslab/harness.hpp"

using namespace oslab;
namespace fs = std::filesystem;

namespace {

fs::path test_root() {
    static const fs::path root =
        fs::temp_directory_path() / ("oslab_harness_test_" + std::to_string(::getpid()));
    fs::create_directories(root);
    return root;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

harness::ExperimentConfig tiny_chebyshev(const std::string& name, long steps = 60) {
    ini::Config raw = ini::Config::parse_string(
        "[experiment]\n"
        "kind = chebyshev\n"
        "steps = " + std::to_string(steps) + "\n"
        "seed = 5\n"
        "losses_format = csv\n"
        "[network]\n"
        "widths = 1,8,1\n"
        "[optimizer]\n"
        "spec = gd eta=0.05\n"
        "[curvature]\n"
        "every_n_steps = 20\n"
        "tol = 1e-4\n"
        "[detect]\n"
        "k = 2\n"
        "window = 40\n"
        "[chebyshev]\n"
        "degree = 3\n"
        "points = 16\n"
        "[probes]\n"
        "probe = 0.5\n");
    raw.set("experiment", "output_dir", (test_root() / name).string());
    return harness::config_from_ini(raw);
}

int run_cli(std::vector<std::string> args) {
    std::vector<char*> argv;
    args.insert(args.begin(), "oslab");
    for (auto& a : args) argv.push_back(a.data());
    return harness::cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

TEST_CASE("ini config round-trips") {
    const std::string text =
        "[experiment]\n"
        "kind = chebyshev\n"
        "seed = 3\n"
        "\n"
        "[probes]\n"
        "probe = 0.5\n"
        "probe = -0.25,1\n";
    auto cfg = ini::Config::parse_string(text);
    CHECK(cfg.get_string("experiment", "kind") == "chebyshev");
    CHECK(cfg.get_long("experiment", "seed") == 3);
    CHECK(cfg.get_all("probes", "probe").size() == 2);
    CHECK(cfg.to_string() == text);
    CHECK_THROWS_AS(ini::Config::parse_string("[bad\nx = 1\n"), config_error);
    CHECK_THROWS_AS(ini::Config::parse_string("[s]\nnokey\n"), config_error);
}

TEST_CASE("optimizer spec strings") {
    auto gd = harness::parse_optimizer_spec("gd eta=0.25");
    CHECK(std::get<optim::GdConfig>(gd.config).eta == 0.25);
    auto sgd = harness::parse_optimizer_spec("sgd eta=0.1 beta=0.8 tau=0.3");
    CHECK(std::get<optim::SgdConfig>(sgd.config).tau == 0.3);
    auto adam = harness::parse_optimizer_spec("adam eta=2e-3");
    CHECK(std::get<optim::AdamConfig>(adam.config).beta2 == 0.999);
    auto split = harness::parse_optimizer_spec(
        "splitsgd eta1=0.1 eta2=0.002 beta=0.9 tau=0.9 threshold_q=0.1");
    CHECK(split.threshold_q.value() == 0.1);
    CHECK_THROWS_AS(harness::parse_optimizer_spec("rmsprop eta=0.1"), config_error);
    CHECK_THROWS_AS(harness::parse_optimizer_spec("gd eta=0.1 bogus=1"), config_error);
}

TEST_CASE("chebyshev dataset matches the polynomial") {
    auto data = harness::chebyshev_dataset(5, 5);  // x = -1, -0.5, 0, 0.5, 1
    auto t5 = [](double x) { return 16 * std::pow(x, 5) - 20 * std::pow(x, 3) + 5 * x; };
    for (std::size_t i = 0; i < data.n; ++i)
        CHECK(data.targets[i] == doctest::Approx(t5(data.inputs[i])).epsilon(1e-12));
    auto d0 = harness::chebyshev_dataset(0, 3);
    for (double y : d0.targets) CHECK(y == 1.0);
}

TEST_CASE("gauss mixture dataset") {
    harness::ExperimentConfig cfg;
    cfg.gauss_classes = 3;
    cfg.gauss_n = 100;
    cfg.gauss_dim = 8;
    cfg.gauss_planted = true;
    cfg.gauss_planted_size = 10;
    cfg.gauss_planted_amplitude = 6.0;
    auto data = harness::gauss_mixture_dataset(cfg, 11);
    CHECK(data.n == 100);
    CHECK(data.d == 8);
    int tagged1 = 0, tagged2 = 0;
    for (std::size_t i = 0; i < data.n; ++i) {
        if (data.group_tags[i] == 1) {
            ++tagged1;
            CHECK(data.targets[i] == 0.0);
            CHECK(data.inputs[i * 8] > 3.0);  // dominant coordinate
        } else if (data.group_tags[i] == 2) {
            ++tagged2;
            CHECK(data.targets[i] == 1.0);
            CHECK(data.inputs[i * 8] > 3.0);
        }
    }
    CHECK(tagged1 == 10);
    CHECK(tagged2 == 10);
    auto again = harness::gauss_mixture_dataset(cfg, 11);
    CHECK(again.inputs == data.inputs);
}

TEST_CASE("track_probe") {
    nn::NetworkSpec spec;
    spec.layer_widths = {4, 6, 3};
    spec.activation = nn::Activation::relu;
    nn::ParameterVector zero;
    zero.partition = nn::make_partition(spec);
    zero.values.assign(spec.param_count(), 0.0);
    std::vector<double> probe = {1.0, -2.0, 0.0, 3.0};

    auto row = harness::track_probe(zero, spec, {nn::LossKind::cross_entropy, 0.0}, probe);
    CHECK(row.feature_norm == 0.0);
    for (double p : row.probabilities) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    auto p = nn::init_network(spec, 17);
    auto a = harness::track_probe(p, spec, {nn::LossKind::cross_entropy, 0.0}, probe);
    auto b = harness::track_probe(p, spec, {nn::LossKind::cross_entropy, 0.0}, probe);
    CHECK(a.outputs == b.outputs);
    CHECK(a.feature_norm == b.feature_norm);
}

TEST_CASE("chebyshev run emits schema-complete, deterministic artifacts") {
    auto cfg = tiny_chebyshev("cheb_a");
    auto res = harness::run_chebyshev(cfg);
    CHECK(fs::exists(res.dir / "config.ini"));
    CHECK(fs::exists(res.dir / "metrics.csv"));
    CHECK(fs::exists(res.dir / "losses.csv"));
    CHECK(fs::exists(res.dir / "groups.json"));
    CHECK(fs::exists(res.dir / "probes.csv"));
    CHECK(fs::exists(res.dir / "summary.json"));

    const std::string metrics = slurp(res.dir / "metrics.csv");
    CHECK(metrics.find("step,train_loss,sharpness,fraction_increasing,eos_flag") == 0);
    // not a split run: no masked_fraction column
    CHECK(metrics.find("masked_fraction") == std::string::npos);
    const std::string probes = slurp(res.dir / "probes.csv");
    CHECK(probes.find("step,probe_id,out_0,feature_norm") == 0);

    SUBCASE("rerun with the same config and seed is bit-identical") {
        auto cfg2 = tiny_chebyshev("cheb_b");
        auto res2 = harness::run_chebyshev(cfg2);
        CHECK(slurp(res2.dir / "metrics.csv") == metrics);
        CHECK(slurp(res2.dir / "losses.csv") == slurp(res.dir / "losses.csv"));
        CHECK(slurp(res2.dir / "groups.json") == slurp(res.dir / "groups.json"));
        CHECK(slurp(res2.dir / "probes.csv") == slurp(res.dir / "probes.csv"));
    }

    SUBCASE("degree-0 target trains to near zero loss without reaching 2/eta") {
        auto cfg0 = tiny_chebyshev("cheb_d0", 400);
        ini::Config raw = cfg0.raw;
        raw.set("chebyshev", "degree", "0");
        cfg0 = harness::config_from_ini(raw);
        auto r0 = harness::run_chebyshev(cfg0);
        CHECK(r0.final_train_loss < 1e-3);
        CHECK_FALSE(r0.eos_crossed);
    }
}

TEST_CASE("masked_fraction column appears exactly for split runs") {
    auto cfg = tiny_chebyshev("cheb_split");
    ini::Config raw = cfg.raw;
    raw.set("optimizer", "spec", "splitsgd eta1=0.05 eta2=1e-3 beta=0.9 tau=0.9 threshold_q=0.1");
    cfg = harness::config_from_ini(raw);
    auto res = harness::run_chebyshev(cfg);
    const std::string metrics = slurp(res.dir / "metrics.csv");
    CHECK(metrics.find("masked_fraction") != std::string::npos);
    const std::string summary = slurp(res.dir / "summary.json");
    CHECK(summary.find("resolved_threshold_r") != std::string::npos);
}

TEST_CASE("detect cli reproduces the run's groups.json exactly") {
    auto cfg = tiny_chebyshev("cheb_closure", 120);
    auto res = harness::run_chebyshev(cfg);

    // window recorded in summary.json; reproduce through the public cli
    const std::string summary = slurp(res.dir / "summary.json");
    auto find_num = [&](const std::string& key) {
        auto pos = summary.find('[', summary.find(key));
        long a = std::stol(summary.substr(pos + 1));
        auto comma = summary.find(',', pos);
        long b = std::stol(summary.substr(comma + 1));
        return std::pair<long, long>{a, b};
    };
    auto [wstart, wend] = find_num("detect_window");

    const fs::path out = test_root() / "closure_groups.json";
    const int rc = run_cli({"detect", "--losses", (res.dir / "losses.csv").string(), "--k", "2",
                            "--rho", "0.5", "--window",
                            std::to_string(wstart) + ":" + std::to_string(wend), "--out",
                            out.string()});
    CHECK(rc == 0);
    CHECK(slurp(out) == slurp(res.dir / "groups.json"));
}

TEST_CASE("cli exit codes") {
    CHECK(run_cli({"run", "/nonexistent/config.ini"}) == 1);
    CHECK(run_cli({"definitely-not-a-command"}) == 1);
    // validation error inside a config
    const fs::path bad = test_root() / "bad.ini";
    {
        std::ofstream f(bad);
        f << "[experiment]\nkind = chebyshev\nsteps = 10\noutput_dir = " +
                 (test_root() / "badrun").string() +
                 "\n[network]\nwidths = 2,2\n";  // wrong input width for chebyshev
    }
    CHECK(run_cli({"run", bad.string()}) == 1);
}

TEST_CASE("synthetic opposing run writes reduced coordinates and planted groups") {
    ini::Config raw = ini::Config::parse_string(
        "[experiment]\n"
        "kind = synthetic_opposing\n"
        "steps = 40\n"
        "seed = 6\n"
        "losses_format = csv\n"
        "[theory]\n"
        "d1 = 4\n"
        "d2 = 8\n"
        "alpha = 25\n"
        "p = 0.05\n"
        "beta_norm = 5\n"
        "n_samples = 400\n"
        "[optimizer]\n"
        "spec = gd eta=1e-3\n"
        "[curvature]\n"
        "every_n_steps = 10\n"
        "tol = 1e-3\n"
        "[detect]\n"
        "k = 5\n"
        "window = 30\n"
        "[probes]\n"
        "planted = true\n");
    raw.set("experiment", "output_dir", (test_root() / "synth").string());
    auto cfg = harness::config_from_ini(raw);
    auto res = harness::run_synthetic_opposing(cfg);
    CHECK(fs::exists(res.dir / "theory.csv"));
    CHECK(fs::exists(res.dir / "planted.json"));
    const std::string theory_csv = slurp(res.dir / "theory.csv");
    CHECK(theory_csv.find("step,t_flow,eps,delta,o,c,b_signed,train_loss") == 0);
    const std::string probes = slurp(res.dir / "probes.csv");
    CHECK(probes.find("step,probe_id") == 0);
}

TEST_CASE("gauss control run: two separated clusters, high accuracy, no persistent pairs") {
    ini::Config raw = ini::Config::parse_string(
        "[experiment]\n"
        "kind = gauss_mixture\n"
        "steps = 400\n"
        "seed = 2\n"
        "losses_format = csv\n"
        "[network]\n"
        "widths = 10,16,2\n"
        "[gauss]\n"
        "classes = 2\n"
        "n = 300\n"
        "dim = 10\n"
        "separation = 4\n"
        "planted = false\n"
        "[optimizer]\n"
        "spec = adam eta=5e-3\n"
        "[curvature]\n"
        "every_n_steps = 100\n"
        "[detect]\n"
        "k = 10\n"
        "rho = 0.9\n"
        "window = 200\n");
    raw.set("experiment", "output_dir", (test_root() / "gauss_ctl").string());
    auto cfg = harness::config_from_ini(raw);
    auto res = harness::run_gauss_mixture(cfg);

    // train accuracy from the final parameters
    auto data = harness::gauss_mixture_dataset(cfg, cfg.seed);
    // replay to final params: rely on determinism of the run
    auto params = nn::init_network(cfg.network, cfg.seed);
    auto state = optim::make_state(cfg.optimizer.config, params.size());
    for (long s = 1; s <= cfg.steps; ++s) {
        auto g = nn::gradient(params, cfg.network, data, cfg.loss);
        optim::step(cfg.optimizer.config, state, params.values, g.values);
    }
    auto out = nn::forward(params, cfg.network, data.inputs, data.n);
    int correct = 0;
    for (std::size_t i = 0; i < data.n; ++i) {
        const int pred = out[2 * i] > out[2 * i + 1] ? 0 : 1;
        if (pred == static_cast<int>(data.targets[i])) ++correct;
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(data.n) > 0.99);

    const std::string groups = slurp(res.dir / "groups.json");
    CHECK(groups.find("\"pairs\": []") != std::string::npos);
    CHECK(res.final_train_loss < 0.05);
}

TEST_CASE("output root environment variable resolves relative directories") {
    setenv("OSLAB_OUTPUT_ROOT", test_root().c_str(), 1);
    harness::ExperimentConfig cfg;
    cfg.output_dir = "rel_run";
    CHECK(harness::resolve_output_dir(cfg) == test_root() / "rel_run");
    unsetenv("OSLAB_OUTPUT_ROOT");
    cfg.output_dir = "/abs/run";
    CHECK(harness::resolve_output_dir(cfg) == fs::path("/abs/run"));
}
