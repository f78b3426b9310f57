#include "oslab/theory.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace oslab::theory {

void TheoryConfig::validate() const {
    if (d1 < 1 || d2 < 1) throw config_error("d1, d2 must be positive");
    if (d2 < d1) throw config_error("d2 must be >= d1");
    if (!(alpha >= 0.0)) throw config_error("alpha must be nonnegative");
    if (!(p > 0.0 && p < 1.0)) throw config_error("outlier fraction p must lie in (0, 1)");
    if (!(beta_norm > 0.0)) throw config_error("beta_norm must be positive");
}

TheoryState init_state(const TheoryConfig& config) {
    config.validate();
    TheoryState s;
    const double dsum = config.d1 + config.d2;
    s.eps = std::sqrt(1.0 / dsum);
    s.delta = std::sqrt((config.d1 - 1) / dsum);
    s.o = config.d2 / dsum;
    s.c = 1.0;
    s.t = 0.0;
    return s;
}

double population_loss(const TheoryState& s, const TheoryConfig& config) {
    const double resid = s.c * s.eps - config.beta_norm;
    return 0.5 * (resid * resid + s.c * s.c * s.delta * s.delta +
                  config.alpha * (s.c * s.c * s.o + 1.0));
}

FlowDeriv flow_rhs(const TheoryState& s, const TheoryConfig& config) {
    FlowDeriv d;
    const double c2 = s.c * s.c;
    d.d_eps = -c2 * s.eps + s.c * config.beta_norm;
    d.d_delta = -c2 * s.delta;
    d.d_o = -2.0 * config.alpha * c2 * s.o;
    d.d_c = -s.c * (s.eps * s.eps + s.delta * s.delta + config.alpha * s.o) +
            s.eps * config.beta_norm;
    return d;
}

namespace {

TheoryState add_scaled(const TheoryState& s, const FlowDeriv& d, double h) {
    TheoryState r = s;
    r.eps += h * d.d_eps;
    r.delta += h * d.d_delta;
    r.o += h * d.d_o;
    r.c += h * d.d_c;
    return r;
}

bool finite(const TheoryState& s) {
    return std::isfinite(s.eps) && std::isfinite(s.delta) && std::isfinite(s.o) &&
           std::isfinite(s.c);
}

}  // namespace

TheoryState flow_rk4_step(const TheoryState& s, const TheoryConfig& config, double dt) {
    const FlowDeriv k1 = flow_rhs(s, config);
    const FlowDeriv k2 = flow_rhs(add_scaled(s, k1, 0.5 * dt), config);
    const FlowDeriv k3 = flow_rhs(add_scaled(s, k2, 0.5 * dt), config);
    const FlowDeriv k4 = flow_rhs(add_scaled(s, k3, dt), config);
    TheoryState r = s;
    r.eps += dt / 6.0 * (k1.d_eps + 2.0 * (k2.d_eps + k3.d_eps) + k4.d_eps);
    r.delta += dt / 6.0 * (k1.d_delta + 2.0 * (k2.d_delta + k3.d_delta) + k4.d_delta);
    r.o += dt / 6.0 * (k1.d_o + 2.0 * (k2.d_o + k3.d_o) + k4.d_o);
    r.c += dt / 6.0 * (k1.d_c + 2.0 * (k2.d_c + k3.d_c) + k4.d_c);
    r.t = s.t + dt;
    return r;
}

double default_dt(const TheoryConfig& config) {
    return config.alpha > 0.0 ? std::min(1e-3, 0.1 / config.alpha) : 1e-3;
}

FlowTrajectory integrate_flow(const TheoryState& initial, const TheoryConfig& config,
                              double t_end, double dt, long sample_stride) {
    config.validate();
    if (!(dt > 0.0)) throw config_error("dt must be positive");
    if (sample_stride < 1) throw config_error("sample_stride must be >= 1");

    FlowTrajectory traj;
    TheoryState s = initial;
    auto sample = [&](const TheoryState& st) {
        traj.points.push_back({st, population_loss(st, config), hessian_lambda_max(st, config)});
    };
    sample(s);
    const long n_steps = static_cast<long>(std::ceil((t_end - initial.t) / dt - 1e-12));
    for (long i = 1; i <= n_steps; ++i) {
        s = flow_rk4_step(s, config, dt);
        if (!finite(s)) {
            traj.aborted = true;
            break;
        }
        if (i % sample_stride == 0 || i == n_steps) sample(s);
    }
    return traj;
}

GdTrajectory gd_trajectory(const TheoryState& initial, const TheoryConfig& config, double eta,
                           long steps) {
    return gd_trajectory(initial, config, eta, steps, std::sqrt(std::max(0.0, initial.o)));
}

GdTrajectory gd_trajectory(const TheoryState& initial, const TheoryConfig& config, double eta,
                           long steps, double b0_signed) {
    config.validate();
    if (!(eta > 0.0)) throw config_error("eta must be positive");

    GdTrajectory traj;
    TheoryState s = initial;
    double b = b0_signed;
    s.o = b * b;
    traj.points.push_back({s, b, population_loss(s, config)});
    for (long i = 1; i <= steps; ++i) {
        const FlowDeriv d = flow_rhs(s, config);
        const double c2 = s.c * s.c;
        TheoryState next = s;
        next.eps += eta * d.d_eps;
        next.delta += eta * d.d_delta;
        next.c += eta * d.d_c;
        b *= (1.0 - eta * config.alpha * c2);
        next.o = b * b;
        next.t = s.t + eta;
        s = next;
        if (!finite(s) || !std::isfinite(b) || std::abs(b) > 1e150) {
            traj.diverged = true;
            break;
        }
        traj.points.push_back({s, b, population_loss(s, config)});
    }
    return traj;
}

double hessian_lambda_max(const TheoryState& s, const TheoryConfig& config) {
    const double c2 = s.c * s.c;
    const double alpha = config.alpha;
    const double bnorm = std::sqrt(s.eps * s.eps + s.delta * s.delta);
    const double so = std::sqrt(std::max(0.0, s.o));

    Eigen::Matrix3d M;
    M << c2, 0.0, 2.0 * s.c * bnorm,
         0.0, alpha * c2, 2.0 * s.c * alpha * so,
         2.0 * s.c * bnorm, 2.0 * s.c * alpha * so, bnorm * bnorm + alpha * s.o;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(M, Eigen::EigenvaluesOnly);
    double lam = es.eigenvalues().maxCoeff();
    lam = std::max(lam, c2);          // plane orthogonal to b in the first block
    lam = std::max(lam, alpha * c2);  // plane orthogonal to b_o in the second
    return lam;
}

std::vector<double> dense_hessian(const TheoryState& s, const TheoryConfig& config) {
    config.validate();
    if (config.d1 < 2 && s.delta != 0.0)
        throw config_error("delta > 0 requires d1 >= 2 for the canonical embedding");
    const int d1 = config.d1, d2 = config.d2;
    const int n = d1 + d2 + 1;
    const double c2 = s.c * s.c;
    std::vector<double> b(d1, 0.0);
    b[0] = s.eps;
    if (d1 >= 2) b[1] = s.delta;
    const double bo = std::sqrt(std::max(0.0, s.o) / d2);

    std::vector<double> H(static_cast<std::size_t>(n) * n, 0.0);
    auto at = [&](int i, int j) -> double& { return H[static_cast<std::size_t>(i) * n + j]; };
    for (int i = 0; i < d1; ++i) at(i, i) = c2;
    for (int i = 0; i < d2; ++i) at(d1 + i, d1 + i) = config.alpha * c2;
    for (int i = 0; i < d1; ++i) {
        at(i, n - 1) = 2.0 * s.c * b[i];
        at(n - 1, i) = 2.0 * s.c * b[i];
    }
    for (int i = 0; i < d2; ++i) {
        at(d1 + i, n - 1) = 2.0 * s.c * config.alpha * bo;
        at(n - 1, d1 + i) = 2.0 * s.c * config.alpha * bo;
    }
    at(n - 1, n - 1) = s.eps * s.eps + s.delta * s.delta + config.alpha * s.o;
    return H;
}

double comparison_c2_closed_form(const TheoryConfig& config, double t) {
    const double m = config.m();
    return m / (1.0 - (1.0 - m) * std::exp(-2.0 * config.alpha * m * t));
}

double comparison_o_closed_form(const TheoryConfig& config, double t) {
    const double m = config.m();
    return m / (std::exp(2.0 * config.alpha * m * t) * (1.0 + 1.0 / config.k()) - 1.0);
}

std::vector<ComparisonPoint> integrate_comparison(const TheoryConfig& config, double t_end,
                                                  double dt) {
    config.validate();
    if (!(dt > 0.0)) throw config_error("dt must be positive");
    auto rhs = [&](const ComparisonPoint& y) {
        const double d = -2.0 * config.alpha * y.c2 * y.o;
        return std::pair<double, double>{d, d};
    };
    std::vector<ComparisonPoint> out;
    ComparisonPoint y{0.0, 1.0, config.d2 / static_cast<double>(config.d1 + config.d2)};
    out.push_back(y);
    const long n_steps = static_cast<long>(std::ceil(t_end / dt - 1e-12));
    for (long i = 1; i <= n_steps; ++i) {
        const auto k1 = rhs(y);
        const auto k2 = rhs({y.t, y.c2 + 0.5 * dt * k1.first, y.o + 0.5 * dt * k1.second});
        const auto k3 = rhs({y.t, y.c2 + 0.5 * dt * k2.first, y.o + 0.5 * dt * k2.second});
        const auto k4 = rhs({y.t, y.c2 + dt * k3.first, y.o + dt * k3.second});
        y.c2 += dt / 6.0 * (k1.first + 2.0 * (k2.first + k3.first) + k4.first);
        y.o += dt / 6.0 * (k1.second + 2.0 * (k2.second + k3.second) + k4.second);
        y.t += dt;
        out.push_back(y);
    }
    return out;
}

namespace {

// Explicit-constant gates distilled from the proofs. Theorem 1 needs
// ||beta|| > max(d1/sqrt(d1+d2), 24/5) and
// sqrt(alpha) >= ||beta|| ln k * max(k, 1/(m ln(||beta||/2))).
bool theorem1_gate(const TheoryConfig& cfg, std::string& note) {
    const double beta = cfg.beta_norm;
    const double floor1 = cfg.d1 / std::sqrt(static_cast<double>(cfg.d1 + cfg.d2));
    if (!(beta > std::max(floor1, 24.0 / 5.0))) {
        note = "beta_norm must exceed max(d1/sqrt(d1+d2), 24/5)";
        return false;
    }
    const double lnk = std::log(cfg.k());
    const double need =
        beta * lnk * std::max(cfg.k(), 1.0 / (cfg.m() * std::log(beta / 2.0)));
    if (!(std::sqrt(cfg.alpha) >= need)) {
        note = "sqrt(alpha) below the sharpness-decrease gate " + fmt_double(need);
        return false;
    }
    note = "gates passed: sqrt(alpha) >= " + fmt_double(need);
    return true;
}

bool theorem2_gate(const TheoryConfig& cfg, std::string& note) {
    if (!theorem1_gate(cfg, note)) return false;
    const double beta = cfg.beta_norm;
    const double k = cfg.k(), m = cfg.m();
    const double lnk = std::log(k);
    const double ra = std::sqrt(cfg.alpha);
    if (!(ra >= 1.0 + k * lnk)) {
        note = "sqrt(alpha) below 1 + k ln k";
        return false;
    }
    const double gate1 = std::pow(beta * lnk / (m * std::log(beta / 2.0)), 2.0);
    if (!(cfg.alpha > gate1)) {
        note = "alpha below the exponential-damping gate " + fmt_double(gate1);
        return false;
    }
    // The inequality the growth-comparison argument needs.
    const double lhs = 1.0 / (cfg.d1 + cfg.d2) + beta * beta * (1.0 + k) * lnk / ra + 1.0 +
                       cfg.alpha * std::exp(-ra * lnk);
    if (!(beta >= lhs)) {
        note = "beta_norm below the growth-comparison gate " + fmt_double(lhs);
        return false;
    }
    note = "gates passed";
    return true;
}

}  // namespace

TheoremReport verify_theorem1(const TheoryConfig& config, double dt, double t_max) {
    config.validate();
    if (dt <= 0.0) dt = default_dt(config);
    const double bound = std::log(config.beta_norm / 2.0) / (2.0 * config.beta_norm);
    if (t_max <= 0.0) t_max = 1.5 * bound;

    TheoremReport rep;
    rep.applicable = theorem1_gate(config, rep.gate_note);
    const TheoryState s0 = init_state(config);
    const double lam0 = hessian_lambda_max(s0, config);
    rep.values["lambda_max_init"] = lam0;
    rep.values["alpha"] = config.alpha;
    rep.values["event_time_bound"] = bound;
    rep.values["dt"] = dt;
    if (!rep.applicable) return rep;

    const bool interval_ok = lam0 > config.alpha && lam0 < 3.0 * config.alpha;
    rep.clauses.emplace_back("lambda_max_init_in_open_interval", interval_ok);

    // Integrate until the first dc/dt >= 0 event, tracking how long the
    // sharpness stays nonincreasing.
    TheoryState s = s0;
    double lam_prev = lam0;
    double nonincreasing_until = 0.0;
    bool still_nonincreasing = true;
    double event_time = -1.0;
    const long n_steps = static_cast<long>(std::ceil(t_max / dt));
    for (long i = 1; i <= n_steps; ++i) {
        s = flow_rk4_step(s, config, dt);
        if (!finite(s)) {
            rep.inconclusive = true;
            return rep;
        }
        const double lam = hessian_lambda_max(s, config);
        if (still_nonincreasing) {
            if (lam <= lam_prev * (1.0 + 1e-9)) {
                nonincreasing_until = s.t;
            } else {
                still_nonincreasing = false;
            }
        }
        lam_prev = lam;
        if (event_time < 0.0 && flow_rhs(s, config).d_c >= 0.0) {
            event_time = s.t;
            break;
        }
    }
    rep.values["nonincreasing_until"] = nonincreasing_until;
    rep.values["dc_event_time"] = event_time;

    const bool event_found = event_time >= 0.0;
    const bool event_in_time = event_found && event_time <= bound + 2.0 * dt;
    rep.clauses.emplace_back("dc_event_within_bound", event_in_time);
    const bool span_reaches_event =
        event_found && nonincreasing_until + 2.0 * dt >= event_time;
    rep.clauses.emplace_back("sharpness_nonincreasing_until_event", span_reaches_event);
    if (!event_found) rep.inconclusive = true;

    rep.pass = interval_ok && event_in_time && span_reaches_event;
    return rep;
}

TheoremReport verify_theorem2(const TheoryConfig& config, double dt, double t_max) {
    config.validate();
    if (dt <= 0.0) dt = default_dt(config);
    if (t_max <= 0.0) t_max = 5.0;

    TheoremReport rep;
    rep.applicable = theorem2_gate(config, rep.gate_note);
    const double target = 5.0 / 8.0 * config.beta_norm * config.alpha;
    rep.values["sharpness_target"] = target;
    rep.values["dt"] = dt;
    if (!rep.applicable) return rep;

    TheoryState s = init_state(config);
    double lam_max = hessian_lambda_max(s, config);
    double lam_at_event = -1.0, event_time = -1.0;
    bool converged = false;
    const long n_steps = static_cast<long>(std::ceil(t_max / dt));
    for (long i = 1; i <= n_steps; ++i) {
        s = flow_rk4_step(s, config, dt);
        if (!finite(s)) break;
        const double lam = hessian_lambda_max(s, config);
        lam_max = std::max(lam_max, lam);
        if (event_time < 0.0 && flow_rhs(s, config).d_c >= 0.0) {
            event_time = s.t;
            lam_at_event = lam;
        }
        if (s.c * s.eps >= 0.999 * config.beta_norm) {
            converged = true;
            break;
        }
    }
    rep.values["lambda_max_attained"] = lam_max;
    rep.values["t_end"] = s.t;
    rep.values["dc_event_time"] = event_time;
    rep.inconclusive = !converged;

    const bool reached = lam_max >= target;
    rep.clauses.emplace_back("max_sharpness_reaches_5_8_beta_alpha", reached);
    const bool trend = lam_at_event >= 0.0 &&
                       hessian_lambda_max(s, config) >= lam_at_event * (1.0 - 1e-9);
    rep.clauses.emplace_back("sharpness_nondecreasing_after_event", trend);
    rep.pass = converged && reached && trend;
    return rep;
}

nn::NetworkSpec linear_net_spec(const TheoryConfig& config) {
    nn::NetworkSpec spec;
    spec.layer_widths = {config.d1 + config.d2, 1, 1};
    spec.activation = nn::Activation::identity;
    spec.use_bias = {false, false};
    return spec;
}

nn::ParameterVector theory_init_params(const TheoryConfig& config) {
    // Deterministic init matching the reduced boundary conditions:
    // b = eps0 e1 + delta0 e2, b_o = 1/sqrt(d1+d2) * 1, c = 1.
    const TheoryState s0 = init_state(config);
    const nn::NetworkSpec spec = linear_net_spec(config);
    nn::ParameterVector params;
    params.partition = nn::make_partition(spec);
    params.values.assign(spec.param_count(), 0.0);
    params.values[0] = s0.eps;
    if (config.d1 >= 2) params.values[1] = s0.delta;
    const double bo0 = 1.0 / std::sqrt(static_cast<double>(config.d1 + config.d2));
    for (int j = 0; j < config.d2; ++j)
        params.values[static_cast<std::size_t>(config.d1) + j] = bo0;
    params.values[static_cast<std::size_t>(config.d1 + config.d2)] = 1.0;
    return params;
}

SampledData sample_empirical_dataset(const TheoryConfig& config, int n_samples,
                                     std::uint64_t seed) {
    config.validate();
    if (n_samples * config.p < 2.0)
        throw config_error("need n_samples * p >= 2 for a plantable outlier set");
    const int d1 = config.d1, d2 = config.d2;
    const int dim = d1 + d2;
    const double a = std::sqrt(config.alpha / (config.p * d2));

    // x ~ N(0, I_{d1}); with probability p the conflicting block is +-a*1,
    // else zero. Signs alternate among the sampled outliers so the two
    // groups stay balanced and the sample matches the symmetric population
    // the reduced flow describes. The target is beta^T x + (1/sqrt(d2))
    // 1^T |x_o| with beta = beta_norm * e1.
    SampledData out;
    Rng rng(seed);
    out.data.n = static_cast<std::size_t>(n_samples);
    out.data.d = static_cast<std::size_t>(dim);
    out.data.inputs.assign(out.data.n * out.data.d, 0.0);
    out.data.targets.assign(out.data.n, 0.0);
    out.data.group_tags.assign(out.data.n, 0);
    bool next_plus = true;
    for (int i = 0; i < n_samples; ++i) {
        double* row = out.data.inputs.data() + static_cast<std::size_t>(i) * dim;
        for (int j = 0; j < d1; ++j) row[j] = rng.gaussian();
        double target = config.beta_norm * row[0];
        if (rng.bernoulli(config.p)) {
            const bool plus = next_plus;
            next_plus = !next_plus;
            const double sgn = plus ? 1.0 : -1.0;
            for (int j = 0; j < d2; ++j) row[d1 + j] = sgn * a;
            target += a * std::sqrt(static_cast<double>(d2));
            out.data.group_tags[i] = plus ? 1 : 2;
            (plus ? out.group_plus : out.group_minus).push_back(i);
        }
        out.data.targets[i] = target;
    }
    if (out.group_plus.empty() || out.group_minus.empty())
        throw numeric_error("degenerate sampling: a planted sign group is empty");
    return out;
}

ReducedCoords reduced_from_params(const nn::ParameterVector& params, const TheoryConfig& config,
                                  long step, double eta, double train_loss) {
    const int d1 = config.d1, d2 = config.d2;
    ReducedCoords rc;
    rc.step = step;
    rc.t_flow = kEmpiricalLossScale * eta * static_cast<double>(step);
    const double* pv = params.values.data();
    rc.eps = pv[0];
    double dsum = 0.0;
    for (int j = 1; j < d1; ++j) dsum += pv[j] * pv[j];
    rc.delta = std::sqrt(dsum);
    double osum = 0.0, usum = 0.0;
    for (int j = 0; j < d2; ++j) {
        osum += pv[d1 + j] * pv[d1 + j];
        usum += pv[d1 + j];
    }
    rc.o = osum;
    rc.b_signed = usum / std::sqrt(static_cast<double>(d2));
    rc.c = pv[d1 + d2];
    rc.train_loss = train_loss;
    return rc;
}

EmpiricalResult empirical_simulation(const TheoryConfig& config, int n_samples,
                                     std::uint64_t seed, const optim::OptimizerConfig& opt,
                                     long steps) {
    optim::validate(opt);
    if (steps < 1) throw config_error("steps must be >= 1");

    EmpiricalResult res;
    res.spec = linear_net_spec(config);
    SampledData sampled = sample_empirical_dataset(config, n_samples, seed);
    res.data = std::move(sampled.data);
    res.group_plus = std::move(sampled.group_plus);
    res.group_minus = std::move(sampled.group_minus);
    res.params = theory_init_params(config);

    const nn::LossKind loss{nn::LossKind::square, 0.0};
    auto state = optim::make_state(opt, res.params.size());
    const double eta = optim::base_eta(opt);

    auto record = [&](long step) {
        auto li = nn::per_sample_loss(res.params, res.spec, res.data, loss);
        if (!all_finite(li)) return false;
        res.history.record(step, li);
        double lsum = 0.0;
        for (double v : li) lsum += v;
        res.reduced.push_back(reduced_from_params(res.params, config, step, eta,
                                                  lsum / static_cast<double>(li.size())));
        return true;
    };

    record(0);
    for (long step = 1; step <= steps; ++step) {
        auto g = nn::gradient(res.params, res.spec, res.data, loss);
        // Past the stability threshold the iterates eventually blow up;
        // return the recorded prefix flagged rather than faulting.
        if (!all_finite(g.values)) {
            res.diverged = true;
            break;
        }
        optim::step(opt, state, res.params.values, g.values);
        if (!record(step)) {
            res.diverged = true;
            break;
        }
    }
    return res;
}

}  // namespace oslab::theory
