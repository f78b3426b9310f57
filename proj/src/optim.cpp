#include "oslab/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace oslab::optim {

namespace {

void check_rate(double eta, const char* name) {
    if (!(eta > 0.0)) throw config_error(std::string(name) + " must be positive");
}

void check_unit(double x, const char* name) {
    if (!(x >= 0.0 && x < 1.0)) throw config_error(std::string(name) + " must lie in [0, 1)");
}

void check_grad(std::span<const double> grad) {
    for (std::size_t i = 0; i < grad.size(); ++i)
        if (!std::isfinite(grad[i]))
            throw numeric_error("non-finite gradient at index " + std::to_string(i));
}

double sgn(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace

void validate(const OptimizerConfig& config) {
    std::visit(
        [](const auto& c) {
            using T = std::decay_t<decltype(c)>;
            if constexpr (std::is_same_v<T, GdConfig>) {
                check_rate(c.eta, "eta");
            } else if constexpr (std::is_same_v<T, SgdConfig>) {
                check_rate(c.eta, "eta");
                check_unit(c.beta, "beta");
                check_unit(c.tau, "tau");
            } else if constexpr (std::is_same_v<T, AdamConfig>) {
                check_rate(c.eta, "eta");
                check_unit(c.beta1, "beta1");
                check_unit(c.beta2, "beta2");
                if (!(c.eps > 0.0)) throw config_error("eps must be positive");
            } else {
                check_rate(c.eta1, "eta1");
                check_rate(c.eta2, "eta2");
                check_unit(c.beta, "beta");
                check_unit(c.tau, "tau");
                if (!(c.threshold_r >= 0.0)) throw config_error("threshold_r must be >= 0");
            }
        },
        config);
}

std::string variant_name(const OptimizerConfig& config) {
    switch (config.index()) {
        case 0: return "gd";
        case 1: return "sgd";
        case 2: return "adam";
        default: return "splitsgd";
    }
}

bool is_split(const OptimizerConfig& config) {
    return std::holds_alternative<SplitSgdConfig>(config);
}

double base_eta(const OptimizerConfig& config) {
    return std::visit(
        [](const auto& c) {
            using T = std::decay_t<decltype(c)>;
            if constexpr (std::is_same_v<T, SplitSgdConfig>)
                return c.eta1;
            else
                return c.eta;
        },
        config);
}

OptimizerState make_state(const OptimizerConfig& config, std::size_t dim) {
    validate(config);
    OptimizerState s;
    if (!std::holds_alternative<GdConfig>(config)) s.m.assign(dim, 0.0);
    if (std::holds_alternative<AdamConfig>(config)) s.v.assign(dim, 0.0);
    s.split = is_split(config);
    return s;
}

void step(const OptimizerConfig& config, OptimizerState& state, std::span<double> params,
          std::span<const double> grad) {
    if (params.size() != grad.size()) throw config_error("params/grad shape mismatch");
    if (!state.m.empty() && state.m.size() != params.size())
        throw config_error("optimizer state shape mismatch");
    check_grad(grad);
    if (state.t == std::numeric_limits<std::int64_t>::max())
        throw numeric_error("step counter overflow");
    state.t += 1;
    const std::int64_t t = state.t;

    std::visit(
        [&](const auto& c) {
            using T = std::decay_t<decltype(c)>;
            if constexpr (std::is_same_v<T, GdConfig>) {
                for (std::size_t i = 0; i < params.size(); ++i) params[i] -= c.eta * grad[i];
            } else if constexpr (std::is_same_v<T, SgdConfig>) {
                for (std::size_t i = 0; i < params.size(); ++i) {
                    state.m[i] = c.beta * state.m[i] + (1.0 - c.tau) * grad[i];
                    params[i] -= c.eta * state.m[i];
                }
            } else if constexpr (std::is_same_v<T, AdamConfig>) {
                const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
                const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
                for (std::size_t i = 0; i < params.size(); ++i) {
                    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * grad[i];
                    state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
                    const double mh = state.m[i] / bc1;
                    const double vh = state.v[i] / bc2;
                    params[i] -= c.eta * mh / (std::sqrt(vh) + c.eps);
                }
            } else {
                // Debias uses the dampening constant, matching the update rule
                // m_t = beta m_{t-1} + (1 - tau) g_t, m_hat = m_t / (1 - tau^t).
                const double bc = 1.0 - std::pow(c.tau, static_cast<double>(t));
                std::size_t signed_steps = 0;
                for (std::size_t i = 0; i < params.size(); ++i) {
                    state.m[i] = c.beta * state.m[i] + (1.0 - c.tau) * grad[i];
                    const double mh = state.m[i] / bc;
                    if (std::abs(mh) <= c.threshold_r) {
                        params[i] -= c.eta1 * mh;
                    } else {
                        params[i] -= c.eta2 * sgn(mh);
                        ++signed_steps;
                    }
                }
                state.last_mask_fraction =
                    static_cast<double>(signed_steps) / static_cast<double>(params.size());
            }
        },
        config);
}

double threshold_from_first_gradient(std::span<const double> grad, double q) {
    if (grad.empty()) throw config_error("threshold from empty gradient");
    if (!(q > 0.0 && q < 1.0)) throw config_error("quantile q must lie in (0, 1)");
    std::vector<double> a(grad.size());
    for (std::size_t i = 0; i < grad.size(); ++i) a[i] = std::abs(grad[i]);
    std::sort(a.begin(), a.end());
    // Smallest value with at least a q-fraction of entries at or below it.
    const auto n = static_cast<double>(a.size());
    auto idx = static_cast<std::ptrdiff_t>(std::ceil(q * n)) - 1;
    idx = std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(a.size()) - 1);
    return a[idx];
}

double masked_fraction(const OptimizerState& state) {
    if (!state.split) throw config_error("masked_fraction requires SplitSGD state");
    if (state.t < 1) throw config_error("masked_fraction requires at least one step");
    return state.last_mask_fraction;
}

std::pair<std::vector<double>, std::vector<double>> adam_first_moment_equivalence(
    double beta1, std::span<const double> grads) {
    // Drive both optimizers on a scalar parameter and read their buffers, so
    // the comparison exercises the real update paths rather than one formula.
    const OptimizerConfig adam_cfg = AdamConfig{1e-3, beta1, 0.999, 1e-8};
    const OptimizerConfig sgd_cfg = SgdConfig{1e-3, beta1, beta1};
    OptimizerState adam_state = make_state(adam_cfg, 1);
    OptimizerState sgd_state = make_state(sgd_cfg, 1);
    std::vector<double> adam(grads.size()), sgd(grads.size());
    double pa = 0.0, ps = 0.0;
    for (std::size_t t = 0; t < grads.size(); ++t) {
        const double g = grads[t];
        step(adam_cfg, adam_state, std::span<double>(&pa, 1), std::span<const double>(&g, 1));
        step(sgd_cfg, sgd_state, std::span<double>(&ps, 1), std::span<const double>(&g, 1));
        const double bc = 1.0 - std::pow(beta1, static_cast<double>(t + 1));
        adam[t] = adam_state.m[0] / bc;
        sgd[t] = sgd_state.m[0] / bc;
    }
    return {adam, sgd};
}

}  // namespace oslab::optim
