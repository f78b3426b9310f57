#pragma once

// Optimizers: full-batch GD, SGD with momentum and dampening, Adam, and a
// split update that takes fixed-size signed steps for parameters whose
// debiased momentum magnitude exceeds a threshold.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "oslab/common.hpp"

namespace oslab::optim {

struct GdConfig {
    double eta = 0.01;
};

struct SgdConfig {
    double eta = 0.01;
    double beta = 0.9;  // momentum
    double tau = 0.0;   // dampening: gradient enters the buffer scaled by (1 - tau)
};

struct AdamConfig {
    double eta = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct SplitSgdConfig {
    double eta1 = 0.1;    // step size for parameters under the threshold
    double eta2 = 1e-3;   // fixed signed step size above it
    double beta = 0.9;
    double tau = 0.9;
    double threshold_r = 0.0;
};

using OptimizerConfig = std::variant<GdConfig, SgdConfig, AdamConfig, SplitSgdConfig>;

void validate(const OptimizerConfig& config);
std::string variant_name(const OptimizerConfig& config);
bool is_split(const OptimizerConfig& config);
double base_eta(const OptimizerConfig& config);

struct OptimizerState {
    std::vector<double> m;  // momentum buffer
    std::vector<double> v;  // second-moment buffer (Adam only)
    std::int64_t t = 0;
    double last_mask_fraction = 0.0;  // SplitSGD only
    bool split = false;
};

OptimizerState make_state(const OptimizerConfig& config, std::size_t dim);

// One update in place. Throws numeric_error on a non-finite gradient.
// A single state must not be stepped concurrently.
void step(const OptimizerConfig& config, OptimizerState& state, std::span<double> params,
          std::span<const double> grad);

// q-quantile of |grad| entries, lower interpolation on the sorted values.
double threshold_from_first_gradient(std::span<const double> grad, double q);

// Fraction of parameters that took the fixed signed step on the last update.
double masked_fraction(const OptimizerState& state);

// Adam's debiased first moment next to the dampened-SGD buffer divided by
// (1 - beta1^t), for a scalar gradient sequence. The two series are equal.
std::pair<std::vector<double>, std::vector<double>> adam_first_moment_equivalence(
    double beta1, std::span<const double> grads);

}  // namespace oslab::optim
