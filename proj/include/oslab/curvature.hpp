#pragma once

// Matrix-free curvature instrumentation: Hessian-vector products via central
// differences of exact gradients, power iteration for the top eigenpair,
// per-layer curvature fractions and the per-sample metrics used to
// characterize outlier groups.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "oslab/net.hpp"

namespace oslab::curv {

using LinearOp = std::function<std::vector<double>(std::span<const double>)>;

struct EigenResult {
    double lambda = 0.0;
    std::vector<double> v;  // unit vector, first nonzero component positive
    int iterations = 0;
    double residual = 0.0;  // ||Hv - lambda v||
    bool converged = false;
};

// H v for the mean-loss Hessian, by central difference of gradients with
// h = 1e-4 (1 + ||theta||) / ||v||.
std::vector<double> hvp(const nn::ParameterVector& params, const nn::NetworkSpec& spec,
                        const nn::Dataset& data, const nn::LossKind& loss,
                        std::span<const double> v);

// Same, restricted to the loss of a single sample.
std::vector<double> hvp_sample(const nn::ParameterVector& params, const nn::NetworkSpec& spec,
                               const nn::Dataset& data, const nn::LossKind& loss, int sample,
                               std::span<const double> v);

LinearOp hvp_operator(const nn::ParameterVector& params, const nn::NetworkSpec& spec,
                      const nn::Dataset& data, const nn::LossKind& loss);

// Plain power iteration with Rayleigh-quotient estimate; converged when
// ||Hv - lambda v|| <= tol. Reports the signed Rayleigh quotient, so a
// negative-dominant operator yields a negative lambda.
EigenResult top_eigenpair(const LinearOp& op, std::size_t dim, double tol = 1e-6,
                          int max_iter = 10000, std::uint64_t seed = 0,
                          const std::vector<double>* warm_start = nullptr);

double sharpness(const nn::ParameterVector& params, const nn::NetworkSpec& spec,
                 const nn::Dataset& data, const nn::LossKind& loss, double tol = 1e-6,
                 int max_iter = 10000, std::uint64_t seed = 0);

// Squared norm of each layer's sub-vector of a unit vector; sums to 1.
std::map<std::string, double> layer_curvature_fractions(
    std::span<const double> v, const std::vector<nn::LayerSegment>& partition);

std::vector<double> per_sample_grad_norms(const nn::ParameterVector& params,
                                          const nn::NetworkSpec& spec, const nn::Dataset& data,
                                          const nn::LossKind& loss);

// Entry i = v^T H(x_i) v where H(x_i) is the Hessian of sample i's loss.
std::vector<double> per_sample_curvature_along(const nn::ParameterVector& params,
                                               const nn::NetworkSpec& spec,
                                               const nn::Dataset& data, const nn::LossKind& loss,
                                               std::span<const double> v);

double per_sample_top_eig(const nn::ParameterVector& params, const nn::NetworkSpec& spec,
                          const nn::Dataset& data, const nn::LossKind& loss, int sample,
                          double tol = 1e-6, int max_iter = 10000, std::uint64_t seed = 0);

// Entry t = <theta_t - reference, v>.
std::vector<double> project_trajectory(const std::vector<std::vector<double>>& params_series,
                                       std::span<const double> v,
                                       std::span<const double> reference);

// |<step, v>|, the effective step size along a unit direction.
double effective_step_along(std::span<const double> step, std::span<const double> v);

struct EosReport {
    bool crossed = false;
    long crossing_step = -1;
    double threshold = 0.0;   // 2 / eta
    double post_mean = 0.0;   // over the window after the crossing
    double post_max = 0.0;
    std::size_t post_count = 0;
};

// sharpness_series holds (step, sharpness) pairs in increasing step order.
EosReport edge_of_stability_indicator(const std::vector<std::pair<long, double>>& sharpness_series,
                                      double eta, long window_steps = 2000);

struct CurvatureReport {
    double sharpness = 0.0;
    std::map<std::string, double> layer_fractions;
    std::vector<double> per_sample_grad_norm;
    std::vector<double> per_sample_curvature;
};

CurvatureReport curvature_report(const nn::ParameterVector& params, const nn::NetworkSpec& spec,
                                 const nn::Dataset& data, const nn::LossKind& loss,
                                 double tol = 1e-6, int max_iter = 10000, std::uint64_t seed = 0);

}  // namespace oslab::curv
