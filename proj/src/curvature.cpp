#include "oslab/curvature.hpp"

#include <algorithm>
#include <cmath>

namespace oslab::curv {

namespace {

std::vector<double> hvp_impl(const nn::ParameterVector& params, const nn::NetworkSpec& spec,
                             const nn::Dataset& data, const nn::LossKind& loss,
                             std::span<const double> v, const std::vector<int>* subset) {
    if (v.size() != params.size()) throw config_error("hvp direction shape mismatch");
    const double vnorm = nrm2(v);
    if (!(vnorm > 0.0)) throw config_error("hvp direction must be nonzero");
    const double h = 1e-4 * (1.0 + nrm2(params.values)) / vnorm;

    nn::ParameterVector shifted = params;
    axpy(h, v, shifted.values);
    auto gp = nn::gradient(shifted, spec, data, loss, subset);
    shifted.values = params.values;
    axpy(-h, v, shifted.values);
    auto gm = nn::gradient(shifted, spec, data, loss, subset);

    std::vector<double> out(params.size());
    const double inv = 1.0 / (2.0 * h);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (gp.values[i] - gm.values[i]) * inv;
    return out;
}

// Sign convention: first component with magnitude above 1e-12 is positive.
void fix_sign(std::vector<double>& v) {
    for (double x : v) {
        if (std::abs(x) > 1e-12) {
            if (x < 0.0)
                for (double& y : v) y = -y;
            return;
        }
    }
}

}  // namespace

std::vector<double> hvp(const nn::ParameterVector& params, const nn::NetworkSpec& spec,
                        const nn::Dataset& data, const nn::LossKind& loss,
                        std::span<const double> v) {
    return hvp_impl(params, spec, data, loss, v, nullptr);
}

std::vector<double> hvp_sample(const nn::ParameterVector& params, const nn::NetworkSpec& spec,
                               const nn::Dataset& data, const nn::LossKind& loss, int sample,
                               std::span<const double> v) {
    std::vector<int> subset{sample};
    return hvp_impl(params, spec, data, loss, v, &subset);
}

LinearOp hvp_operator(const nn::ParameterVector& params, const nn::NetworkSpec& spec,
                      const nn::Dataset& data, const nn::LossKind& loss) {
    return [params, spec, data, loss](std::span<const double> v) {
        return hvp(params, spec, data, loss, v);
    };
}

EigenResult top_eigenpair(const LinearOp& op, std::size_t dim, double tol, int max_iter,
                          std::uint64_t seed, const std::vector<double>* warm_start) {
    if (dim < 1) throw config_error("top_eigenpair needs dim >= 1");
    EigenResult res;
    std::vector<double>& v = res.v;
    if (warm_start && warm_start->size() == dim && nrm2(*warm_start) > 0.0) {
        v = *warm_start;
    } else {
        Rng rng(seed);
        v.resize(dim);
        for (double& x : v) x = rng.gaussian();
    }
    scale(1.0 / nrm2(v), v);

    std::vector<double> w;
    for (int it = 1; it <= max_iter; ++it) {
        w = op(v);
        if (w.size() != dim) throw numeric_error("operator returned wrong dimension");
        res.lambda = dot(v, w);
        double r2 = 0.0;
        for (std::size_t i = 0; i < dim; ++i) {
            const double d = w[i] - res.lambda * v[i];
            r2 += d * d;
        }
        res.residual = std::sqrt(r2);
        res.iterations = it;
        if (res.residual <= tol) {
            res.converged = true;
            break;
        }
        const double wn = nrm2(w);
        if (wn == 0.0) {  // operator annihilated v: zero eigenvalue, exact
            res.lambda = 0.0;
            res.residual = 0.0;
            res.converged = true;
            break;
        }
        for (std::size_t i = 0; i < dim; ++i) v[i] = w[i] / wn;
    }
    fix_sign(res.v);
    return res;
}

double sharpness(const nn::ParameterVector& params, const nn::NetworkSpec& spec,
                 const nn::Dataset& data, const nn::LossKind& loss, double tol, int max_iter,
                 std::uint64_t seed) {
    auto res = top_eigenpair(hvp_operator(params, spec, data, loss), params.size(), tol, max_iter,
                             seed);
    return res.lambda;
}

std::map<std::string, double> layer_curvature_fractions(
    std::span<const double> v, const std::vector<nn::LayerSegment>& partition) {
    std::size_t total = 0;
    for (const auto& seg : partition) total += seg.length;
    if (total != v.size()) throw config_error("partition does not cover vector");
    std::map<std::string, double> out;
    for (const auto& seg : partition) {
        double s = 0.0;
        for (std::size_t i = seg.offset; i < seg.offset + seg.length; ++i) s += v[i] * v[i];
        out[seg.name] = s;
    }
    return out;
}

std::vector<double> per_sample_grad_norms(const nn::ParameterVector& params,
                                          const nn::NetworkSpec& spec, const nn::Dataset& data,
                                          const nn::LossKind& loss) {
    std::vector<double> out(data.n);
    std::vector<int> subset(1);
    for (std::size_t i = 0; i < data.n; ++i) {
        subset[0] = static_cast<int>(i);
        auto g = nn::gradient(params, spec, data, loss, &subset);
        out[i] = nrm2(g.values);
    }
    return out;
}

std::vector<double> per_sample_curvature_along(const nn::ParameterVector& params,
                                               const nn::NetworkSpec& spec,
                                               const nn::Dataset& data, const nn::LossKind& loss,
                                               std::span<const double> v) {
    std::vector<double> out(data.n);
    for (std::size_t i = 0; i < data.n; ++i) {
        auto Hv = hvp_sample(params, spec, data, loss, static_cast<int>(i), v);
        out[i] = dot(v, Hv);
    }
    return out;
}

double per_sample_top_eig(const nn::ParameterVector& params, const nn::NetworkSpec& spec,
                          const nn::Dataset& data, const nn::LossKind& loss, int sample,
                          double tol, int max_iter, std::uint64_t seed) {
    auto op = [&params, &spec, &data, &loss, sample](std::span<const double> v) {
        return hvp_sample(params, spec, data, loss, sample, v);
    };
    return top_eigenpair(op, params.size(), tol, max_iter, seed).lambda;
}

std::vector<double> project_trajectory(const std::vector<std::vector<double>>& params_series,
                                       std::span<const double> v,
                                       std::span<const double> reference) {
    std::vector<double> out(params_series.size());
    for (std::size_t t = 0; t < params_series.size(); ++t) {
        const auto& p = params_series[t];
        if (p.size() != v.size() || p.size() != reference.size())
            throw config_error("trajectory projection shape mismatch");
        double s = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - reference[i]) * v[i];
        out[t] = s;
    }
    return out;
}

double effective_step_along(std::span<const double> step, std::span<const double> v) {
    if (step.size() != v.size()) throw config_error("effective step shape mismatch");
    return std::abs(dot(step, v));
}

EosReport edge_of_stability_indicator(const std::vector<std::pair<long, double>>& sharpness_series,
                                      double eta, long window_steps) {
    if (sharpness_series.empty()) throw config_error("empty sharpness series");
    EosReport rep;
    rep.threshold = 2.0 / eta;
    for (const auto& [step, lam] : sharpness_series) {
        if (!rep.crossed && lam >= rep.threshold) {
            rep.crossed = true;
            rep.crossing_step = step;
        } else if (rep.crossed && step > rep.crossing_step &&
                   step <= rep.crossing_step + window_steps) {
            rep.post_mean += lam;
            rep.post_max = std::max(rep.post_max, lam);
            ++rep.post_count;
        }
    }
    if (rep.post_count > 0) rep.post_mean /= static_cast<double>(rep.post_count);
    return rep;
}

CurvatureReport curvature_report(const nn::ParameterVector& params, const nn::NetworkSpec& spec,
                                 const nn::Dataset& data, const nn::LossKind& loss, double tol,
                                 int max_iter, std::uint64_t seed) {
    CurvatureReport rep;
    auto eig = top_eigenpair(hvp_operator(params, spec, data, loss), params.size(), tol, max_iter,
                             seed);
    rep.sharpness = eig.lambda;
    rep.layer_fractions = layer_curvature_fractions(eig.v, params.partition);
    rep.per_sample_grad_norm = per_sample_grad_norms(params, spec, data, loss);
    rep.per_sample_curvature = per_sample_curvature_along(params, spec, data, loss, eig.v);
    return rep;
}

}  // namespace oslab::curv
