#include "oslab/net.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace oslab::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;

Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    if (s == "identity") return Activation::identity;
    throw config_error("unknown activation '" + s + "'");
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::identity: return "identity";
    }
    return "?";
}

LossKind::Kind loss_kind_from_string(const std::string& s) {
    if (s == "square") return LossKind::square;
    if (s == "logistic") return LossKind::logistic;
    if (s == "cross_entropy") return LossKind::cross_entropy;
    throw config_error("unknown loss '" + s + "'");
}

std::string to_string(LossKind::Kind k) {
    switch (k) {
        case LossKind::square: return "square";
        case LossKind::logistic: return "logistic";
        case LossKind::cross_entropy: return "cross_entropy";
    }
    return "?";
}

void NetworkSpec::validate() const {
    if (layer_widths.size() < 2) throw config_error("network needs at least input and output widths");
    for (int w : layer_widths)
        if (w < 1) throw config_error("layer widths must be >= 1");
    if (!use_bias.empty() && use_bias.size() != static_cast<std::size_t>(num_weight_layers()))
        throw config_error("use_bias must have one entry per weight layer");
}

std::size_t NetworkSpec::param_count() const {
    std::size_t total = 0;
    for (int l = 0; l < num_weight_layers(); ++l) {
        total += static_cast<std::size_t>(layer_widths[l + 1]) * layer_widths[l];
        if (bias(l)) total += layer_widths[l + 1];
    }
    return total;
}

void LossKind::validate() const {
    if (label_smoothing < 0.0 || label_smoothing >= 0.5)
        throw config_error("label_smoothing must lie in [0, 0.5)");
    if (label_smoothing > 0.0 && kind != cross_entropy)
        throw config_error("label_smoothing is only valid for cross_entropy");
}

std::vector<LayerSegment> make_partition(const NetworkSpec& spec) {
    std::vector<LayerSegment> part;
    std::size_t off = 0;
    for (int l = 0; l < spec.num_weight_layers(); ++l) {
        std::size_t len = static_cast<std::size_t>(spec.layer_widths[l + 1]) * spec.layer_widths[l];
        if (spec.bias(l)) len += spec.layer_widths[l + 1];
        part.push_back({"layer" + std::to_string(l), off, len});
        off += len;
    }
    return part;
}

ParameterVector init_network(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    ParameterVector p;
    p.partition = make_partition(spec);
    p.values.assign(spec.param_count(), 0.0);
    Rng rng(seed);
    std::size_t k = 0;
    for (int l = 0; l < spec.num_weight_layers(); ++l) {
        const int fan_in = spec.layer_widths[l];
        const int fan_out = spec.layer_widths[l + 1];
        const double sd = std::sqrt(1.0 / fan_in);
        for (int i = 0; i < fan_out * fan_in; ++i) p.values[k++] = sd * rng.gaussian();
        if (spec.bias(l)) k += fan_out;  // biases stay zero
    }
    return p;
}

namespace {

struct LayerView {
    CMapMat W;
    const double* b;  // nullptr when absent
};

std::vector<LayerView> view_layers(const ParameterVector& params, const NetworkSpec& spec) {
    if (params.size() != spec.param_count())
        throw config_error("parameter count does not match network spec");
    std::vector<LayerView> views;
    const double* ptr = params.values.data();
    for (int l = 0; l < spec.num_weight_layers(); ++l) {
        const int in = spec.layer_widths[l], out = spec.layer_widths[l + 1];
        CMapMat W(ptr, out, in);
        ptr += static_cast<std::size_t>(out) * in;
        const double* b = nullptr;
        if (spec.bias(l)) {
            b = ptr;
            ptr += out;
        }
        views.push_back({W, b});
    }
    return views;
}

void apply_activation(Activation a, RowMat& Z) {
    switch (a) {
        case Activation::relu: Z = Z.cwiseMax(0.0); break;
        case Activation::tanh: Z = Z.array().tanh().matrix(); break;
        case Activation::identity: break;
    }
}

// Forward pass keeping post-activation values of every layer.
std::vector<RowMat> forward_cached(const std::vector<LayerView>& layers, const NetworkSpec& spec,
                                   CMapMat X) {
    std::vector<RowMat> acts;
    acts.reserve(layers.size() + 1);
    acts.emplace_back(X);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        RowMat Z = acts.back() * layers[l].W.transpose();
        if (layers[l].b) {
            CMapVec b(layers[l].b, Z.cols());
            Z.rowwise() += b.transpose();
        }
        if (l + 1 < layers.size()) apply_activation(spec.activation, Z);
        acts.push_back(std::move(Z));
    }
    return acts;
}

double stable_softplus(double x) {  // log(1 + e^x)
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

void check_targets(const NetworkSpec& spec, const Dataset& data, const LossKind& loss) {
    loss.validate();
    if (data.n == 0) throw config_error("dataset is empty");
    if (data.d != static_cast<std::size_t>(spec.input_dim()))
        throw config_error("dataset dimension does not match network input width");
    if (data.targets.size() != data.n) throw config_error("targets size mismatch");
    const int out = spec.output_dim();
    switch (loss.kind) {
        case LossKind::square:
            if (out != 1) throw config_error("square loss requires output width 1");
            break;
        case LossKind::logistic:
            if (out != 1) throw config_error("logistic loss requires output width 1");
            for (double y : data.targets)
                if (y != 1.0 && y != -1.0)
                    throw config_error("logistic targets must be -1 or +1");
            break;
        case LossKind::cross_entropy:
            if (out < 2) throw config_error("cross_entropy requires output width >= 2");
            for (double y : data.targets) {
                const int c = static_cast<int>(y);
                if (c < 0 || c >= out || static_cast<double>(c) != y)
                    throw config_error("class index out of range");
            }
            break;
    }
}

// Per-sample losses for given outputs; also fills dOut (n x out) with
// dloss_i/doutput when requested.
std::vector<double> losses_and_table(const NetworkSpec& spec, const Dataset& data,
                                     const LossKind& loss, const RowMat& out,
                                     const std::vector<int>& idx, RowMat* dOut) {
    const std::size_t n = idx.size();
    const int C = spec.output_dim();
    std::vector<double> li(n, 0.0);
    if (dOut) dOut->setZero(n, C);
    for (std::size_t r = 0; r < n; ++r) {
        const double y = data.targets[idx[r]];
        switch (loss.kind) {
            case LossKind::square: {
                const double e = out(r, 0) - y;
                li[r] = e * e;
                if (dOut) (*dOut)(r, 0) = 2.0 * e;
                break;
            }
            case LossKind::logistic: {
                const double margin = y * out(r, 0);
                li[r] = stable_softplus(-margin);
                if (dOut) (*dOut)(r, 0) = -y / (1.0 + std::exp(margin));
                break;
            }
            case LossKind::cross_entropy: {
                const int cls = static_cast<int>(y);
                const double s = loss.label_smoothing;
                double mx = out(r, 0);
                for (int c = 1; c < C; ++c) mx = std::max(mx, out(r, c));
                double sum = 0.0;
                for (int c = 0; c < C; ++c) sum += std::exp(out(r, c) - mx);
                const double lse = mx + std::log(sum);
                double l = 0.0;
                for (int c = 0; c < C; ++c) {
                    const double q = (c == cls ? 1.0 - s : 0.0) + s / C;
                    l += q * (lse - out(r, c));
                    if (dOut) (*dOut)(r, c) = std::exp(out(r, c) - lse) - q;
                }
                li[r] = l;
                break;
            }
        }
    }
    return li;
}

std::vector<int> all_indices(std::size_t n) {
    std::vector<int> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<int>(i);
    return idx;
}

RowMat gather_rows(const Dataset& data, const std::vector<int>& idx) {
    RowMat X(idx.size(), data.d);
    for (std::size_t r = 0; r < idx.size(); ++r)
        X.row(r) = CMapVec(data.inputs.data() + static_cast<std::size_t>(idx[r]) * data.d, data.d);
    return X;
}

}  // namespace

std::vector<double> forward(const ParameterVector& params, const NetworkSpec& spec,
                            std::span<const double> inputs, std::size_t n) {
    spec.validate();
    if (inputs.size() != n * static_cast<std::size_t>(spec.input_dim()))
        throw config_error("input size does not match n x input_dim");
    auto layers = view_layers(params, spec);
    CMapMat X(inputs.data(), n, spec.input_dim());
    auto acts = forward_cached(layers, spec, X);
    const RowMat& out = acts.back();
    return {out.data(), out.data() + out.size()};
}

std::vector<double> per_sample_loss(const ParameterVector& params, const NetworkSpec& spec,
                                    const Dataset& data, const LossKind& loss) {
    spec.validate();
    check_targets(spec, data, loss);
    auto layers = view_layers(params, spec);
    CMapMat X(data.inputs.data(), data.n, data.d);
    auto acts = forward_cached(layers, spec, X);
    return losses_and_table(spec, data, loss, acts.back(), all_indices(data.n), nullptr);
}

double batch_loss(const ParameterVector& params, const NetworkSpec& spec, const Dataset& data,
                  const LossKind& loss) {
    const auto li = per_sample_loss(params, spec, data, loss);
    double s = 0.0;
    for (double v : li) s += v;
    return s / static_cast<double>(li.size());
}

ParameterVector gradient(const ParameterVector& params, const NetworkSpec& spec,
                         const Dataset& data, const LossKind& loss,
                         const std::vector<int>* subset) {
    spec.validate();
    check_targets(spec, data, loss);
    std::vector<int> idx = subset ? *subset : all_indices(data.n);
    if (idx.empty()) throw config_error("gradient over empty subset");
    for (int i : idx)
        if (i < 0 || static_cast<std::size_t>(i) >= data.n)
            throw config_error("subset index out of range");

    auto layers = view_layers(params, spec);
    RowMat X = gather_rows(data, idx);
    auto acts = forward_cached(layers, spec, CMapMat(X.data(), X.rows(), X.cols()));

    RowMat delta;
    losses_and_table(spec, data, loss, acts.back(), idx, &delta);
    delta /= static_cast<double>(idx.size());

    ParameterVector g;
    g.partition = params.partition;
    g.values.assign(params.size(), 0.0);

    double* gptr = g.values.data() + g.values.size();
    for (int l = spec.num_weight_layers() - 1; l >= 0; --l) {
        const int in = spec.layer_widths[l], out = spec.layer_widths[l + 1];
        if (spec.bias(l)) {
            gptr -= out;
            MapVec gb(gptr, out);
            gb = delta.colwise().sum().transpose();
        }
        gptr -= static_cast<std::size_t>(out) * in;
        MapMat gW(gptr, out, in);
        gW = delta.transpose() * acts[l];
        if (l > 0) {
            RowMat next = delta * layers[l].W;
            switch (spec.activation) {
                case Activation::relu:
                    next = next.cwiseProduct((acts[l].array() > 0.0).cast<double>().matrix());
                    break;
                case Activation::tanh:
                    next = next.cwiseProduct((1.0 - acts[l].array().square()).matrix());
                    break;
                case Activation::identity: break;
            }
            delta = std::move(next);
        }
    }
    return g;
}

std::vector<double> feature_embedding(const ParameterVector& params, const NetworkSpec& spec,
                                      std::span<const double> input) {
    spec.validate();
    if (input.size() != static_cast<std::size_t>(spec.input_dim()))
        throw config_error("probe dimension does not match network input width");
    auto layers = view_layers(params, spec);
    CMapMat X(input.data(), 1, spec.input_dim());
    auto acts = forward_cached(layers, spec, X);
    const RowMat& pen = acts[acts.size() - 2];
    return {pen.data(), pen.data() + pen.size()};
}

}  // namespace oslab::nn
