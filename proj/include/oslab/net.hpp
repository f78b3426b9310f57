#pragma once

// Minimal dense feed-forward network engine with exact per-sample losses
// and gradients. Everything is double precision and evaluated in a fixed
// sequential order so runs are reproducible bit-for-bit on one platform.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "oslab/common.hpp"

namespace oslab::nn {

enum class Activation { relu, tanh, identity };

Activation activation_from_string(const std::string& s);
std::string to_string(Activation a);

struct NetworkSpec {
    std::vector<int> layer_widths;  // input dim first, output dim last
    Activation activation = Activation::tanh;
    std::vector<bool> use_bias;  // one per weight layer; empty means all true

    int num_weight_layers() const { return static_cast<int>(layer_widths.size()) - 1; }
    bool bias(int layer) const { return use_bias.empty() ? true : use_bias.at(layer); }
    int input_dim() const { return layer_widths.front(); }
    int output_dim() const { return layer_widths.back(); }
    std::size_t param_count() const;
    void validate() const;  // throws config_error
};

struct LayerSegment {
    std::string name;
    std::size_t offset = 0;
    std::size_t length = 0;
};

// Flat parameter vector with a named layer partition. Layout per layer:
// weight matrix (out x in, row-major), then bias (out) when present.
struct ParameterVector {
    std::vector<double> values;
    std::vector<LayerSegment> partition;

    std::size_t size() const { return values.size(); }
};

std::vector<LayerSegment> make_partition(const NetworkSpec& spec);

// Weights i.i.d. N(0, 1/fan_in), biases zero. Deterministic in seed.
ParameterVector init_network(const NetworkSpec& spec, std::uint64_t seed);

struct Dataset {
    std::vector<double> inputs;   // row-major n x d
    std::vector<double> targets;  // n entries; real for regression, class index for classification
    std::vector<int> group_tags;  // optional, n entries

    std::size_t n = 0;
    std::size_t d = 0;

    std::span<const double> input_row(std::size_t i) const {
        return {inputs.data() + i * d, d};
    }
};

struct LossKind {
    enum Kind { square, logistic, cross_entropy };
    Kind kind = square;
    double label_smoothing = 0.0;  // cross_entropy only, in [0, 0.5)

    void validate() const;
};

LossKind::Kind loss_kind_from_string(const std::string& s);
std::string to_string(LossKind::Kind k);

// Batch outputs, row-major n x output_dim. Row i depends only on input row i.
std::vector<double> forward(const ParameterVector& params, const NetworkSpec& spec,
                            std::span<const double> inputs, std::size_t n);

std::vector<double> per_sample_loss(const ParameterVector& params, const NetworkSpec& spec,
                                    const Dataset& data, const LossKind& loss);

// Mean of per-sample losses in fixed index order.
double batch_loss(const ParameterVector& params, const NetworkSpec& spec, const Dataset& data,
                  const LossKind& loss);

// Gradient of the mean loss over `subset` (all samples when absent).
ParameterVector gradient(const ParameterVector& params, const NetworkSpec& spec,
                         const Dataset& data, const LossKind& loss,
                         const std::vector<int>* subset = nullptr);

// Penultimate-layer activations for a single input; the Euclidean norm of
// this vector is the probe's feature norm.
std::vector<double> feature_embedding(const ParameterVector& params, const NetworkSpec& spec,
                                      std::span<const double> input);

}  // namespace oslab::nn
