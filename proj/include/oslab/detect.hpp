#pragma once

// Identification of paired loss-oscillating outlier groups from per-sample
// loss time series: top-k loss-change selection, correlation clustering of
// candidates, anti-correlated group pairing, and oscillation statistics.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "oslab/common.hpp"

namespace oslab::detect {

// Append-only step x sample matrix of per-sample losses.
class LossHistory {
  public:
    LossHistory() = default;

    void record(long step, std::span<const double> losses);

    std::size_t rows() const { return steps_.size(); }
    std::size_t samples() const { return n_; }
    const std::vector<long>& steps() const { return steps_; }

    std::span<const double> row(std::size_t r) const { return {data_.data() + r * n_, n_}; }
    long step_at(std::size_t r) const { return steps_.at(r); }

    // Row index of a recorded step, if present.
    std::optional<std::size_t> row_of(long step) const;

  private:
    std::vector<long> steps_;
    std::vector<double> data_;  // rows x n, row-major
    std::size_t n_ = 0;
};

// losses[step] - losses[previous recorded step].
std::vector<double> loss_delta(const LossHistory& history, long step);

struct OutlierSelection {
    long step = 0;
    std::vector<int> up;    // k most positive loss changes
    std::vector<int> down;  // k most negative, disjoint from up
};

// Ties broken by ascending sample index; down is selected among the
// remaining samples so up and down never overlap when 2k <= n.
OutlierSelection select_outliers(const LossHistory& history, long step, int k);

// Jaccard index of the combined (up u down) sets.
double successive_overlap(const OutlierSelection& a, const OutlierSelection& b);

struct GroupPair {
    std::vector<int> group_a;
    std::vector<int> group_b;
    double anti_correlation = 0.0;
    long window_start = 0;
    long window_end = 0;
};

enum class PairMethod { delta_correlation, gradient_alignment };

PairMethod pair_method_from_string(const std::string& s);
std::string to_string(PairMethod m);

struct PairingResult {
    std::vector<GroupPair> pairs;
    std::vector<int> excluded;  // zero-variance candidates dropped with notice
};

// Candidates are samples appearing in any per-step outlier selection inside
// the window. delta_correlation clusters candidates whose loss-change series
// correlate >= +rho and pairs clusters whose mean series correlate <= -rho.
// gradient_alignment applies the same thresholds to cosine similarities of
// per-sample gradients at the window midpoint, which the caller supplies as
// one row per sample (indexed like the loss matrix).
PairingResult pair_groups(const LossHistory& history, long window_start, long window_end, int k,
                          double rho, PairMethod method,
                          const std::vector<std::vector<double>>* midpoint_gradients = nullptr);

// Fraction of samples with strictly positive loss change at `step`.
double fraction_increasing(const LossHistory& history, long step);

struct OscillationStats {
    double sign_flip_rate = 0.0;   // fraction of consecutive deltas changing sign
    double amplitude_trend = 0.0;  // least-squares slope of |group-mean delta|
};

OscillationStats oscillation_stats(const LossHistory& history, std::span<const int> group,
                                   long window_start, long window_end);

// Persistence: CSV with a sample-id header row, and a raw float64 row-major
// dump with a JSON sidecar describing shape and dtype.
void write_losses_csv(const LossHistory& history, const std::string& path);
LossHistory read_losses_csv(const std::string& path);
void write_losses_binary(const LossHistory& history, const std::string& bin_path,
                         const std::string& sidecar_path);
LossHistory read_losses_binary(const std::string& bin_path, const std::string& sidecar_path);

}  // namespace oslab::detect
