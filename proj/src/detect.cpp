#include "oslab/detect.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace oslab::detect {

using json = nlohmann::ordered_json;

void LossHistory::record(long step, std::span<const double> losses) {
    if (losses.empty()) throw config_error("cannot record empty loss row");
    if (n_ == 0) {
        n_ = losses.size();
    } else {
        if (losses.size() != n_) throw config_error("loss row length changed");
        if (step <= steps_.back())
            throw config_error("steps must be recorded in strictly increasing order");
    }
    steps_.push_back(step);
    data_.insert(data_.end(), losses.begin(), losses.end());
}

std::optional<std::size_t> LossHistory::row_of(long step) const {
    auto it = std::lower_bound(steps_.begin(), steps_.end(), step);
    if (it == steps_.end() || *it != step) return std::nullopt;
    return static_cast<std::size_t>(it - steps_.begin());
}

std::vector<double> loss_delta(const LossHistory& history, long step) {
    auto r = history.row_of(step);
    if (!r || *r == 0) throw config_error("loss_delta needs the step and its predecessor");
    auto cur = history.row(*r);
    auto prev = history.row(*r - 1);
    std::vector<double> d(cur.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = cur[i] - prev[i];
    return d;
}

OutlierSelection select_outliers(const LossHistory& history, long step, int k) {
    const auto n = static_cast<int>(history.samples());
    if (k < 1 || 2 * k > n) throw config_error("need 1 <= k <= n/2");
    auto delta = loss_delta(history, step);

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (delta[a] != delta[b]) return delta[a] > delta[b];
        return a < b;
    });

    OutlierSelection sel;
    sel.step = step;
    sel.up.assign(order.begin(), order.begin() + k);
    std::vector<int> rest(order.begin() + k, order.end());
    std::sort(rest.begin(), rest.end(), [&](int a, int b) {
        if (delta[a] != delta[b]) return delta[a] < delta[b];
        return a < b;
    });
    sel.down.assign(rest.begin(), rest.begin() + k);
    std::sort(sel.up.begin(), sel.up.end());
    std::sort(sel.down.begin(), sel.down.end());
    return sel;
}

double successive_overlap(const OutlierSelection& a, const OutlierSelection& b) {
    if (a.up.size() != b.up.size()) throw config_error("selections have different k");
    std::set<int> sa(a.up.begin(), a.up.end()), sb(b.up.begin(), b.up.end());
    sa.insert(a.down.begin(), a.down.end());
    sb.insert(b.down.begin(), b.down.end());
    std::size_t inter = 0;
    for (int x : sa) inter += sb.count(x);
    const std::size_t uni = sa.size() + sb.size() - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

PairMethod pair_method_from_string(const std::string& s) {
    if (s == "delta_correlation") return PairMethod::delta_correlation;
    if (s == "gradient_alignment") return PairMethod::gradient_alignment;
    throw config_error("unknown pairing method '" + s + "'");
}

std::string to_string(PairMethod m) {
    return m == PairMethod::delta_correlation ? "delta_correlation" : "gradient_alignment";
}

namespace {

double pearson(std::span<const double> a, std::span<const double> b) {
    const auto n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = nrm2(a), nb = nrm2(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

struct UnionFind {
    std::vector<int> parent;
    explicit UnionFind(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    int find(int x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    }
    void unite(int a, int b) { parent[find(a)] = find(b); }
};

}  // namespace

PairingResult pair_groups(const LossHistory& history, long window_start, long window_end, int k,
                          double rho, PairMethod method,
                          const std::vector<std::vector<double>>* midpoint_gradients) {
    if (window_end <= window_start) throw config_error("empty pairing window");
    if (!(rho > 0.0 && rho <= 1.0)) throw config_error("rho must lie in (0, 1]");

    // Candidate pool: union of per-step outlier selections inside the window.
    std::set<int> pool;
    std::vector<long> delta_steps;
    for (std::size_t r = 1; r < history.rows(); ++r) {
        const long s = history.step_at(r);
        if (s < window_start || s > window_end) continue;
        delta_steps.push_back(s);
        auto sel = select_outliers(history, s, k);
        pool.insert(sel.up.begin(), sel.up.end());
        pool.insert(sel.down.begin(), sel.down.end());
    }
    if (delta_steps.size() < 2) throw config_error("window contains too few recorded steps");

    std::vector<int> cand(pool.begin(), pool.end());
    PairingResult result;

    // Feature series per candidate: loss-change series over the window, or
    // the per-sample gradient at the window midpoint.
    std::vector<std::vector<double>> series(cand.size());
    if (method == PairMethod::delta_correlation) {
        for (std::size_t ci = 0; ci < cand.size(); ++ci) {
            series[ci].reserve(delta_steps.size());
        }
        for (long s : delta_steps) {
            auto d = loss_delta(history, s);
            for (std::size_t ci = 0; ci < cand.size(); ++ci) series[ci].push_back(d[cand[ci]]);
        }
    } else {
        if (!midpoint_gradients)
            throw config_error("gradient_alignment needs per-sample gradients");
        for (std::size_t ci = 0; ci < cand.size(); ++ci)
            series[ci] = midpoint_gradients->at(cand[ci]);
    }

    // Drop degenerate candidates.
    std::vector<int> keep;
    for (std::size_t ci = 0; ci < cand.size(); ++ci) {
        bool degenerate;
        if (method == PairMethod::delta_correlation) {
            const double first = series[ci].front();
            degenerate = std::all_of(series[ci].begin(), series[ci].end(),
                                     [&](double x) { return x == first; });
        } else {
            degenerate = nrm2(series[ci]) == 0.0;
        }
        if (degenerate)
            result.excluded.push_back(cand[ci]);
        else
            keep.push_back(static_cast<int>(ci));
    }

    auto similarity = [&](int a, int b) {
        return method == PairMethod::delta_correlation ? pearson(series[a], series[b])
                                                       : cosine(series[a], series[b]);
    };

    // Cluster candidates whose pairwise similarity reaches +rho.
    UnionFind uf(static_cast<int>(keep.size()));
    for (std::size_t i = 0; i < keep.size(); ++i)
        for (std::size_t j = i + 1; j < keep.size(); ++j)
            if (similarity(keep[i], keep[j]) >= rho) uf.unite(static_cast<int>(i),
                                                              static_cast<int>(j));

    std::vector<std::vector<int>> groups;       // sample indices
    std::vector<std::vector<double>> means;     // group-mean series
    {
        std::vector<int> root_to_group(keep.size(), -1);
        for (std::size_t i = 0; i < keep.size(); ++i) {
            const int r = uf.find(static_cast<int>(i));
            if (root_to_group[r] < 0) {
                root_to_group[r] = static_cast<int>(groups.size());
                groups.emplace_back();
                means.emplace_back(series[keep[i]].size(), 0.0);
            }
            const int g = root_to_group[r];
            groups[g].push_back(cand[keep[i]]);
            for (std::size_t t = 0; t < means[g].size(); ++t) means[g][t] += series[keep[i]][t];
        }
        for (std::size_t g = 0; g < groups.size(); ++g) {
            std::sort(groups[g].begin(), groups[g].end());
            for (double& x : means[g]) x /= static_cast<double>(groups[g].size());
        }
    }

    // Pair groups whose mean series anti-correlate at -rho or below.
    for (std::size_t a = 0; a < groups.size(); ++a) {
        for (std::size_t b = a + 1; b < groups.size(); ++b) {
            const double corr = method == PairMethod::delta_correlation
                                    ? pearson(means[a], means[b])
                                    : cosine(means[a], means[b]);
            if (corr <= -rho) {
                GroupPair p;
                p.group_a = groups[a];
                p.group_b = groups[b];
                p.anti_correlation = corr;
                p.window_start = window_start;
                p.window_end = window_end;
                result.pairs.push_back(std::move(p));
            }
        }
    }
    return result;
}

double fraction_increasing(const LossHistory& history, long step) {
    auto d = loss_delta(history, step);
    std::size_t count = 0;
    for (double x : d)
        if (x > 0.0) ++count;
    return static_cast<double>(count) / static_cast<double>(d.size());
}

OscillationStats oscillation_stats(const LossHistory& history, std::span<const int> group,
                                   long window_start, long window_end) {
    if (group.empty()) throw config_error("oscillation_stats needs a nonempty group");
    std::vector<double> mean_delta;
    for (std::size_t r = 1; r < history.rows(); ++r) {
        const long s = history.step_at(r);
        if (s < window_start || s > window_end) continue;
        auto cur = history.row(r);
        auto prev = history.row(r - 1);
        double m = 0.0;
        for (int i : group) {
            if (i < 0 || static_cast<std::size_t>(i) >= history.samples())
                throw config_error("group index out of range");
            m += cur[i] - prev[i];
        }
        mean_delta.push_back(m / static_cast<double>(group.size()));
    }
    if (mean_delta.size() < 3) throw config_error("oscillation window too short (< 3 steps)");

    OscillationStats st;
    std::size_t flips = 0;
    for (std::size_t i = 1; i < mean_delta.size(); ++i)
        if (mean_delta[i] * mean_delta[i - 1] < 0.0) ++flips;
    st.sign_flip_rate = static_cast<double>(flips) / static_cast<double>(mean_delta.size() - 1);

    // Least-squares slope of |mean delta| against the window step index.
    const auto n = static_cast<double>(mean_delta.size());
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < mean_delta.size(); ++i) {
        const double x = static_cast<double>(i);
        const double y = std::abs(mean_delta[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    st.amplitude_trend = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    return st;
}

void write_losses_csv(const LossHistory& history, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw config_error("cannot open " + path);
    out << "step";
    for (std::size_t i = 0; i < history.samples(); ++i) out << ",s" << i;
    out << "\n";
    for (std::size_t r = 0; r < history.rows(); ++r) {
        out << history.step_at(r);
        for (double x : history.row(r)) out << ',' << fmt_double(x);
        out << "\n";
    }
}

LossHistory read_losses_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw config_error("empty losses file " + path);
    LossHistory h;
    std::vector<double> row;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        row.clear();
        std::stringstream ss(line);
        std::string cell;
        if (!std::getline(ss, cell, ',')) continue;
        const long step = parse_long(cell);
        while (std::getline(ss, cell, ',')) row.push_back(parse_double(cell));
        h.record(step, row);
    }
    return h;
}

void write_losses_binary(const LossHistory& history, const std::string& bin_path,
                         const std::string& sidecar_path) {
    std::ofstream out(bin_path, std::ios::binary);
    if (!out) throw config_error("cannot open " + bin_path);
    for (std::size_t r = 0; r < history.rows(); ++r) {
        auto row = history.row(r);
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(double)));
    }
    json side;
    side["n"] = history.samples();
    side["steps"] = history.steps();
    side["dtype"] = "float64";
    side["order"] = "row-major";
    std::ofstream sc(sidecar_path);
    if (!sc) throw config_error("cannot open " + sidecar_path);
    sc << side.dump(2) << "\n";
}

LossHistory read_losses_binary(const std::string& bin_path, const std::string& sidecar_path) {
    std::ifstream sc(sidecar_path);
    if (!sc) throw config_error("cannot open " + sidecar_path);
    json side = json::parse(sc);
    if (side.at("dtype").get<std::string>() != "float64")
        throw config_error("unsupported dtype in " + sidecar_path);
    const auto n = side.at("n").get<std::size_t>();
    const auto steps = side.at("steps").get<std::vector<long>>();

    std::ifstream in(bin_path, std::ios::binary);
    if (!in) throw config_error("cannot open " + bin_path);
    LossHistory h;
    std::vector<double> row(n);
    for (long s : steps) {
        in.read(reinterpret_cast<char*>(row.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        if (!in) throw config_error("losses binary shorter than sidecar claims");
        h.record(s, row);
    }
    return h;
}

}  // namespace oslab::detect
