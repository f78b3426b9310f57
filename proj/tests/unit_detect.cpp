#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "oslab/detect.hpp"

using namespace oslab;
using detect::LossHistory;

namespace {

LossHistory history_from_rows(const std::vector<std::vector<double>>& rows, long step0 = 0) {
    LossHistory h;
    for (std::size_t r = 0; r < rows.size(); ++r)
        h.record(step0 + static_cast<long>(r), rows[r]);
    return h;
}

}  // namespace

TEST_CASE("loss history recording") {
    LossHistory h;
    h.record(0, std::vector<double>{1.0, 2.0});
    CHECK(h.rows() == 1);
    CHECK(h.samples() == 2);
    CHECK_THROWS_AS(h.record(0, std::vector<double>{1.0, 2.0}), config_error);
    CHECK_THROWS_AS(h.record(5, std::vector<double>{1.0}), config_error);
    h.record(5, std::vector<double>{1.5, 2.5});
    h.record(6, std::vector<double>{1.7, 2.2});
    CHECK(h.rows() == 3);
    CHECK(h.row_of(5).value() == 1);
    CHECK_FALSE(h.row_of(3).has_value());
}

TEST_CASE("loss delta") {
    auto h = history_from_rows({{1.0, 2.0, 3.0}, {0.0, 5.0, 3.0}});
    auto d = detect::loss_delta(h, 1);
    CHECK(d == std::vector<double>{-1.0, 3.0, 0.0});
    CHECK_THROWS_AS(detect::loss_delta(h, 0), config_error);  // no predecessor
    CHECK_THROWS_AS(detect::loss_delta(h, 7), config_error);

    SUBCASE("identical consecutive rows give a zero delta") {
        auto h2 = history_from_rows({{1.0, 1.0}, {1.0, 1.0}});
        auto z = detect::loss_delta(h2, 1);
        CHECK(z == std::vector<double>{0.0, 0.0});
    }

    SUBCASE("delta sums to n times the mean loss change") {
        const double sum = -1.0 + 3.0 + 0.0;
        double mean_change = 0.0;
        for (std::size_t i = 0; i < 3; ++i) mean_change += h.row(1)[i] - h.row(0)[i];
        CHECK(sum == doctest::Approx(mean_change));
    }
}

TEST_CASE("outlier selection") {
    auto h = history_from_rows({{1.0, 2.0, 3.0}, {0.0, 5.0, 3.0}});

    SUBCASE("hand case") {
        auto sel = detect::select_outliers(h, 1, 1);
        CHECK(sel.up == std::vector<int>{1});
        CHECK(sel.down == std::vector<int>{0});
    }

    SUBCASE("k out of range") {
        CHECK_THROWS_AS(detect::select_outliers(h, 1, 0), config_error);
        CHECK_THROWS_AS(detect::select_outliers(h, 1, 2), config_error);
    }

    SUBCASE("ties broken by ascending index, up and down disjoint") {
        auto h2 = history_from_rows({{1, 1, 1, 1}, {2, 2, 2, 2}});
        auto sel = detect::select_outliers(h2, 1, 2);
        CHECK(sel.up == std::vector<int>{0, 1});
        CHECK(sel.down == std::vector<int>{2, 3});
    }

    SUBCASE("k = n/2 covers all samples") {
        auto h2 = history_from_rows({{1, 2, 3, 4}, {4, 1, 3, 0}});
        auto sel = detect::select_outliers(h2, 1, 2);
        std::vector<int> all = sel.up;
        all.insert(all.end(), sel.down.begin(), sel.down.end());
        std::sort(all.begin(), all.end());
        CHECK(all == std::vector<int>{0, 1, 2, 3});
    }

    SUBCASE("permutation equivariance on distinct deltas") {
        std::vector<double> r0 = {1, 2, 3, 4, 5, 6};
        std::vector<double> r1 = {0.5, 4.0, 2.0, 9.0, 4.5, 6.1};
        auto h1 = history_from_rows({r0, r1});
        auto sel1 = detect::select_outliers(h1, 1, 2);
        const std::vector<int> perm = {3, 0, 5, 1, 4, 2};  // new position of old index i
        std::vector<double> p0(6), p1(6);
        for (int i = 0; i < 6; ++i) {
            p0[perm[i]] = r0[i];
            p1[perm[i]] = r1[i];
        }
        auto h2 = history_from_rows({p0, p1});
        auto sel2 = detect::select_outliers(h2, 1, 2);
        auto mapped = [&](std::vector<int> s) {
            for (int& x : s) x = perm[x];
            std::sort(s.begin(), s.end());
            return s;
        };
        CHECK(mapped(sel1.up) == sel2.up);
        CHECK(mapped(sel1.down) == sel2.down);
    }
}

TEST_CASE("successive overlap is the Jaccard index of combined sets") {
    detect::OutlierSelection a, b;
    a.up = {0, 1};
    a.down = {2, 3};
    b = a;
    CHECK(detect::successive_overlap(a, b) == 1.0);
    b.up = {4, 5};
    b.down = {6, 7};
    CHECK(detect::successive_overlap(a, b) == 0.0);
    // combined sets {0,1,2,3} and {0,1,4,5}: intersection 2, union 6
    b.up = {0, 1};
    b.down = {4, 5};
    CHECK(detect::successive_overlap(a, b) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("fraction increasing") {
    auto h = history_from_rows({{1.0, 2.0, 3.0}, {0.0, 5.0, 3.0}});
    CHECK(detect::fraction_increasing(h, 1) == doctest::Approx(1.0 / 3.0));

    auto all_up = history_from_rows({{0.0, 0.0}, {1.0, 2.0}});
    CHECK(detect::fraction_increasing(all_up, 1) == 1.0);
    auto all_down = history_from_rows({{3.0, 3.0}, {1.0, 2.0}});
    CHECK(detect::fraction_increasing(all_down, 1) == 0.0);

    SUBCASE("complement counts zero-change samples") {
        auto d = detect::loss_delta(h, 1);
        std::size_t nonpos = 0;
        for (double x : d)
            if (x <= 0.0) ++nonpos;
        CHECK(detect::fraction_increasing(h, 1) +
                  static_cast<double>(nonpos) / static_cast<double>(d.size()) ==
              doctest::Approx(1.0));
    }
}

TEST_CASE("oscillation statistics") {
    SUBCASE("strictly alternating series flips every step with flat trend") {
        std::vector<std::vector<double>> rows;
        double level = 10.0;
        rows.push_back({level});
        double delta = 1.0;
        for (int t = 0; t < 10; ++t) {
            level += delta;
            rows.push_back({level});
            delta = -delta;
        }
        auto h = history_from_rows(rows);
        std::vector<int> group = {0};
        auto st = detect::oscillation_stats(h, group, 1, 10);
        CHECK(st.sign_flip_rate == 1.0);
        CHECK(st.amplitude_trend == doctest::Approx(0.0).epsilon(1e-12));
    }

    SUBCASE("monotone series never flips") {
        std::vector<std::vector<double>> rows;
        for (int t = 0; t <= 10; ++t) rows.push_back({static_cast<double>(t * t)});
        auto h = history_from_rows(rows);
        std::vector<int> group = {0};
        auto st = detect::oscillation_stats(h, group, 1, 10);
        CHECK(st.sign_flip_rate == 0.0);
        CHECK(st.amplitude_trend > 0.0);
    }

    SUBCASE("geometric alternating growth matches the regression oracle") {
        // |delta_t| = g^t: slope of the least-squares fit computed directly.
        const double g = 1.2;
        std::vector<std::vector<double>> rows;
        double level = 0.0, amp = 1.0, sign = 1.0;
        rows.push_back({level});
        std::vector<double> amps;
        for (int t = 0; t < 12; ++t) {
            level += sign * amp;
            rows.push_back({level});
            amps.push_back(amp);
            amp *= g;
            sign = -sign;
        }
        auto h = history_from_rows(rows);
        std::vector<int> group = {0};
        auto st = detect::oscillation_stats(h, group, 1, 12);
        CHECK(st.sign_flip_rate == 1.0);
        const auto n = static_cast<double>(amps.size());
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        for (std::size_t i = 0; i < amps.size(); ++i) {
            sx += static_cast<double>(i);
            sy += amps[i];
            sxx += static_cast<double>(i) * i;
            sxy += static_cast<double>(i) * amps[i];
        }
        const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        CHECK(st.amplitude_trend == doctest::Approx(slope).epsilon(1e-12));
        CHECK(st.amplitude_trend > 0.0);
    }

    SUBCASE("window too short") {
        auto h = history_from_rows({{1.0}, {2.0}, {1.0}});
        std::vector<int> group = {0};
        CHECK_THROWS_AS(detect::oscillation_stats(h, group, 1, 2), config_error);
    }
}

TEST_CASE("pair groups") {
    SUBCASE("two antiphase samples pair with anti-correlation -1") {
        // Samples 0 and 1 move in exact opposition; 2..5 are flat-ish noise
        // with tiny distinct magnitudes to avoid zero-variance exclusion.
        std::vector<std::vector<double>> rows;
        double phase = 1.0;
        double base = 10.0;
        for (int t = 0; t <= 12; ++t) {
            std::vector<double> row = {base + phase, base - phase, 5.0 + 1e-6 * (t % 2),
                                       5.0 - 1e-6 * (t % 2), 5.0 + 2e-6 * (t % 3), 5.0};
            rows.push_back(row);
            phase = -phase * 1.1;
        }
        auto h = history_from_rows(rows);
        auto res = detect::pair_groups(h, 1, 12, 1, 0.5, detect::PairMethod::delta_correlation);
        REQUIRE(res.pairs.size() >= 1);
        const auto& p = res.pairs.front();
        CHECK(((p.group_a == std::vector<int>{0} && p.group_b == std::vector<int>{1}) ||
               (p.group_a == std::vector<int>{1} && p.group_b == std::vector<int>{0})));
        CHECK(p.anti_correlation == doctest::Approx(-1.0).epsilon(1e-9));
    }

    SUBCASE("identical series produce no pairs") {
        std::vector<std::vector<double>> rows;
        for (int t = 0; t <= 8; ++t) {
            const double x = std::sin(0.7 * t);
            rows.push_back({x, x, x, x});
        }
        auto h = history_from_rows(rows);
        auto res = detect::pair_groups(h, 1, 8, 2, 0.5, detect::PairMethod::delta_correlation);
        CHECK(res.pairs.empty());
    }

    SUBCASE("planted antiphase pairs among noise are recovered exactly") {
        Rng rng(91);
        const int n = 100;
        const int T = 40;
        std::vector<std::vector<double>> rows;
        double amp = 1.0, sign = 1.0;
        std::vector<double> level(n, 5.0);
        rows.emplace_back(level);
        for (int t = 0; t < T; ++t) {
            // planted: samples 0,1 follow +signal, 2,3 follow -signal (snr >= 5)
            const double sig = sign * amp;
            level[0] += sig;
            level[1] += sig * 1.05;
            level[2] -= sig;
            level[3] -= sig * 0.95;
            for (int i = 4; i < n; ++i) level[i] += 0.05 * rng.gaussian();
            rows.emplace_back(level);
            sign = -sign;
            amp *= 1.02;
        }
        auto h = history_from_rows(rows);
        auto res = detect::pair_groups(h, 1, T, 2, 0.5, detect::PairMethod::delta_correlation);
        REQUIRE(res.pairs.size() == 1);
        auto a = res.pairs[0].group_a, b = res.pairs[0].group_b;
        if (!a.empty() && a[0] > 1) std::swap(a, b);
        CHECK(a == std::vector<int>{0, 1});
        CHECK(b == std::vector<int>{2, 3});
        CHECK(res.pairs[0].anti_correlation <= -0.5);
    }

    SUBCASE("gradient alignment method uses supplied per-sample gradients") {
        // Deltas put samples 0..3 in the candidate pool; gradients decide
        // the grouping: 0,1 aligned; 2,3 aligned; the two groups opposed.
        std::vector<std::vector<double>> rows;
        double phase = 1.0;
        for (int t = 0; t <= 6; ++t) {
            rows.push_back({5 + phase, 5 + phase, 5 - phase, 5 - phase});
            phase = -phase;
        }
        auto h = history_from_rows(rows);
        std::vector<std::vector<double>> grads = {
            {1.0, 0.0}, {0.9, 0.1}, {-1.0, 0.0}, {-0.95, -0.05}};
        auto res = detect::pair_groups(h, 1, 6, 2, 0.5,
                                       detect::PairMethod::gradient_alignment, &grads);
        REQUIRE(res.pairs.size() == 1);
        CHECK(res.pairs[0].group_a.size() == 2);
        CHECK(res.pairs[0].group_b.size() == 2);
        CHECK_THROWS_AS(
            detect::pair_groups(h, 1, 6, 2, 0.5, detect::PairMethod::gradient_alignment),
            config_error);
    }

    SUBCASE("zero-variance candidates are excluded with notice") {
        std::vector<std::vector<double>> rows;
        double phase = 1.0;
        for (int t = 0; t <= 6; ++t) {
            rows.push_back({5 + phase, 5 - phase, 3.0, 3.0});
            phase = -phase * 1.2;
        }
        auto h = history_from_rows(rows);
        auto res = detect::pair_groups(h, 1, 6, 2, 0.5, detect::PairMethod::delta_correlation);
        CHECK(res.excluded == std::vector<int>{2, 3});
        REQUIRE(res.pairs.size() == 1);
    }
}

TEST_CASE("loss matrix round-trips through csv and binary") {
    Rng rng(7);
    LossHistory h;
    std::vector<double> row(5);
    for (long s : {0L, 1L, 2L, 5L}) {
        for (double& x : row) x = rng.gaussian() * std::pow(10.0, rng.gaussian());
        h.record(s, row);
    }
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "oslab_detect_test";
    fs::create_directories(dir);

    detect::write_losses_csv(h, (dir / "l.csv").string());
    auto h2 = detect::read_losses_csv((dir / "l.csv").string());
    REQUIRE(h2.rows() == h.rows());
    CHECK(h2.steps() == h.steps());
    for (std::size_t r = 0; r < h.rows(); ++r)
        for (std::size_t i = 0; i < h.samples(); ++i)
            CHECK(h2.row(r)[i] == h.row(r)[i]);  // exact: round-trip formatting

    detect::write_losses_binary(h, (dir / "l.bin").string(), (dir / "l.json").string());
    auto h3 = detect::read_losses_binary((dir / "l.bin").string(), (dir / "l.json").string());
    REQUIRE(h3.rows() == h.rows());
    for (std::size_t r = 0; r < h.rows(); ++r)
        for (std::size_t i = 0; i < h.samples(); ++i)
            CHECK(h3.row(r)[i] == h.row(r)[i]);
    fs::remove_all(dir);
}
