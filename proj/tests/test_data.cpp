#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "msformer/data.hpp"

using namespace msformer;
namespace fs = std::filesystem;

namespace {

// Writes a miniature dataset in the 26-column turbofan text format.
void write_cmapss_fixture(const fs::path& dir, const std::string& subset) {
    fs::create_directories(dir);
    auto write_unit = [](std::ofstream& out, int unit, int cycles, double bias) {
        for (int c = 1; c <= cycles; ++c) {
            out << unit << ' ' << c << ' ' << 0.5 << ' ' << 0.25 << ' ' << 100.0;
            for (int s = 0; s < 21; ++s) {
                // Sensor 3 is constant everywhere; the rest vary.
                const double v = s == 3 ? 7.0 : bias + 0.1 * s + 0.01 * c * (s + 1);
                out << ' ' << v;
            }
            out << "\n";
        }
    };
    {
        std::ofstream out(dir / ("train_" + subset + ".txt"));
        write_unit(out, 1, 40, 0.0);
        write_unit(out, 2, 35, 1.0);
        write_unit(out, 3, 30, -1.0);
    }
    {
        std::ofstream out(dir / ("test_" + subset + ".txt"));
        write_unit(out, 1, 32, 0.5);
        write_unit(out, 2, 20, 1.5);  // shorter than a window of 28
    }
    {
        std::ofstream out(dir / ("RUL_" + subset + ".txt"));
        out << "17\n42\n";
    }
}

}  // namespace

TEST_CASE("cmapss fixture parses with grouping and alignment") {
    const fs::path dir = fs::temp_directory_path() / "msf_cmapss_fixture";
    fs::remove_all(dir);
    write_cmapss_fixture(dir, "FD001");
    CmapssData data = load_cmapss(dir.string(), "FD001");
    CHECK(data.train.size() == 3);
    CHECK(data.test.size() == 2);
    CHECK(data.test_rul == std::vector<double>{17.0, 42.0});
    CHECK(data.train[0].length() == 40);
    CHECK(data.train[1].unit_id == 2);
    CHECK(data.train[0].sensors[0].size() == 21);
    CHECK(data.train[0].settings[0][2] == 100.0);
    fs::remove_all(dir);
}

TEST_CASE("cmapss parse errors carry file and line") {
    const fs::path dir = fs::temp_directory_path() / "msf_cmapss_bad";
    fs::remove_all(dir);
    fs::create_directories(dir);
    {
        std::ofstream out(dir / "train_FD001.txt");
        out << "1 1 0 0 0 1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16 17 18 19 20 21\n";
        out << "1 2 0 0 0 oops 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16 17 18 19 20 21\n";
    }
    try {
        load_cmapss(dir.string(), "FD001");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("train_FD001.txt:2") != std::string::npos);
        CHECK(msg.find("oops") != std::string::npos);
    }

    // Empty file: zero trajectories are rejected.
    std::ofstream(dir / "train_FD001.txt").close();
    CHECK_THROWS_AS(load_cmapss(dir.string(), "FD001"), ParseError);
    // Missing file entirely.
    fs::remove(dir / "train_FD001.txt");
    CHECK_THROWS_AS(load_cmapss(dir.string(), "FD001"), IoError);
    fs::remove_all(dir);
}

TEST_CASE("csv adapter matches the cmapss windowing semantics") {
    const fs::path file = fs::temp_directory_path() / "msf_adapter.csv";
    {
        std::ofstream out(file);
        out << "unit,cycle,f1,f2\n";
        for (int c = 1; c <= 6; ++c) out << "1," << c << ',' << 0.5 * c << ",9\n";
        for (int c = 1; c <= 4; ++c) out << "2," << c << ',' << 1.0 * c << ",7\n";
    }
    auto trajs = load_csv(file.string());
    REQUIRE(trajs.size() == 2);
    CHECK(trajs[0].length() == 6);
    CHECK(trajs[1].length() == 4);
    CHECK(trajs[0].sensors[2][0] == doctest::Approx(1.5));

    {
        std::ofstream out(file);
        out << "id,cycle,f1\n1,1,2\n";
    }
    CHECK_THROWS_AS(load_csv(file.string()), ParseError);
    fs::remove(file);
}

TEST_CASE("feature selection drops constant columns") {
    auto trajs = synth_degradation(3, 4, 5, 0.01);
    // Append a constant column to every row.
    for (auto& t : trajs)
        for (auto& row : t.sensors) row.push_back(3.25);
    auto mask = select_features(trajs);
    REQUIRE(mask.size() == 6);
    CHECK(mask[5] == 0);
    for (int i = 0; i < 5; ++i) CHECK(mask[i] == 1);

    // All-varying data keeps the identity mask.
    auto varying = synth_degradation(4, 3, 4, 0.02);
    auto mask2 = select_features(varying);
    for (int v : mask2) CHECK(v == 1);

    // Everything constant is rejected.
    std::vector<Trajectory> flat(1);
    flat[0].unit_id = 1;
    for (int c = 0; c < 10; ++c) {
        flat[0].settings.push_back({0, 0, 0});
        flat[0].sensors.push_back({1.0, 2.0});
    }
    CHECK_THROWS_AS(select_features(flat), ConfigError);
}

TEST_CASE("normalization: self-application is zero mean unit variance") {
    auto trajs = synth_degradation(8, 6, 5, 0.05);
    auto mask = select_features(trajs);
    NormStats stats = fit_norm_stats(trajs, mask, false);
    auto normed = normalize(trajs, stats);

    const std::size_t k = stats.retained();
    std::vector<double> sum(k, 0.0), sumsq(k, 0.0);
    std::size_t n = 0;
    for (const auto& t : normed) {
        for (const auto& row : t.sensors) {
            REQUIRE(row.size() == k);
            for (std::size_t i = 0; i < k; ++i) {
                sum[i] += row[i];
                sumsq[i] += row[i] * row[i];
            }
            ++n;
        }
    }
    for (std::size_t i = 0; i < k; ++i) {
        const double mean = sum[i] / n;
        const double var = sumsq[i] / n - mean * mean;
        CHECK(std::fabs(mean) < 1e-9);
        CHECK(std::fabs(std::sqrt(var) - 1.0) < 1e-9);
    }
}

TEST_CASE("normalization: constant shift moves the mean by shift/std") {
    auto trajs = synth_degradation(9, 4, 3, 0.0);
    auto mask = select_features(trajs);
    NormStats stats = fit_norm_stats(trajs, mask, false);

    auto shifted = trajs;
    const double shift = 2.5;
    for (auto& t : shifted)
        for (auto& row : t.sensors)
            for (auto& v : row) v += shift;
    auto normed = normalize(shifted, stats);

    std::vector<double> sum(stats.retained(), 0.0);
    std::size_t n = 0;
    std::vector<double> base_sum(stats.retained(), 0.0);
    auto base = normalize(trajs, stats);
    for (std::size_t ti = 0; ti < normed.size(); ++ti) {
        for (std::size_t c = 0; c < normed[ti].length(); ++c) {
            for (std::size_t i = 0; i < sum.size(); ++i) {
                sum[i] += normed[ti].sensors[c][i];
                base_sum[i] += base[ti].sensors[c][i];
            }
            ++n;
        }
    }
    std::size_t ri = 0;
    for (std::size_t raw = 0; raw < stats.raw_features(); ++raw) {
        if (!stats.keep[raw]) continue;
        const double mean_diff = (sum[ri] - base_sum[ri]) / n;
        CHECK(mean_diff == doctest::Approx(shift / stats.stddev[raw]).epsilon(1e-9));
        ++ri;
    }
}

TEST_CASE("normalization is invertible on retained features") {
    auto trajs = synth_degradation(10, 5, 4, 0.05);
    auto mask = select_features(trajs);
    NormStats stats = fit_norm_stats(trajs, mask, false);
    auto normed = normalize(trajs, stats);
    for (std::size_t ti = 0; ti < trajs.size(); ++ti) {
        for (std::size_t c = 0; c < trajs[ti].length(); ++c) {
            std::size_t ri = 0;
            for (std::size_t raw = 0; raw < stats.raw_features(); ++raw) {
                if (!stats.keep[raw]) continue;
                const double back =
                    normed[ti].sensors[c][ri] * stats.stddev[raw] + stats.mean[raw];
                CHECK(std::fabs(back - trajs[ti].sensors[c][raw]) < 1e-9);
                ++ri;
            }
        }
    }
}

TEST_CASE("no test-set leakage: stats are a function of the training split only") {
    auto all = synth_degradation(12, 8, 4, 0.05);
    auto split = synth_split(all, 0.25, 99);
    auto mask = select_features(split.train);
    NormStats with_test_around = fit_norm_stats(split.train, mask, false);
    // Recompute on an isolated copy of the training split.
    auto train_copy = split.train;
    NormStats isolated = fit_norm_stats(train_copy, select_features(train_copy), false);
    CHECK(with_test_around.mean == isolated.mean);
    CHECK(with_test_around.stddev == isolated.stddev);
    CHECK(with_test_around.keep == isolated.keep);
}

TEST_CASE("condition normalization groups discrete regimes exactly") {
    std::vector<Trajectory> trajs(2);
    for (int u = 0; u < 2; ++u) {
        trajs[u].unit_id = u + 1;
        for (int c = 0; c < 30; ++c) {
            const bool alt = c % 2 == 0;
            trajs[u].settings.push_back(alt ? std::array<double, 3>{10.001, 0.2501, 20.0}
                                            : std::array<double, 3>{35.002, 0.8399, 60.0});
            trajs[u].sensors.push_back({alt ? 100.0 + c : 500.0 + c, 1.0 * c});
        }
    }
    auto mask = select_features(trajs);
    NormStats stats = fit_norm_stats(trajs, mask, true);
    CHECK(stats.regime_keys.size() == 2);
    auto normed = normalize(trajs, stats);
    // Within each regime the first feature is now centered near zero rather
    // than split into two distant clusters.
    double max_abs = 0.0;
    for (const auto& t : normed)
        for (const auto& row : t.sensors) max_abs = std::max(max_abs, std::fabs(row[0]));
    CHECK(max_abs < 3.0);

    save_norm_stats((fs::temp_directory_path() / "msf_stats_cond.txt").string(), stats);
    NormStats loaded =
        load_norm_stats((fs::temp_directory_path() / "msf_stats_cond.txt").string());
    CHECK(loaded.regime_keys == stats.regime_keys);
    CHECK(loaded.regime_mean == stats.regime_mean);
}

TEST_CASE("window construction: counts, caps, terminal label") {
    Trajectory t;
    t.unit_id = 7;
    for (int c = 0; c < 30; ++c) {
        t.settings.push_back({0, 0, 0});
        t.sensors.push_back({double(c)});
    }
    auto windows = make_windows(t, 28, 125.0);
    REQUIRE(windows.size() == 3);  // T - L + 1
    CHECK(windows[0].rul == 2.0);
    CHECK(windows[2].rul == 0.0);  // final cycle labels zero

    Trajectory longer;
    longer.unit_id = 8;
    for (int c = 0; c < 200; ++c) {
        longer.settings.push_back({0, 0, 0});
        longer.sensors.push_back({double(c)});
    }
    auto lw = make_windows(longer, 28, 125.0);
    // Cycle 10 is not a window end (ends start at L=28); the earliest window
    // is still capped.
    CHECK(lw.front().rul == 125.0);
    // Window ending at cycle 10 would be labeled 125 too; check via the cap
    // rule on an end that is beyond the cap distance.
    CHECK(lw[10].rul == 125.0);
    CHECK(lw.back().rul == 0.0);

    // Brute-force alignment over every window of every unit.
    for (const auto& w : lw) {
        const double expect =
            std::min(125.0, double(longer.length() - 1 - w.end));
        CHECK(w.rul == expect);
    }

    for (const auto& unit : synth_degradation(99, 12, 3, 0.1)) {
        for (const auto& w : make_windows(unit, 28, 60.0)) {
            CHECK(w.rul == std::min(60.0, double(unit.length() - 1 - w.end)));
        }
    }
}

TEST_CASE("short test units left-pad by repeating the first cycle") {
    Trajectory t;
    t.unit_id = 9;
    for (int c = 0; c < 5; ++c) {
        t.settings.push_back({0, 0, 0});
        t.sensors.push_back({10.0 + c});
    }
    std::vector<WindowRef> w{make_eval_window(t, 8, 125.0, 33.0)};
    WindowBatch batch = materialize(w, {0}, 8);
    CHECK(batch.rul.vec()[0] == 33.0);
    // Three padded positions repeat cycle 1, then the real cycles follow.
    for (int p = 0; p < 4; ++p) CHECK(batch.x.vec()[p] == 10.0);
    CHECK(batch.x.vec()[4] == 11.0);
    CHECK(batch.x.vec()[7] == 14.0);
}

TEST_CASE("synthetic generator is deterministic and clean at zero noise") {
    auto a = synth_degradation(42, 3, 4, 0.05);
    auto b = synth_degradation(42, 3, 4, 0.05);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].sensors == b[i].sensors);
    }

    auto clean = synth_degradation(7, 2, 3, 0.0);
    // Noise-free signals are exactly reproducible from the closed form, so
    // two draws with the same seed but different noise amplitude agree on
    // nothing; instead verify smoothness via second differences being tame.
    for (const auto& t : clean) {
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t c = 2; c < t.length(); ++c) {
                const double d2 = t.sensors[c][i] - 2 * t.sensors[c - 1][i] +
                                  t.sensors[c - 2][i];
                CHECK(std::fabs(d2) < 0.2);
            }
        }
    }

    // Labels decrease by exactly one per cycle until zero.
    const auto windows = make_windows(clean[0], 28, 1e9);
    for (std::size_t i = 1; i < windows.size(); ++i) {
        CHECK(windows[i - 1].rul - windows[i].rul == 1.0);
    }
    CHECK(windows.back().rul == 0.0);
}

TEST_CASE("real C-MAPSS subsets parse to the published unit counts") {
    // Runs only when a real dataset is available.
    const char* dir = std::getenv("CMAPSS_DIR");
    if (dir == nullptr) {
        MESSAGE("CMAPSS_DIR not set; skipping real-dataset checks");
        return;
    }
    CmapssData fd001 = load_cmapss(dir, "FD001");
    CHECK(fd001.train.size() == 100);
    CHECK(fd001.test.size() == 100);

    if (std::filesystem::exists(std::filesystem::path(dir) / "train_FD004.txt")) {
        CmapssData fd004 = load_cmapss(dir, "FD004");
        CHECK(fd004.train.size() == 248);
        CHECK(fd004.test.size() == 249);
    }

    // Retained-feature count fixed by an independent variance scan.
    std::size_t expect_kept = 0;
    for (std::size_t s = 0; s < 21; ++s) {
        double mn = 1e300, mx = -1e300;
        double sum = 0.0, sumsq = 0.0;
        std::size_t n = 0;
        for (const auto& t : fd001.train) {
            for (const auto& row : t.sensors) {
                mn = std::min(mn, row[s]);
                mx = std::max(mx, row[s]);
                sum += row[s];
                sumsq += row[s] * row[s];
                ++n;
            }
        }
        const double mean = sum / n;
        const double var = sumsq / n - mean * mean;
        if (var > 1e-12) ++expect_kept;
        (void)mn;
        (void)mx;
    }
    const auto mask = select_features(fd001.train);
    std::size_t kept = 0;
    for (int v : mask) kept += v != 0;
    CHECK(kept == expect_kept);
    MESSAGE("FD001 retains ", kept, " of 21 sensors");
}

TEST_CASE("batch iteration covers every window once") {
    auto batches = epoch_batches(300, 128, false, 0);
    REQUIRE(batches.size() == 3);
    CHECK(batches[0].size() == 128);
    CHECK(batches[1].size() == 128);
    CHECK(batches[2].size() == 44);
    // Order preserved without shuffling.
    CHECK(batches[0][0] == 0);
    CHECK(batches[2][43] == 299);

    auto s1 = epoch_batches(300, 128, true, 77);
    auto s2 = epoch_batches(300, 128, true, 77);
    CHECK(s1 == s2);  // seed-deterministic permutation

    std::vector<int> seen(300, 0);
    for (const auto& b : s1)
        for (std::size_t i : b) seen[i]++;
    for (int c : seen) CHECK(c == 1);

    CHECK_THROWS_AS(epoch_batches(10, 0, false, 0), ConfigError);
}
