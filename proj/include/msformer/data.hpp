#pragma once

// Data pipeline: C-MAPSS ingestion, a generic CSV adapter, synthetic
// degradation fixtures, train-split-only normalization, and sliding-window
// batching with capped time-to-failure labels.

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "msformer/tensor.hpp"

namespace msformer {

struct Trajectory {
    int unit_id = 0;
    std::string subset;
    std::vector<std::array<double, 3>> settings;  // per cycle operating settings
    std::vector<std::vector<double>> sensors;     // per cycle feature row

    std::size_t length() const { return sensors.size(); }
};

struct CmapssData {
    std::vector<Trajectory> train;
    std::vector<Trajectory> test;
    std::vector<double> test_rul;  // aligned with test unit order
};

// Reads train_<subset>.txt / test_<subset>.txt / RUL_<subset>.txt with the
// standard 26 whitespace-separated columns (unit, cycle, 3 settings,
// 21 sensors). Cycles must be contiguous from 1 within each unit.
CmapssData load_cmapss(const std::string& dir, const std::string& subset);

// Generic adapter: header `unit,cycle,f1..fk`; settings are zero-filled.
std::vector<Trajectory> load_csv(const std::string& path);

// Per-feature z-score statistics fit on the training split only. The mask
// drops features whose training variance is below 1e-12; when condition
// normalization is on, statistics are kept per discrete operating regime
// (exact matching on rounded settings).
struct NormStats {
    std::vector<int> keep;         // 0/1 per raw feature
    std::vector<double> mean, stddev;
    bool condition_norm = false;
    std::vector<std::array<long, 3>> regime_keys;
    std::vector<std::vector<double>> regime_mean, regime_std;  // [regime][raw feature]

    std::size_t raw_features() const { return keep.size(); }
    std::size_t retained() const;
};

std::vector<int> select_features(const std::vector<Trajectory>& train);
NormStats fit_norm_stats(const std::vector<Trajectory>& train, const std::vector<int>& mask,
                         bool condition_norm);

// Returns trajectories whose sensor rows contain exactly the retained
// features, z-scored. Masked features never appear in the output.
std::vector<Trajectory> normalize(const std::vector<Trajectory>& trajs, const NormStats& stats);

void save_norm_stats(const std::string& path, const NormStats& stats);
NormStats load_norm_stats(const std::string& path);

// A window is a reference into a trajectory: the last cycle index it covers
// (0-based, inclusive) plus its capped label. Windows ending before cycle
// L-1 only occur for short test units and are materialized by repeating the
// first cycle on the left.
struct WindowRef {
    const Trajectory* traj = nullptr;
    std::size_t end = 0;
    double rul = 0.0;
};

std::vector<WindowRef> make_windows(const Trajectory& traj, int window_len, double rul_cap);
WindowRef make_eval_window(const Trajectory& traj, int window_len, double rul_cap,
                           double true_rul);

struct WindowBatch {
    Tensor x;    // [N, L, D]
    Tensor rul;  // [N], capped, in cycles
    std::vector<int> unit_ids;
    std::vector<int> end_cycles;  // 1-based end cycle of each window
};

WindowBatch materialize(const std::vector<WindowRef>& windows,
                        const std::vector<std::size_t>& order, int window_len);

// One epoch of batch index lists. Shuffling is a deterministic function of
// the seed; with shuffle off the original order is preserved. The last
// batch may be short; every window appears exactly once.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    bool shuffle, std::uint64_t seed);

// Synthetic degradation fixture: per unit a random length in [60, 200],
// features = monotone drift + periodic component + Gaussian noise, all
// deterministic per seed.
std::vector<Trajectory> synth_degradation(std::uint64_t seed, int n_units, int n_features,
                                          double noise_amp = 0.05);

// Split synthetic units into train/test; test units are truncated at a
// random cycle and their remaining life recorded, mirroring the benchmark
// protocol.
CmapssData synth_split(std::vector<Trajectory> trajs, double test_frac, std::uint64_t seed);

}  // namespace msformer
