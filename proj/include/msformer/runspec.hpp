#pragma once

// Run specification: a flat key = value text file with dotted keys
// (data.*, model.*, train.*, output.*) plus command-line overrides.
// Unknown keys are rejected so typos fail fast. A resolved snapshot of a
// spec is itself a valid spec, which is what makes runs replayable.

#include <string>
#include <vector>

#include "msformer/data.hpp"
#include "msformer/harness.hpp"
#include "msformer/model.hpp"

namespace msformer {

struct DataConfig {
    std::string kind = "synthetic";  // cmapss | csv | synthetic
    std::string path;
    std::string subset = "FD001";
    double rul_cap = 125.0;
    bool condition_norm = false;
    std::string test_path;      // csv only
    std::string test_rul_path;  // csv only
    int synth_units = 24;
    int synth_features = 8;
    double synth_noise = 0.05;
    std::uint64_t synth_seed = 7;
    double synth_test_frac = 0.25;
};

struct RunSpec {
    DataConfig data;
    ModelConfig model;
    TrainConfig train;
    std::string out_dir = "runs";

    static RunSpec from_file(const std::string& path);
    void apply_override(const std::string& key, const std::string& value);

    // Fills derived fields (c2 = 2*c1 when unset, rul_cap mirrored into the
    // model) and validates everything that does not need the dataset.
    void resolve();

    std::string resolved_text() const;           // full snapshot, parseable
    std::string model_train_fingerprint() const;
};

struct PreparedData {
    DatasetSplits splits;
    NormStats stats;
};

// Loads, masks, normalizes and windows a dataset; statistics come from the
// training split only.
PreparedData prepare_dataset(const DataConfig& cfg, int window_len);

// Same pipeline against previously saved statistics (evaluation path).
DatasetSplits prepare_eval_dataset(const DataConfig& cfg, const NormStats& stats,
                                   int window_len);

}  // namespace msformer
