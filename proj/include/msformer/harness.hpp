#pragma once

// Training loop, evaluation protocol (last window per test unit), and run
// reporting. Targets are scaled by 1/rul_cap inside the loss; reported
// predictions are always in RUL cycles.

#include <cstdint>
#include <string>
#include <vector>

#include "msformer/data.hpp"
#include "msformer/model.hpp"

namespace msformer {

struct TrainConfig {
    int epochs = 300;
    int batch_size = 128;
    double lr = 1e-3;
    std::uint64_t seed = 42;
    int eval_every = 0;      // 0 = only after the final epoch
    bool keep_best = false;  // retain best-by-test-RMSE weights (peeks at test data)
    int log_every = 0;       // epochs between progress lines on stderr; 0 = silent
    std::string checkpoint_dir;

    void validate() const;
};

struct UnitPrediction {
    int unit_id = 0;
    int end_cycle = 0;
    double true_rul = 0.0;
    double pred_rul = 0.0;
};

struct RunReport {
    std::vector<double> train_loss;  // per epoch, RUL-cycle^2 units
    double rmse = 0.0, mae = 0.0, score = 0.0, score_mean = 0.0;
    std::vector<UnitPrediction> predictions;
    std::string config_fingerprint;
    double wall_seconds = 0.0;
    std::int64_t param_count = 0;
    int best_epoch = 0;  // epoch whose weights are loaded (keep_best only)
};

// Everything a run needs: training windows, the per-unit evaluation windows,
// and the stores keeping the normalized trajectories alive.
struct DatasetSplits {
    std::shared_ptr<std::vector<Trajectory>> train_store, test_store;
    std::vector<WindowRef> train_windows;
    std::vector<WindowRef> eval_windows;
    int input_dim = 0;
    double rul_cap = 125.0;
};

RunReport train(MsFormer& model, const DatasetSplits& data, const TrainConfig& cfg);

// Scores the given windows (standard protocol: one last window per unit);
// predictions are clamped at zero.
void evaluate(MsFormer& model, const std::vector<WindowRef>& eval_windows, double rul_cap,
              RunReport& report);

void write_metrics(const std::string& path, const RunReport& report);
void write_predictions_csv(const std::string& path, const std::vector<UnitPrediction>& preds);
std::vector<UnitPrediction> read_predictions_csv(const std::string& path);

// FNV-1a over a canonical config rendering; stable across runs.
std::string fingerprint(const std::string& canonical_text);

}  // namespace msformer
