#include "msformer/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>

#include "msformer/metrics.hpp"

namespace msformer {

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (lr <= 0.0) throw ConfigError("train: lr must be positive");
    if (eval_every < 0) throw ConfigError("train: eval_every must be >= 0");
}

void evaluate(MsFormer& model, const std::vector<WindowRef>& eval_windows, double rul_cap,
              RunReport& report) {
    if (eval_windows.empty()) throw ContractError("evaluate: no evaluation windows");
    NoGradGuard ng;
    model.set_training(false);

    report.predictions.clear();
    report.predictions.reserve(eval_windows.size());
    const std::size_t chunk = 256;
    std::vector<std::size_t> order;
    for (std::size_t at = 0; at < eval_windows.size(); at += chunk) {
        const std::size_t stop = std::min(eval_windows.size(), at + chunk);
        order.resize(stop - at);
        for (std::size_t i = at; i < stop; ++i) order[i - at] = i;
        WindowBatch batch = materialize(eval_windows, order, model.config().window_len);
        Tensor out = model.forward(batch.x);
        for (std::size_t i = 0; i < order.size(); ++i) {
            UnitPrediction p;
            p.unit_id = batch.unit_ids[i];
            p.end_cycle = batch.end_cycles[i];
            p.true_rul = batch.rul.vec()[i];
            p.pred_rul = std::max(0.0, out.vec()[i] * rul_cap);
            report.predictions.push_back(p);
        }
    }

    std::vector<double> truth, pred;
    truth.reserve(report.predictions.size());
    pred.reserve(report.predictions.size());
    for (const auto& p : report.predictions) {
        truth.push_back(p.true_rul);
        pred.push_back(p.pred_rul);
    }
    report.rmse = rmse(truth, pred);
    report.mae = mae(truth, pred);
    report.score = score(truth, pred);
    report.score_mean = score_mean(truth, pred);
}

RunReport train(MsFormer& model, const DatasetSplits& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.train_windows.empty()) throw ContractError("train: no training windows");

    const auto t0 = std::chrono::steady_clock::now();
    const double cap = data.rul_cap;
    const double cap2 = cap * cap;

    Adam optim(Adam::Options{cfg.lr, 0.9, 0.999, 1e-8});
    auto& params = model.parameters();
    zero_grads(params);

    RunReport report;
    report.param_count = model.param_count();

    std::vector<std::vector<double>> best_weights;
    double best_rmse = std::numeric_limits<double>::infinity();
    int best_epoch = 0;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        model.set_training(true);
        const auto batches = epoch_batches(data.train_windows.size(),
                                           static_cast<std::size_t>(cfg.batch_size), true,
                                           cfg.seed + static_cast<std::uint64_t>(epoch));
        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            WindowBatch batch =
                materialize(data.train_windows, batches[bi], model.config().window_len);
            Tensor target = scale(batch.rul, 1.0 / cap);
            Tensor pred = model.forward(batch.x);
            Tensor loss = mse(pred, target);
            const double loss_v = loss.item();
            if (!std::isfinite(loss_v)) {
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   " batch " + std::to_string(bi));
            }
            loss.backward();
            optim.step(params);
            zero_grads(params);
            epoch_loss += loss_v * static_cast<double>(batches[bi].size());
            seen += batches[bi].size();
        }
        report.train_loss.push_back(epoch_loss / static_cast<double>(seen) * cap2);
        if (cfg.log_every > 0 && (epoch % cfg.log_every == 0 || epoch == cfg.epochs)) {
            std::cerr << "epoch " << epoch << "/" << cfg.epochs << " train mse "
                      << report.train_loss.back() << "\n";
        }

        const bool eval_now = cfg.eval_every > 0 && !data.eval_windows.empty() &&
                              (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        if (eval_now) {
            RunReport probe;
            evaluate(model, data.eval_windows, cap, probe);
            if (cfg.keep_best && probe.rmse < best_rmse) {
                best_rmse = probe.rmse;
                best_epoch = epoch;
                best_weights.clear();
                for (const auto& p : params) best_weights.push_back(p.value.vec());
            }
        }
    }

    if (cfg.keep_best && !best_weights.empty()) {
        for (std::size_t i = 0; i < params.size(); ++i) params[i].value.vec() = best_weights[i];
        report.best_epoch = best_epoch;
    } else {
        report.best_epoch = cfg.epochs;
    }

    if (!data.eval_windows.empty()) {
        evaluate(model, data.eval_windows, cap, report);
    }
    model.set_training(false);
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

void write_metrics(const std::string& path, const RunReport& report) {
    std::ofstream out(path);
    if (!out) throw IoError("write_metrics: cannot write " + path);
    out << std::setprecision(17);
    out << "rmse = " << report.rmse << "\n";
    out << "mae = " << report.mae << "\n";
    out << "score = " << report.score << "\n";
    out << "score_mean = " << report.score_mean << "\n";
    out << "units = " << report.predictions.size() << "\n";
    out << "param_count = " << report.param_count << "\n";
    out << "config_fingerprint = " << report.config_fingerprint << "\n";
    out << "best_epoch = " << report.best_epoch << "\n";
    out << "wall_seconds = " << report.wall_seconds << "\n";
    for (std::size_t e = 0; e < report.train_loss.size(); ++e) {
        out << "train_loss " << e + 1 << ' ' << report.train_loss[e] << "\n";
    }
    if (!out) throw IoError("write_metrics: write failure for " + path);
}

void write_predictions_csv(const std::string& path, const std::vector<UnitPrediction>& preds) {
    std::ofstream out(path);
    if (!out) throw IoError("write_predictions_csv: cannot write " + path);
    out << std::setprecision(17);
    out << "unit_id,end_cycle,true_rul,pred_rul\n";
    for (const auto& p : preds) {
        out << p.unit_id << ',' << p.end_cycle << ',' << p.true_rul << ',' << p.pred_rul << "\n";
    }
    if (!out) throw IoError("write_predictions_csv: write failure for " + path);
}

std::vector<UnitPrediction> read_predictions_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("read_predictions_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "unit_id,end_cycle,true_rul,pred_rul") {
        throw ParseError(path + ": missing predictions header");
    }
    std::vector<UnitPrediction> preds;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        UnitPrediction p;
        char c1 = 0, c2 = 0, c3 = 0;
        if (!(ls >> p.unit_id >> c1 >> p.end_cycle >> c2 >> p.true_rul >> c3 >> p.pred_rul) ||
            c1 != ',' || c2 != ',' || c3 != ',') {
            throw ParseError(path + ":" + std::to_string(lineno) + ": malformed row");
        }
        preds.push_back(p);
    }
    return preds;
}

std::string fingerprint(const std::string& canonical_text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : canonical_text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

}  // namespace msformer
