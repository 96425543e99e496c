// msformer CLI: train / eval / ablate / selfcheck.
//
// Exit codes: 0 success, 1 failed selfcheck or metric regression,
// 2 invalid spec or usage, 3 data errors, 4 checkpoint/stats mismatch.

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "msformer/checkpoint.hpp"
#include "msformer/harness.hpp"
#include "msformer/metrics.hpp"
#include "msformer/model.hpp"
#include "msformer/runspec.hpp"
#include "msformer/selfcheck.hpp"

namespace fs = std::filesystem;
using namespace msformer;

namespace {

constexpr int kExitSelfcheck = 1;
constexpr int kExitSpec = 2;
constexpr int kExitData = 3;
constexpr int kExitCheckpoint = 4;

struct SeedRange {
    std::uint64_t lo = 0, hi = 0;
    bool set = false;
};

SeedRange parse_seed_arg(const std::string& arg) {
    SeedRange r;
    if (arg.empty()) return r;
    r.set = true;
    const auto dots = arg.find("..");
    try {
        if (dots == std::string::npos) {
            r.lo = r.hi = std::stoull(arg);
        } else {
            r.lo = std::stoull(arg.substr(0, dots));
            r.hi = std::stoull(arg.substr(dots + 2));
        }
    } catch (const std::exception&) {
        throw ConfigError("--seed: expected N or A..B, got '" + arg + "'");
    }
    if (r.hi < r.lo) throw ConfigError("--seed: empty range '" + arg + "'");
    return r;
}

std::string timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y%m%d-%H%M%S");
    return os.str();
}

RunSpec load_spec(const std::string& config_path, const std::vector<std::string>& overrides) {
    RunSpec spec = config_path.empty() ? RunSpec{} : RunSpec::from_file(config_path);
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--override: expected key=value, got '" + ov + "'");
        }
        std::string key = ov.substr(0, eq);
        std::string value = ov.substr(eq + 1);
        while (!key.empty() && key.back() == ' ') key.pop_back();
        while (!value.empty() && value.front() == ' ') value.erase(value.begin());
        spec.apply_override(key, value);
    }
    spec.resolve();
    return spec;
}

struct RunOutcome {
    RunReport report;
    fs::path run_dir;
};

// One full training run: prepares data, trains, writes the four artifacts
// (config snapshot, checkpoint, metrics, predictions) into its own dir.
RunOutcome run_training(RunSpec spec, const std::string& run_label) {
    PreparedData prepared = prepare_dataset(spec.data, spec.model.window_len);
    if (spec.model.input_dim == 0) {
        spec.model.input_dim = prepared.splits.input_dim;
    } else if (spec.model.input_dim != prepared.splits.input_dim) {
        throw ConfigError("model.input_dim = " + std::to_string(spec.model.input_dim) +
                          " but the dataset provides " +
                          std::to_string(prepared.splits.input_dim) + " features");
    }
    spec.model.validate();

    MsFormer model(spec.model, spec.train.seed);
    TrainConfig tc = spec.train;
    if (tc.epochs >= 20) tc.log_every = 1;
    RunReport report = train(model, prepared.splits, tc);
    report.config_fingerprint = spec.model_train_fingerprint();

    RunOutcome out;
    out.run_dir = fs::path(spec.out_dir) / run_label;
    fs::create_directories(out.run_dir);
    {
        std::ofstream cfg_out(out.run_dir / "config.txt");
        if (!cfg_out) throw IoError("cannot write " + (out.run_dir / "config.txt").string());
        cfg_out << spec.resolved_text();
    }
    save_checkpoint((out.run_dir / "checkpoint").string(), model.parameters());
    save_norm_stats((out.run_dir / "norm_stats.txt").string(), prepared.stats);
    write_metrics((out.run_dir / "metrics.txt").string(), report);
    write_predictions_csv((out.run_dir / "predictions.csv").string(), report.predictions);
    out.report = report;
    return out;
}

void print_report(const RunReport& r) {
    std::cout << std::setprecision(10);
    std::cout << "RMSE  = " << r.rmse << "\n"
              << "MAE   = " << r.mae << "\n"
              << "Score = " << r.score << "\n";
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& seed_arg, const std::string& out_arg) {
    RunSpec spec;
    SeedRange seeds;
    try {
        spec = load_spec(config_path, overrides);
        seeds = parse_seed_arg(seed_arg);
        if (!out_arg.empty()) spec.out_dir = out_arg;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSpec;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSpec;
    }

    std::vector<std::uint64_t> seed_list;
    if (seeds.set) {
        for (std::uint64_t s = seeds.lo; s <= seeds.hi; ++s) seed_list.push_back(s);
    } else {
        seed_list.push_back(spec.train.seed);
    }

    const std::string stamp = timestamp();
    std::vector<RunReport> reports;
    try {
        for (std::uint64_t s : seed_list) {
            RunSpec rs = spec;
            rs.train.seed = s;
            const std::string label = stamp + "-" + rs.data.kind +
                                      (rs.data.kind == "cmapss" ? "-" + rs.data.subset : "") +
                                      "-seed" + std::to_string(s);
            std::cout << "== run " << label << " ==\n";
            RunOutcome out = run_training(rs, label);
            print_report(out.report);
            std::cout << "artifacts: " << out.run_dir.string() << "\n";
            reports.push_back(out.report);
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSpec;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }

    if (reports.size() > 1) {
        auto stat = [&](auto get) {
            double m = 0.0;
            for (const auto& r : reports) m += get(r);
            m /= static_cast<double>(reports.size());
            double var = 0.0;
            for (const auto& r : reports) var += (get(r) - m) * (get(r) - m);
            var /= static_cast<double>(reports.size());
            return std::pair<double, double>(m, std::sqrt(var));
        };
        const auto [rm, rs] = stat([](const RunReport& r) { return r.rmse; });
        const auto [sm, ss] = stat([](const RunReport& r) { return r.score; });
        std::ostringstream os;
        os << std::setprecision(10);
        os << "seeds = " << seed_list.size() << "\n";
        os << "rmse_mean = " << rm << "\nrmse_std = " << rs << "\n";
        os << "score_mean = " << sm << "\nscore_std = " << ss << "\n";
        const fs::path summary = fs::path(spec.out_dir) / (stamp + "-multiseed_summary.txt");
        std::ofstream sf(summary);
        sf << os.str();
        std::cout << "== multi-seed summary ==\n" << os.str();
        std::cout << "summary: " << summary.string() << "\n";
    }
    return 0;
}

int cmd_eval(const std::string& run_dir, const std::string& data_path,
             const std::string& subset, const std::string& out_csv, bool mean_score) {
    RunSpec spec;
    NormStats stats;
    try {
        const fs::path dir(run_dir);
        if (!fs::exists(dir / "config.txt")) {
            std::cerr << "error: no config.txt in " << run_dir << "\n";
            return kExitCheckpoint;
        }
        spec = RunSpec::from_file((dir / "config.txt").string());
        spec.resolve();
        if (!fs::exists(dir / "norm_stats.txt")) {
            std::cerr << "error: no norm_stats.txt in " << run_dir << "\n";
            return kExitCheckpoint;
        }
        stats = load_norm_stats((dir / "norm_stats.txt").string());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCheckpoint;
    }

    if (!data_path.empty()) spec.data.path = data_path;
    if (!subset.empty()) spec.data.subset = subset;

    DatasetSplits splits;
    try {
        splits = prepare_eval_dataset(spec.data, stats, spec.model.window_len);
        if (splits.eval_windows.empty()) {
            std::cerr << "error: dataset has no test units to evaluate\n";
            return kExitData;
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }

    try {
        if (spec.model.input_dim != splits.input_dim) {
            throw CheckpointError("checkpoint was trained with input_dim " +
                                  std::to_string(spec.model.input_dim) + ", dataset provides " +
                                  std::to_string(splits.input_dim));
        }
        MsFormer model(spec.model, spec.train.seed);
        load_checkpoint((fs::path(run_dir) / "checkpoint").string(), model.parameters());
        RunReport report;
        evaluate(model, splits.eval_windows, splits.rul_cap, report);
        report.param_count = model.param_count();
        report.config_fingerprint = spec.model_train_fingerprint();
        print_report(report);
        if (mean_score) {
            std::cout << "Score(mean) = " << report.score_mean << "\n";
        }
        const fs::path csv = out_csv.empty() ? fs::path(run_dir) / "eval_predictions.csv"
                                             : fs::path(out_csv);
        write_predictions_csv(csv.string(), report.predictions);
        std::cout << "predictions: " << csv.string() << "\n";
        return 0;
    } catch (const CheckpointError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCheckpoint;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCheckpoint;
    }
}

struct StudyRow {
    std::string label;
    std::vector<std::pair<std::string, std::string>> overrides;
};

std::vector<StudyRow> study_rows(const std::string& study) {
    std::vector<StudyRow> rows;
    if (study == "ms-stages") {
        // All on/off combinations over stages 1..3; off = lambda 1.
        for (int bits = 0; bits < 8; ++bits) {
            const int l1 = (bits & 1) ? 4 : 1;
            const int l2 = (bits & 2) ? 4 : 1;
            const int l3 = (bits & 4) ? 2 : 1;
            std::ostringstream label;
            label << ((bits & 1) ? "ms1" : "---") << '+' << ((bits & 2) ? "ms2" : "---") << '+'
                  << ((bits & 4) ? "ms3" : "---");
            std::ostringstream sched;
            sched << l1 << ',' << l2 << ',' << l3 << ",1";
            rows.push_back({label.str(), {{"model.lambda_schedule", sched.str()}}});
        }
    } else if (study == "lambda-fixed") {
        for (int l : {1, 2, 4, 7}) {
            std::ostringstream sched;
            sched << l << ',' << l << ',' << l << ",1";
            rows.push_back({"fixed-" + std::to_string(l),
                            {{"model.lambda_schedule", sched.str()}}});
        }
    } else if (study == "lambda-schedule") {
        rows.push_back({"4,4,2,1 (default)", {{"model.lambda_schedule", "4,4,2,1"}}});
        rows.push_back({"4,4,4,1", {{"model.lambda_schedule", "4,4,4,1"}}});
        rows.push_back({"2,2,2,1", {{"model.lambda_schedule", "2,2,2,1"}}});
        rows.push_back({"2,4,2,1", {{"model.lambda_schedule", "2,4,2,1"}}});
        rows.push_back({"7,4,2,1", {{"model.lambda_schedule", "7,4,2,1"}}});
        rows.push_back({"1,2,4,1", {{"model.lambda_schedule", "1,2,4,1"}}});
    } else if (study == "pe-variant") {
        rows.push_back({"literal", {{"model.rpe_mode", "literal"}}});
        rows.push_back({"continuous", {{"model.rpe_mode", "continuous"}}});
        rows.push_back({"off", {{"model.rpe_mode", "off"}}});
    } else if (study == "c1-sweep") {
        for (int c1 : {2, 4, 8, 16, 32}) {
            rows.push_back({"c1=" + std::to_string(c1),
                            {{"model.c1", std::to_string(c1)},
                             {"model.c2", std::to_string(2 * c1)}}});
        }
    } else if (study == "attn-layout") {
        rows.push_back({"LA,LA,RPE:2,RPE (default)",
                        {{"model.stage_layout", "LA,LA,RPE:2,RPE"}}});
        rows.push_back({"LA,LA,RPE:2,RPE:2", {{"model.stage_layout", "LA,LA,RPE:2,RPE:2"}}});
        rows.push_back({"LA,LA,RPE:3,RPE", {{"model.stage_layout", "LA,LA,RPE:3,RPE"}}});
        rows.push_back({"LA,RPE,RPE:2,RPE", {{"model.stage_layout", "LA,RPE,RPE:2,RPE"}}});
        rows.push_back({"RPE,RPE,RPE:2,RPE", {{"model.stage_layout", "RPE,RPE,RPE:2,RPE"}}});
    } else {
        throw ConfigError("unknown study '" + study +
                          "' (expected ms-stages, lambda-fixed, lambda-schedule, pe-variant, "
                          "c1-sweep or attn-layout)");
    }
    return rows;
}

int cmd_ablate(const std::string& study, const std::string& config_path,
               const std::vector<std::string>& overrides, const std::string& seed_arg,
               const std::string& out_arg) {
    RunSpec base;
    std::vector<StudyRow> rows;
    SeedRange seeds;
    try {
        base = load_spec(config_path, overrides);
        rows = study_rows(study);
        seeds = parse_seed_arg(seed_arg);
        if (!out_arg.empty()) base.out_dir = out_arg;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSpec;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSpec;
    }

    std::vector<std::uint64_t> seed_list;
    if (seeds.set) {
        for (std::uint64_t s = seeds.lo; s <= seeds.hi; ++s) seed_list.push_back(s);
    } else {
        seed_list.push_back(base.train.seed);
    }

    const std::string stamp = timestamp();
    std::ostringstream table;
    table << std::setprecision(6);
    table << "study: " << study << " (seeds " << seed_list.size() << ")\n";
    table << std::left << std::setw(26) << "config" << std::right << std::setw(12) << "rmse"
          << std::setw(14) << "score" << std::setw(12) << "params" << "\n";

    try {
        for (std::size_t ri = 0; ri < rows.size(); ++ri) {
            double rmse_sum = 0.0, score_sum = 0.0;
            std::int64_t n_params = 0;
            bool applicable = true;
            std::string why;
            for (std::uint64_t s : seed_list) {
                RunSpec rs = base;
                for (const auto& [k, v] : rows[ri].overrides) rs.apply_override(k, v);
                rs.train.seed = s;
                try {
                    rs.resolve();
                } catch (const ConfigError& e) {
                    // A study row can be incompatible with the base spec
                    // (e.g. a dilation that does not divide the window).
                    applicable = false;
                    why = e.what();
                    break;
                }
                const std::string label =
                    stamp + "-" + study + "-row" + std::to_string(ri) + "-seed" +
                    std::to_string(s);
                RunOutcome out = run_training(rs, label);
                rmse_sum += out.report.rmse;
                score_sum += out.report.score;
                n_params = out.report.param_count;
            }
            if (!applicable) {
                table << std::left << std::setw(26) << rows[ri].label << "  n/a (" << why
                      << ")\n";
                std::cout << "skipped " << rows[ri].label << ": " << why << "\n";
                continue;
            }
            const double inv = 1.0 / static_cast<double>(seed_list.size());
            table << std::left << std::setw(26) << rows[ri].label << std::right << std::setw(12)
                  << rmse_sum * inv << std::setw(14) << score_sum * inv << std::setw(12)
                  << n_params << "\n";
            std::cout << "completed " << rows[ri].label << "\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSpec;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }

    fs::create_directories(base.out_dir);
    const fs::path table_path = fs::path(base.out_dir) / ("ablation_" + study + ".txt");
    std::ofstream tf(table_path);
    tf << table.str();
    std::cout << table.str();
    std::cout << "table: " << table_path.string() << "\n";
    return 0;
}

int cmd_selfcheck(bool inject_grad_bug) {
    if (inject_grad_bug) {
        testhooks::gelu_backward_scale = 1.02;
    }
    const auto results = run_selfcheck();
    bool all_pass = true;
    for (const auto& r : results) {
        std::cout << (r.pass ? "PASS" : "FAIL") << "  " << r.name << ": " << r.detail << "\n";
        all_pass = all_pass && r.pass;
    }
    testhooks::gelu_backward_scale = 1.0;
    return all_pass ? 0 : kExitSelfcheck;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"msformer: multi-scale transformer for remaining-useful-life regression"};
    app.require_subcommand(1);

    std::string config_path, seed_arg, out_arg, study;
    std::vector<std::string> overrides;

    auto* train_cmd = app.add_subcommand("train", "train a model from a run spec");
    train_cmd->add_option("--config", config_path, "run spec file");
    train_cmd->add_option("--override", overrides, "key=value override (repeatable)");
    train_cmd->add_option("--seed", seed_arg, "seed N or range A..B for multi-seed runs");
    train_cmd->add_option("--out", out_arg, "output directory (overrides output.dir)");

    std::string run_dir, data_path, subset, out_csv;
    bool mean_score = false;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a finished run directory");
    eval_cmd->add_option("--run", run_dir, "run directory with checkpoint + stats")->required();
    eval_cmd->add_option("--data", data_path, "dataset path override");
    eval_cmd->add_option("--subset", subset, "subset override (cmapss)");
    eval_cmd->add_option("--out", out_csv, "where to write predictions.csv");
    eval_cmd->add_flag("--mean-score", mean_score, "also print the per-unit mean score");

    auto* ablate_cmd = app.add_subcommand("ablate", "run a predefined configuration study");
    ablate_cmd->add_option("--study", study, "ms-stages | lambda-fixed | lambda-schedule | "
                                             "pe-variant | c1-sweep | attn-layout")
        ->required();
    ablate_cmd->add_option("--config", config_path, "base run spec file");
    ablate_cmd->add_option("--override", overrides, "key=value override (repeatable)");
    ablate_cmd->add_option("--seed", seed_arg, "seed N or range A..B per configuration");
    ablate_cmd->add_option("--out", out_arg, "output directory");

    bool inject_grad_bug = false;
    auto* selfcheck_cmd = app.add_subcommand("selfcheck", "run the built-in property suite");
    selfcheck_cmd->add_flag("--inject-grad-bug", inject_grad_bug,
                            "deliberately corrupt one backward pass (negative test)")
        ->group("");  // hidden

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitSpec;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(config_path, overrides, seed_arg, out_arg);
        if (eval_cmd->parsed()) return cmd_eval(run_dir, data_path, subset, out_csv, mean_score);
        if (ablate_cmd->parsed())
            return cmd_ablate(study, config_path, overrides, seed_arg, out_arg);
        if (selfcheck_cmd->parsed()) return cmd_selfcheck(inject_grad_bug);
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitSelfcheck;
    }
    return kExitSpec;
}
