#include "msformer/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>

namespace msformer {

namespace {

constexpr int kCmapssColumns = 26;  // unit, cycle, 3 settings, 21 sensors
constexpr int kCmapssSensors = 21;
constexpr double kVarianceFloor = 1e-12;

std::vector<double> parse_numeric_row(const std::string& line, const std::string& file,
                                      std::size_t lineno) {
    std::istringstream ls(line);
    std::vector<double> row;
    std::string tok;
    while (ls >> tok) {
        try {
            std::size_t used = 0;
            const double v = std::stod(tok, &used);
            if (used != tok.size()) throw std::invalid_argument(tok);
            row.push_back(v);
        } catch (const std::exception&) {
            throw ParseError(file + ":" + std::to_string(lineno) + ": not a number: '" + tok +
                             "'");
        }
    }
    return row;
}

}  // namespace

CmapssData load_cmapss(const std::string& dir, const std::string& subset) {
    namespace fs = std::filesystem;
    auto read_trajectories = [&](const fs::path& path) {
        std::ifstream in(path);
        if (!in) throw IoError("load_cmapss: cannot open " + path.string());
        std::vector<Trajectory> trajs;
        std::map<int, std::size_t> unit_slot;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
            const std::vector<double> row = parse_numeric_row(line, path.string(), lineno);
            if (row.size() != kCmapssColumns) {
                throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                                 std::to_string(kCmapssColumns) + " columns, got " +
                                 std::to_string(row.size()));
            }
            const int unit = static_cast<int>(row[0]);
            const int cycle = static_cast<int>(row[1]);
            auto [it, fresh] = unit_slot.try_emplace(unit, trajs.size());
            if (fresh) {
                Trajectory t;
                t.unit_id = unit;
                t.subset = subset;
                trajs.push_back(std::move(t));
            }
            Trajectory& t = trajs[it->second];
            if (cycle != static_cast<int>(t.length()) + 1) {
                throw ParseError(path.string() + ":" + std::to_string(lineno) + ": unit " +
                                 std::to_string(unit) + " has cycle " + std::to_string(cycle) +
                                 ", expected " + std::to_string(t.length() + 1));
            }
            t.settings.push_back({row[2], row[3], row[4]});
            t.sensors.emplace_back(row.begin() + 5, row.begin() + 5 + kCmapssSensors);
        }
        if (trajs.empty()) {
            throw ParseError(path.string() + ": no data rows");
        }
        return trajs;
    };

    CmapssData data;
    data.train = read_trajectories(fs::path(dir) / ("train_" + subset + ".txt"));
    data.test = read_trajectories(fs::path(dir) / ("test_" + subset + ".txt"));

    const fs::path rul_path = fs::path(dir) / ("RUL_" + subset + ".txt");
    std::ifstream rul_in(rul_path);
    if (!rul_in) throw IoError("load_cmapss: cannot open " + rul_path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(rul_in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        const std::vector<double> row = parse_numeric_row(line, rul_path.string(), lineno);
        if (row.size() != 1) {
            throw ParseError(rul_path.string() + ":" + std::to_string(lineno) +
                             ": expected one value per line");
        }
        data.test_rul.push_back(row[0]);
    }
    if (data.test_rul.size() != data.test.size()) {
        throw ParseError(rul_path.string() + ": " + std::to_string(data.test_rul.size()) +
                         " RUL values for " + std::to_string(data.test.size()) + " test units");
    }
    return data;
}

std::vector<Trajectory> load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError(path + ": empty file");

    std::vector<std::string> header;
    {
        std::istringstream hs(line);
        std::string col;
        while (std::getline(hs, col, ',')) {
            while (!col.empty() && (col.back() == '\r' || col.back() == ' ')) col.pop_back();
            header.push_back(col);
        }
    }
    if (header.size() < 3 || header[0] != "unit" || header[1] != "cycle") {
        throw ParseError(path + ":1: header must be 'unit,cycle,f1..fk'");
    }
    const std::size_t k = header.size() - 2;

    std::vector<Trajectory> trajs;
    std::map<int, std::size_t> unit_slot;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r\n,") == std::string::npos) continue;
        std::istringstream ls(line);
        std::vector<double> row;
        std::string cell;
        while (std::getline(ls, cell, ',')) {
            try {
                row.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw ParseError(path + ":" + std::to_string(lineno) + ": not a number: '" +
                                 cell + "'");
            }
        }
        if (row.size() != header.size()) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": expected " +
                             std::to_string(header.size()) + " columns, got " +
                             std::to_string(row.size()));
        }
        const int unit = static_cast<int>(row[0]);
        const int cycle = static_cast<int>(row[1]);
        auto [it, fresh] = unit_slot.try_emplace(unit, trajs.size());
        if (fresh) {
            Trajectory t;
            t.unit_id = unit;
            t.subset = "CSV";
            trajs.push_back(std::move(t));
        }
        Trajectory& t = trajs[it->second];
        if (cycle != static_cast<int>(t.length()) + 1) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": unit " +
                             std::to_string(unit) + " has cycle " + std::to_string(cycle) +
                             ", expected " + std::to_string(t.length() + 1));
        }
        t.settings.push_back({0.0, 0.0, 0.0});
        t.sensors.emplace_back(row.begin() + 2, row.begin() + 2 + k);
    }
    if (trajs.empty()) throw ParseError(path + ": no data rows");
    return trajs;
}

std::size_t NormStats::retained() const {
    std::size_t n = 0;
    for (int v : keep) n += v != 0;
    return n;
}

namespace {

std::size_t feature_width(const std::vector<Trajectory>& trajs, const char* op) {
    if (trajs.empty()) throw ContractError(std::string(op) + ": empty trajectory list");
    if (trajs[0].sensors.empty()) throw ContractError(std::string(op) + ": empty trajectory");
    const std::size_t k = trajs[0].sensors[0].size();
    for (const auto& t : trajs) {
        for (const auto& row : t.sensors) {
            if (row.size() != k) {
                throw ShapeError(std::string(op) + ": inconsistent feature count (unit " +
                                 std::to_string(t.unit_id) + ")");
            }
        }
    }
    return k;
}

void mean_var(const std::vector<Trajectory>& trajs, std::vector<double>& mean,
              std::vector<double>& var) {
    const std::size_t k = mean.size();
    std::vector<double> sum(k, 0.0), sumsq(k, 0.0);
    std::size_t n = 0;
    for (const auto& t : trajs) {
        for (const auto& row : t.sensors) {
            for (std::size_t i = 0; i < k; ++i) {
                sum[i] += row[i];
                sumsq[i] += row[i] * row[i];
            }
            ++n;
        }
    }
    for (std::size_t i = 0; i < k; ++i) {
        mean[i] = sum[i] / static_cast<double>(n);
        var[i] = std::max(0.0, sumsq[i] / static_cast<double>(n) - mean[i] * mean[i]);
    }
}

std::array<long, 3> regime_key(const std::array<double, 3>& s) {
    return {std::lround(s[0]), std::lround(s[1] * 100.0), std::lround(s[2])};
}

}  // namespace

std::vector<int> select_features(const std::vector<Trajectory>& train) {
    const std::size_t k = feature_width(train, "select_features");
    std::vector<double> mean(k), var(k);
    mean_var(train, mean, var);
    std::vector<int> mask(k, 0);
    std::size_t kept = 0;
    for (std::size_t i = 0; i < k; ++i) {
        mask[i] = var[i] > kVarianceFloor ? 1 : 0;
        kept += static_cast<std::size_t>(mask[i]);
    }
    if (kept == 0) {
        throw ConfigError("select_features: every feature is constant on the training split");
    }
    return mask;
}

NormStats fit_norm_stats(const std::vector<Trajectory>& train, const std::vector<int>& mask,
                         bool condition_norm) {
    const std::size_t k = feature_width(train, "fit_norm_stats");
    if (mask.size() != k) {
        throw ShapeError("fit_norm_stats: mask covers " + std::to_string(mask.size()) +
                         " features, data has " + std::to_string(k));
    }
    NormStats stats;
    stats.keep = mask;
    stats.mean.resize(k);
    stats.stddev.resize(k);
    std::vector<double> var(k);
    mean_var(train, stats.mean, var);
    for (std::size_t i = 0; i < k; ++i) {
        stats.stddev[i] = std::sqrt(var[i]);
        if (mask[i] && stats.stddev[i] <= 0.0) {
            throw ConfigError("fit_norm_stats: retained feature " + std::to_string(i) +
                              " has zero variance");
        }
    }
    stats.condition_norm = condition_norm;
    if (condition_norm) {
        std::map<std::array<long, 3>, std::size_t> slots;
        for (const auto& t : train) {
            for (std::size_t cyc = 0; cyc < t.length(); ++cyc) {
                const auto key = regime_key(t.settings[cyc]);
                auto [it, fresh] = slots.try_emplace(key, stats.regime_keys.size());
                if (fresh) {
                    stats.regime_keys.push_back(key);
                }
            }
        }
        if (stats.regime_keys.size() > 64) {
            throw ConfigError("fit_norm_stats: " + std::to_string(stats.regime_keys.size()) +
                              " operating regimes found; settings do not look discrete, "
                              "disable condition_norm");
        }
        const std::size_t nr = stats.regime_keys.size();
        std::vector<std::vector<double>> sum(nr, std::vector<double>(k, 0.0));
        std::vector<std::vector<double>> sumsq(nr, std::vector<double>(k, 0.0));
        std::vector<std::size_t> count(nr, 0);
        for (const auto& t : train) {
            for (std::size_t cyc = 0; cyc < t.length(); ++cyc) {
                const std::size_t r = slots[regime_key(t.settings[cyc])];
                const auto& row = t.sensors[cyc];
                for (std::size_t i = 0; i < k; ++i) {
                    sum[r][i] += row[i];
                    sumsq[r][i] += row[i] * row[i];
                }
                ++count[r];
            }
        }
        stats.regime_mean.assign(nr, std::vector<double>(k, 0.0));
        stats.regime_std.assign(nr, std::vector<double>(k, 0.0));
        for (std::size_t r = 0; r < nr; ++r) {
            for (std::size_t i = 0; i < k; ++i) {
                const double m = sum[r][i] / static_cast<double>(count[r]);
                const double v =
                    std::max(0.0, sumsq[r][i] / static_cast<double>(count[r]) - m * m);
                stats.regime_mean[r][i] = m;
                // A globally varying sensor can still be flat within one
                // regime; floor the divisor instead of emitting infinities.
                stats.regime_std[r][i] = std::max(std::sqrt(v), 1e-8);
            }
        }
    }
    return stats;
}

std::vector<Trajectory> normalize(const std::vector<Trajectory>& trajs, const NormStats& stats) {
    const std::size_t k = stats.raw_features();
    std::vector<Trajectory> out;
    out.reserve(trajs.size());
    for (const auto& t : trajs) {
        Trajectory nt;
        nt.unit_id = t.unit_id;
        nt.subset = t.subset;
        nt.settings = t.settings;
        nt.sensors.reserve(t.length());
        for (std::size_t cyc = 0; cyc < t.length(); ++cyc) {
            const auto& row = t.sensors[cyc];
            if (row.size() != k) {
                throw ShapeError("normalize: unit " + std::to_string(t.unit_id) + " has " +
                                 std::to_string(row.size()) + " features, stats cover " +
                                 std::to_string(k));
            }
            const double* mean = stats.mean.data();
            const double* sd = stats.stddev.data();
            if (stats.condition_norm) {
                const auto key = regime_key(t.settings[cyc]);
                std::size_t r = stats.regime_keys.size();
                for (std::size_t i = 0; i < stats.regime_keys.size(); ++i) {
                    if (stats.regime_keys[i] == key) {
                        r = i;
                        break;
                    }
                }
                if (r == stats.regime_keys.size()) {
                    throw ConfigError("normalize: unit " + std::to_string(t.unit_id) + " cycle " +
                                      std::to_string(cyc + 1) +
                                      " is in an operating regime unseen during training");
                }
                mean = stats.regime_mean[r].data();
                sd = stats.regime_std[r].data();
            }
            std::vector<double> nrow;
            nrow.reserve(stats.retained());
            for (std::size_t i = 0; i < k; ++i) {
                if (stats.keep[i]) nrow.push_back((row[i] - mean[i]) / sd[i]);
            }
            nt.sensors.push_back(std::move(nrow));
        }
        out.push_back(std::move(nt));
    }
    return out;
}

void save_norm_stats(const std::string& path, const NormStats& stats) {
    std::ofstream out(path);
    if (!out) throw IoError("save_norm_stats: cannot write " + path);
    out << std::setprecision(17);
    out << "msformer-normstats 1\n";
    out << "features " << stats.raw_features() << "\n";
    for (std::size_t i = 0; i < stats.raw_features(); ++i) {
        out << "feature " << i << ' ' << stats.keep[i] << ' ' << stats.mean[i] << ' '
            << stats.stddev[i] << "\n";
    }
    out << "condition_norm " << (stats.condition_norm ? 1 : 0) << "\n";
    if (stats.condition_norm) {
        out << "regimes " << stats.regime_keys.size() << "\n";
        for (std::size_t r = 0; r < stats.regime_keys.size(); ++r) {
            out << "regime " << stats.regime_keys[r][0] << ' ' << stats.regime_keys[r][1] << ' '
                << stats.regime_keys[r][2] << "\n";
            out << "rmean";
            for (double v : stats.regime_mean[r]) out << ' ' << v;
            out << "\nrstd";
            for (double v : stats.regime_std[r]) out << ' ' << v;
            out << "\n";
        }
    }
    out << "end\n";
    if (!out) throw IoError("save_norm_stats: write failure for " + path);
}

NormStats load_norm_stats(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_norm_stats: cannot open " + path);
    std::string tag;
    int version = 0;
    in >> tag >> version;
    if (tag != "msformer-normstats" || version != 1) {
        throw ParseError(path + ": unrecognized norm-stats header");
    }
    NormStats stats;
    std::size_t k = 0;
    in >> tag >> k;
    if (tag != "features") throw ParseError(path + ": expected 'features' line");
    stats.keep.resize(k);
    stats.mean.resize(k);
    stats.stddev.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t idx = 0;
        in >> tag >> idx;
        if (tag != "feature" || idx != i) throw ParseError(path + ": malformed feature line");
        in >> stats.keep[i] >> stats.mean[i] >> stats.stddev[i];
    }
    int cond = 0;
    in >> tag >> cond;
    if (tag != "condition_norm") throw ParseError(path + ": expected 'condition_norm' line");
    stats.condition_norm = cond != 0;
    if (stats.condition_norm) {
        std::size_t m = 0;
        in >> tag >> m;
        if (tag != "regimes") throw ParseError(path + ": expected 'regimes' line");
        for (std::size_t r = 0; r < m; ++r) {
            std::array<long, 3> key{};
            in >> tag >> key[0] >> key[1] >> key[2];
            if (tag != "regime") throw ParseError(path + ": malformed regime line");
            stats.regime_keys.push_back(key);
            std::vector<double> mean(k), sd(k);
            in >> tag;
            if (tag != "rmean") throw ParseError(path + ": malformed rmean line");
            for (auto& v : mean) in >> v;
            in >> tag;
            if (tag != "rstd") throw ParseError(path + ": malformed rstd line");
            for (auto& v : sd) in >> v;
            stats.regime_mean.push_back(std::move(mean));
            stats.regime_std.push_back(std::move(sd));
        }
    }
    in >> tag;
    if (!in || tag != "end") throw ParseError(path + ": truncated norm-stats file");
    return stats;
}

std::vector<WindowRef> make_windows(const Trajectory& traj, int window_len, double rul_cap) {
    std::vector<WindowRef> out;
    const std::size_t len = traj.length();
    if (len < static_cast<std::size_t>(window_len)) return out;
    out.reserve(len - static_cast<std::size_t>(window_len) + 1);
    for (std::size_t end = static_cast<std::size_t>(window_len) - 1; end < len; ++end) {
        const double to_failure = static_cast<double>(len - 1 - end);
        out.push_back(WindowRef{&traj, end, std::min(to_failure, rul_cap)});
    }
    return out;
}

WindowRef make_eval_window(const Trajectory& traj, int /*window_len*/, double rul_cap,
                           double true_rul) {
    if (traj.length() == 0) throw ContractError("make_eval_window: empty trajectory");
    return WindowRef{&traj, traj.length() - 1, std::min(true_rul, rul_cap)};
}

WindowBatch materialize(const std::vector<WindowRef>& windows,
                        const std::vector<std::size_t>& order, int window_len) {
    if (order.empty()) throw ContractError("materialize: empty batch");
    const std::size_t n = order.size();
    const std::size_t l = static_cast<std::size_t>(window_len);
    const std::size_t d = windows[order[0]].traj->sensors[0].size();

    WindowBatch batch;
    batch.x = Tensor({n, l, d});
    batch.rul = Tensor({n});
    batch.unit_ids.resize(n);
    batch.end_cycles.resize(n);
    double* xd = batch.x.data();
    for (std::size_t wi = 0; wi < n; ++wi) {
        const WindowRef& w = windows[order[wi]];
        const auto& rows = w.traj->sensors;
        for (std::size_t p = 0; p < l; ++p) {
            // Short test units are left-padded by repeating the first cycle.
            const std::ptrdiff_t src =
                static_cast<std::ptrdiff_t>(w.end) - static_cast<std::ptrdiff_t>(l - 1 - p);
            const auto& row = rows[src < 0 ? 0 : static_cast<std::size_t>(src)];
            if (row.size() != d) {
                throw ShapeError("materialize: inconsistent feature width across windows");
            }
            std::copy(row.begin(), row.end(), xd + (wi * l + p) * d);
        }
        batch.rul.vec()[wi] = w.rul;
        batch.unit_ids[wi] = w.traj->unit_id;
        batch.end_cycles[wi] = static_cast<int>(w.end) + 1;
    }
    return batch;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    bool shuffle, std::uint64_t seed) {
    if (batch_size < 1) throw ConfigError("epoch_batches: batch_size must be >= 1");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    if (shuffle) {
        std::mt19937_64 rng(seed);
        std::shuffle(order.begin(), order.end(), rng);
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t at = 0; at < n; at += batch_size) {
        const std::size_t stop = std::min(n, at + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                             order.begin() + static_cast<std::ptrdiff_t>(stop));
    }
    return batches;
}

std::vector<Trajectory> synth_degradation(std::uint64_t seed, int n_units, int n_features,
                                          double noise_amp) {
    if (n_units < 1) throw ConfigError("synth_degradation: n_units must be >= 1");
    if (n_features < 1) throw ConfigError("synth_degradation: n_features must be >= 1");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> len_dist(60, 200);
    std::uniform_real_distribution<double> amp(0.5, 2.0);
    std::uniform_real_distribution<double> expo(1.0, 2.5);
    std::uniform_real_distribution<double> period(8.0, 40.0);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
    std::uniform_real_distribution<double> pamp(0.1, 0.5);
    std::uniform_real_distribution<double> offset(-1.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    std::normal_distribution<double> noise(0.0, 1.0);

    std::vector<Trajectory> out;
    out.reserve(static_cast<std::size_t>(n_units));
    for (int u = 1; u <= n_units; ++u) {
        Trajectory t;
        t.unit_id = u;
        t.subset = "SYNTH";
        const int len = len_dist(rng);
        struct Feat {
            double sign, a, p, per, ph, pa, off;
        };
        std::vector<Feat> feats(static_cast<std::size_t>(n_features));
        for (auto& f : feats) {
            f = Feat{coin(rng) ? 1.0 : -1.0, amp(rng), expo(rng),
                     period(rng),            phase(rng), pamp(rng), offset(rng)};
        }
        for (int cyc = 1; cyc <= len; ++cyc) {
            const double frac = static_cast<double>(cyc) / len;
            std::vector<double> row(static_cast<std::size_t>(n_features));
            for (std::size_t i = 0; i < row.size(); ++i) {
                const Feat& f = feats[i];
                double v = f.off + f.sign * f.a * std::pow(frac, f.p) +
                           f.pa * std::sin(2.0 * M_PI * cyc / f.per + f.ph);
                if (noise_amp != 0.0) v += noise_amp * noise(rng);
                row[i] = v;
            }
            t.settings.push_back({0.0, 0.0, 0.0});
            t.sensors.push_back(std::move(row));
        }
        out.push_back(std::move(t));
    }
    return out;
}

CmapssData synth_split(std::vector<Trajectory> trajs, double test_frac, std::uint64_t seed) {
    if (test_frac < 0.0 || test_frac >= 1.0) {
        throw ConfigError("synth_split: test_frac must be in [0,1)");
    }
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(trajs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n_test =
        trajs.size() > 1 ? static_cast<std::size_t>(std::lround(test_frac * trajs.size())) : 0;

    CmapssData data;
    for (std::size_t i = 0; i < order.size(); ++i) {
        Trajectory& t = trajs[order[i]];
        if (i < n_test) {
            const int len = static_cast<int>(t.length());
            std::uniform_int_distribution<int> cut_dist(std::max(10, len / 4),
                                                        std::max(11, len - 5));
            const int cut = std::min(cut_dist(rng), len - 1);
            data.test_rul.push_back(static_cast<double>(len - cut));
            t.settings.resize(static_cast<std::size_t>(cut));
            t.sensors.resize(static_cast<std::size_t>(cut));
            data.test.push_back(std::move(t));
        } else {
            data.train.push_back(std::move(t));
        }
    }
    return data;
}

}  // namespace msformer
