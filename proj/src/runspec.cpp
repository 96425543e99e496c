#include "msformer/runspec.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace msformer {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

int parse_int(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const int r = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
}

std::uint64_t parse_u64(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const unsigned long long r = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
    }
}

double parse_double(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const double r = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

std::vector<std::string> split(const std::string& v, char sep) {
    std::vector<std::string> parts;
    std::istringstream ss(v);
    std::string part;
    while (std::getline(ss, part, sep)) parts.push_back(trim(part));
    return parts;
}

std::array<int, 4> parse_lambda_schedule(const std::string& v, const std::string& key) {
    const auto parts = split(v, ',');
    if (parts.size() != 4) {
        throw ConfigError(key + ": expected 4 comma-separated factors, got '" + v + "'");
    }
    std::array<int, 4> out{};
    for (std::size_t i = 0; i < 4; ++i) out[i] = parse_int(parts[i], key);
    return out;
}

std::array<StageSpec, 4> parse_stage_layout(const std::string& v, const std::string& key) {
    const auto parts = split(v, ',');
    if (parts.size() != 4) {
        throw ConfigError(key + ": expected 4 comma-separated stages, got '" + v + "'");
    }
    std::array<StageSpec, 4> out{};
    for (std::size_t i = 0; i < 4; ++i) {
        std::string kind = parts[i];
        int count = 1;
        const auto colon = kind.find(':');
        if (colon != std::string::npos) {
            count = parse_int(kind.substr(colon + 1), key);
            kind = kind.substr(0, colon);
        }
        out[i] = StageSpec{mixer_kind_from_string(kind), count};
    }
    return out;
}

std::string render_lambda_schedule(const std::array<int, 4>& s) {
    std::ostringstream os;
    for (std::size_t i = 0; i < 4; ++i) {
        if (i) os << ',';
        os << s[i];
    }
    return os.str();
}

std::string render_stage_layout(const std::array<StageSpec, 4>& s) {
    std::ostringstream os;
    for (std::size_t i = 0; i < 4; ++i) {
        if (i) os << ',';
        os << to_string(s[i].mixer);
        if (s[i].blocks != 1) os << ':' << s[i].blocks;
    }
    return os.str();
}

}  // namespace

void RunSpec::apply_override(const std::string& key, const std::string& value) {
    const std::string v = trim(value);
    if (key == "data.kind") {
        if (v != "cmapss" && v != "csv" && v != "synthetic") {
            throw ConfigError("data.kind: expected cmapss, csv or synthetic, got '" + v + "'");
        }
        data.kind = v;
    } else if (key == "data.path") {
        data.path = v;
    } else if (key == "data.subset") {
        data.subset = v;
    } else if (key == "data.rul_cap") {
        data.rul_cap = parse_double(v, key);
    } else if (key == "data.condition_norm") {
        data.condition_norm = parse_bool(v, key);
    } else if (key == "data.test_path") {
        data.test_path = v;
    } else if (key == "data.test_rul_path") {
        data.test_rul_path = v;
    } else if (key == "data.synth_units") {
        data.synth_units = parse_int(v, key);
    } else if (key == "data.synth_features") {
        data.synth_features = parse_int(v, key);
    } else if (key == "data.synth_noise") {
        data.synth_noise = parse_double(v, key);
    } else if (key == "data.synth_seed") {
        data.synth_seed = parse_u64(v, key);
    } else if (key == "data.synth_test_frac") {
        data.synth_test_frac = parse_double(v, key);
    } else if (key == "model.window_len") {
        model.window_len = parse_int(v, key);
    } else if (key == "model.input_dim") {
        model.input_dim = parse_int(v, key);
    } else if (key == "model.embed_dim") {
        model.embed_dim = parse_int(v, key);
    } else if (key == "model.heads") {
        model.heads = parse_int(v, key);
    } else if (key == "model.lambda_schedule") {
        model.lambda_schedule = parse_lambda_schedule(v, key);
    } else if (key == "model.stage_layout") {
        model.stage_layout = parse_stage_layout(v, key);
    } else if (key == "model.mlp_ratio") {
        model.mlp_ratio = parse_double(v, key);
    } else if (key == "model.pool_kernel") {
        model.pool_kernel = parse_int(v, key);
    } else if (key == "model.c1") {
        model.c1 = parse_int(v, key);
    } else if (key == "model.c2") {
        model.c2 = parse_int(v, key);
    } else if (key == "model.log_range") {
        model.log_range = parse_int(v, key);
    } else if (key == "model.rpe_mode") {
        model.rpe_mode = rpe_mode_from_string(v);
    } else if (key == "model.dropout") {
        model.dropout = parse_double(v, key);
    } else if (key == "train.epochs") {
        train.epochs = parse_int(v, key);
    } else if (key == "train.batch_size") {
        train.batch_size = parse_int(v, key);
    } else if (key == "train.lr") {
        train.lr = parse_double(v, key);
    } else if (key == "train.seed") {
        train.seed = parse_u64(v, key);
    } else if (key == "train.eval_every") {
        train.eval_every = parse_int(v, key);
    } else if (key == "train.keep_best") {
        train.keep_best = parse_bool(v, key);
    } else if (key == "output.dir") {
        out_dir = v;
    } else {
        throw ConfigError("unknown config key '" + key + "'");
    }
}

RunSpec RunSpec::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("run spec: cannot open " + path);
    RunSpec spec;
    spec.model.c2 = 0;  // 0 = derive 2*c1 unless the file pins it
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path + ":" + std::to_string(lineno) +
                              ": expected 'key = value', got '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            spec.apply_override(key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return spec;
}

void RunSpec::resolve() {
    if (model.c2 == 0) model.c2 = 2 * model.c1;
    if (data.rul_cap <= 0.0) throw ConfigError("data.rul_cap must be positive");
    model.rul_cap = data.rul_cap;
    if (data.kind == "cmapss" || data.kind == "csv") {
        if (data.path.empty()) throw ConfigError("data.path is required for data.kind = " +
                                                 data.kind);
    }
    if (data.kind == "synthetic") {
        if (data.synth_units < 2) throw ConfigError("data.synth_units must be >= 2");
        if (data.synth_features < 1) throw ConfigError("data.synth_features must be >= 1");
        if (data.synth_test_frac < 0.0 || data.synth_test_frac >= 1.0) {
            throw ConfigError("data.synth_test_frac must be in [0,1)");
        }
    }
    train.validate();
    ModelConfig probe = model;
    if (probe.input_dim == 0) probe.input_dim = 1;  // resolved from the dataset later
    probe.validate();
}

std::string RunSpec::resolved_text() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "data.kind = " << data.kind << "\n";
    os << "data.path = " << data.path << "\n";
    os << "data.subset = " << data.subset << "\n";
    os << "data.rul_cap = " << data.rul_cap << "\n";
    os << "data.condition_norm = " << (data.condition_norm ? "true" : "false") << "\n";
    os << "data.test_path = " << data.test_path << "\n";
    os << "data.test_rul_path = " << data.test_rul_path << "\n";
    os << "data.synth_units = " << data.synth_units << "\n";
    os << "data.synth_features = " << data.synth_features << "\n";
    os << "data.synth_noise = " << data.synth_noise << "\n";
    os << "data.synth_seed = " << data.synth_seed << "\n";
    os << "data.synth_test_frac = " << data.synth_test_frac << "\n";
    os << "model.window_len = " << model.window_len << "\n";
    os << "model.input_dim = " << model.input_dim << "\n";
    os << "model.embed_dim = " << model.embed_dim << "\n";
    os << "model.heads = " << model.heads << "\n";
    os << "model.lambda_schedule = " << render_lambda_schedule(model.lambda_schedule) << "\n";
    os << "model.stage_layout = " << render_stage_layout(model.stage_layout) << "\n";
    os << "model.mlp_ratio = " << model.mlp_ratio << "\n";
    os << "model.pool_kernel = " << model.pool_kernel << "\n";
    os << "model.c1 = " << model.c1 << "\n";
    os << "model.c2 = " << model.c2 << "\n";
    os << "model.log_range = " << model.log_range << "\n";
    os << "model.rpe_mode = " << to_string(model.rpe_mode) << "\n";
    os << "model.dropout = " << model.dropout << "\n";
    os << "train.epochs = " << train.epochs << "\n";
    os << "train.batch_size = " << train.batch_size << "\n";
    os << "train.lr = " << train.lr << "\n";
    os << "train.seed = " << train.seed << "\n";
    os << "train.eval_every = " << train.eval_every << "\n";
    os << "train.keep_best = " << (train.keep_best ? "true" : "false") << "\n";
    os << "output.dir = " << out_dir << "\n";
    return os.str();
}

std::string RunSpec::model_train_fingerprint() const {
    const std::string all = resolved_text();
    std::string relevant;
    std::istringstream is(all);
    std::string line;
    while (std::getline(is, line)) {
        if (line.rfind("model.", 0) == 0 || line.rfind("train.", 0) == 0) {
            relevant += line;
            relevant += '\n';
        }
    }
    return fingerprint(relevant);
}

namespace {

std::vector<double> read_rul_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open RUL file " + path);
    std::vector<double> out;
    double v = 0.0;
    while (in >> v) out.push_back(v);
    if (out.empty()) throw ParseError(path + ": no RUL values");
    return out;
}

CmapssData load_raw(const DataConfig& cfg) {
    if (cfg.kind == "cmapss") {
        return load_cmapss(cfg.path, cfg.subset);
    }
    if (cfg.kind == "csv") {
        CmapssData data;
        data.train = load_csv(cfg.path);
        if (!cfg.test_path.empty()) {
            data.test = load_csv(cfg.test_path);
            if (cfg.test_rul_path.empty()) {
                throw ConfigError("data.test_rul_path is required when data.test_path is set");
            }
            data.test_rul = read_rul_file(cfg.test_rul_path);
            if (data.test_rul.size() != data.test.size()) {
                throw ParseError(cfg.test_rul_path + ": " + std::to_string(data.test_rul.size()) +
                                 " values for " + std::to_string(data.test.size()) +
                                 " test units");
            }
        }
        return data;
    }
    if (cfg.kind == "synthetic") {
        auto trajs = synth_degradation(cfg.synth_seed, cfg.synth_units, cfg.synth_features,
                                       cfg.synth_noise);
        return synth_split(std::move(trajs), cfg.synth_test_frac, cfg.synth_seed + 1);
    }
    throw ConfigError("unknown data.kind '" + cfg.kind + "'");
}

DatasetSplits window_splits(CmapssData normalized, const DataConfig& cfg, int window_len,
                            std::size_t input_dim) {
    DatasetSplits splits;
    splits.train_store =
        std::make_shared<std::vector<Trajectory>>(std::move(normalized.train));
    splits.test_store = std::make_shared<std::vector<Trajectory>>(std::move(normalized.test));
    splits.input_dim = static_cast<int>(input_dim);
    splits.rul_cap = cfg.rul_cap;
    for (const auto& t : *splits.train_store) {
        const auto w = make_windows(t, window_len, cfg.rul_cap);
        splits.train_windows.insert(splits.train_windows.end(), w.begin(), w.end());
    }
    for (std::size_t i = 0; i < splits.test_store->size(); ++i) {
        splits.eval_windows.push_back(make_eval_window((*splits.test_store)[i], window_len,
                                                       cfg.rul_cap, normalized.test_rul[i]));
    }
    if (splits.train_windows.empty() && !splits.train_store->empty()) {
        throw ConfigError("dataset: no unit is long enough for window_len " +
                          std::to_string(window_len));
    }
    return splits;
}

}  // namespace

PreparedData prepare_dataset(const DataConfig& cfg, int window_len) {
    CmapssData raw = load_raw(cfg);
    const auto mask = select_features(raw.train);
    PreparedData out;
    out.stats = fit_norm_stats(raw.train, mask, cfg.condition_norm);
    CmapssData normalized;
    normalized.train = normalize(raw.train, out.stats);
    normalized.test = normalize(raw.test, out.stats);
    normalized.test_rul = raw.test_rul;
    out.splits = window_splits(std::move(normalized), cfg, window_len, out.stats.retained());
    return out;
}

DatasetSplits prepare_eval_dataset(const DataConfig& cfg, const NormStats& stats,
                                   int window_len) {
    CmapssData raw = load_raw(cfg);
    CmapssData normalized;
    normalized.train = normalize(raw.train, stats);
    normalized.test = normalize(raw.test, stats);
    normalized.test_rul = raw.test_rul;
    return window_splits(std::move(normalized), cfg, window_len, stats.retained());
}

}  // namespace msformer
