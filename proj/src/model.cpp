#include "msformer/model.hpp"

#include <cmath>
#include <set>

namespace msformer {

std::string to_string(MixerKind k) { return k == MixerKind::LA ? "LA" : "RPE"; }

std::string to_string(RpeMode m) {
    switch (m) {
        case RpeMode::Literal: return "literal";
        case RpeMode::Continuous: return "continuous";
        case RpeMode::Off: return "off";
    }
    return "literal";
}

MixerKind mixer_kind_from_string(const std::string& s) {
    if (s == "LA" || s == "la") return MixerKind::LA;
    if (s == "RPE" || s == "rpe") return MixerKind::RPE;
    throw ConfigError("unknown mixer kind '" + s + "' (expected LA or RPE)");
}

RpeMode rpe_mode_from_string(const std::string& s) {
    if (s == "literal") return RpeMode::Literal;
    if (s == "continuous") return RpeMode::Continuous;
    if (s == "off") return RpeMode::Off;
    throw ConfigError("unknown rpe_mode '" + s + "' (expected literal, continuous or off)");
}

void ModelConfig::validate() const {
    if (window_len < 1) throw ConfigError("model: window_len must be >= 1");
    if (input_dim < 1) throw ConfigError("model: input_dim must be >= 1 (is the dataset wired?)");
    if (embed_dim < 1) throw ConfigError("model: embed_dim must be >= 1");
    if (heads < 1) throw ConfigError("model: heads must be >= 1");
    if (embed_dim % heads != 0) {
        throw ConfigError("model: embed_dim " + std::to_string(embed_dim) +
                          " not divisible by heads " + std::to_string(heads));
    }
    for (std::size_t s = 0; s < lambda_schedule.size(); ++s) {
        const int l = lambda_schedule[s];
        if (l < 1 || window_len % l != 0) {
            throw ConfigError("model: lambda " + std::to_string(l) + " at stage " +
                              std::to_string(s + 1) + " does not divide window_len " +
                              std::to_string(window_len));
        }
        if (stage_layout[s].blocks < 1) {
            throw ConfigError("model: stage " + std::to_string(s + 1) +
                              " must have at least one block");
        }
    }
    if (lambda_schedule.back() != 1) {
        throw ConfigError("model: final stage lambda must be 1 (original resolution restored)");
    }
    if (mlp_ratio <= 0.0) throw ConfigError("model: mlp_ratio must be positive");
    if (pool_kernel < 1 || pool_kernel % 2 == 0) {
        throw ConfigError("model: pool_kernel must be odd and >= 1, got " +
                          std::to_string(pool_kernel));
    }
    if (c1 < 1 || c1 >= c2 || c2 > log_range) {
        throw ConfigError("model: need 1 <= c1 < c2 <= log_range, got c1=" + std::to_string(c1) +
                          " c2=" + std::to_string(c2) + " log_range=" + std::to_string(log_range));
    }
    if (rul_cap <= 0.0) throw ConfigError("model: rul_cap must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must be in [0,1)");
}

int relpos_index(int i, int j, int lambda, int c1, int c2, int log_range, RpeMode mode) {
    if (mode == RpeMode::Off) return c2;
    const long a = static_cast<long>(i - j) * lambda;
    const long aa = std::labs(a);
    // literal: branch switches at c2 as the piecewise definition reads;
    // continuous: log branch runs to log_range so the map has no jump.
    const long knee = mode == RpeMode::Literal ? c2 : log_range;
    double p;
    if (aa < c1) {
        p = static_cast<double>(aa);
    } else if (aa < knee) {
        p = c1 + c1 * std::log(static_cast<double>(aa) / c1) /
                     std::log(static_cast<double>(log_range) / c1);
    } else {
        p = c2;
    }
    long idx = std::llround(p);
    if (idx > c2) idx = c2;
    return static_cast<int>(a >= 0 ? idx + c2 : idx);
}

std::vector<std::int64_t> relpos_bucket_map(int window, int lambda, int c1, int c2, int log_range,
                                            RpeMode mode) {
    std::vector<std::int64_t> map(static_cast<std::size_t>(window) * window);
    for (int i = 0; i < window; ++i) {
        for (int j = 0; j < window; ++j) {
            map[static_cast<std::size_t>(i) * window + j] =
                relpos_index(i, j, lambda, c1, c2, log_range, mode);
        }
    }
    return map;
}

Tensor relpos_bias(const Parameter& table, const std::vector<std::int64_t>& buckets, int window) {
    const auto& sh = table.value.shape();
    if (sh.size() != 2) {
        throw ShapeError("relpos_bias: table must be [heads, buckets], got " + shape_str(sh));
    }
    if (buckets.size() != static_cast<std::size_t>(window) * window) {
        throw ContractError("relpos_bias: bucket map size does not match window " +
                            std::to_string(window));
    }
    Tensor flat = gather(table.value, 1, buckets);  // [h, W*W]
    return reshape(flat, {sh[0], static_cast<std::size_t>(window), static_cast<std::size_t>(window)});
}

StageIO ms_sample(const Tensor& x, int lambda) {
    const auto& sh = x.shape();
    if (sh.size() != 3) {
        throw ShapeError("ms_sample: expected [N,L,C] input, got " + shape_str(sh));
    }
    const std::size_t n = sh[0], len = sh[1], c = sh[2];
    if (lambda < 1 || len % static_cast<std::size_t>(lambda) != 0) {
        throw ConfigError("ms_sample: lambda " + std::to_string(lambda) +
                          " does not divide sequence length " + std::to_string(len));
    }
    if (lambda == 1) return StageIO{x, n, 1};
    const std::size_t lam = static_cast<std::size_t>(lambda);
    const std::size_t w = len / lam;

    // Sub-sequence i keeps original positions k*lambda + i in order.
    std::vector<std::int64_t> idx(len);
    for (std::size_t i = 0; i < lam; ++i) {
        for (std::size_t k = 0; k < w; ++k) {
            idx[i * w + k] = static_cast<std::int64_t>(k * lam + i);
        }
    }
    Tensor g = gather(x, 1, idx);                       // [N, L, C] regrouped
    g = reshape(g, {n, lam, w, c});
    g = transpose(g, {1, 0, 2, 3});                     // [lambda, N, W, C]
    g = reshape(g, {lam * n, w, c});
    return StageIO{g, n, lambda};
}

Tensor window_reverse(const StageIO& s) {
    const auto& sh = s.tokens.shape();
    if (sh.size() != 3) {
        throw ShapeError("window_reverse: expected [N',W,C] input, got " + shape_str(sh));
    }
    const std::size_t lam = static_cast<std::size_t>(s.lambda);
    if (s.lambda < 1 || sh[0] != lam * s.batch) {
        throw ContractError("window_reverse: token batch " + std::to_string(sh[0]) +
                            " inconsistent with meta (N=" + std::to_string(s.batch) +
                            ", lambda=" + std::to_string(s.lambda) + ")");
    }
    if (s.lambda == 1) return s.tokens;
    const std::size_t n = s.batch, w = sh[1], c = sh[2];
    const std::size_t len = lam * w;

    Tensor g = reshape(s.tokens, {lam, n, w, c});
    g = transpose(g, {1, 0, 2, 3});                     // [N, lambda, W, C]
    g = reshape(g, {n, len, c});
    // Position k*lambda + i comes back from sub-sequence i slot k.
    std::vector<std::int64_t> inv(len);
    for (std::size_t i = 0; i < lam; ++i) {
        for (std::size_t k = 0; k < w; ++k) {
            inv[k * lam + i] = static_cast<std::int64_t>(i * w + k);
        }
    }
    return gather(g, 1, inv);
}

Tensor AttentionLayer::operator()(const Tensor& x, const std::vector<std::int64_t>& buckets,
                                  int window) const {
    const auto& sh = x.shape();
    const std::size_t b = sh[0], w = sh[1], c = sh[2];
    const std::size_t h = static_cast<std::size_t>(heads);
    const std::size_t d = c / h;

    auto split_heads = [&](Tensor t) {
        return transpose(reshape(std::move(t), {b, w, h, d}), {0, 2, 1, 3});  // [B,h,W,d]
    };
    Tensor q = split_heads(wq(x));
    Tensor k = split_heads(wk(x));
    Tensor v = split_heads(wv(x));

    Tensor logits = scale(matmul(q, transpose(k, {0, 1, 3, 2})), 1.0 / std::sqrt(double(d)));
    if (bias_table) {
        logits = add(logits, relpos_bias(*bias_table, buckets, window));  // [h,W,W] broadcast
    }
    Tensor alpha = softmax(logits, -1);
    Tensor z = matmul(alpha, v);                                  // [B,h,W,d]
    z = reshape(transpose(z, {0, 2, 1, 3}), {b, w, c});
    return wo(z);
}

Tensor Block::forward(const Tensor& x, const std::vector<std::int64_t>& buckets, int window,
                      const TensorFn& drop) const {
    auto d = [&](Tensor t) { return drop ? drop(t) : std::move(t); };
    Tensor mixed = kind == MixerKind::RPE ? (*attn)(norm1(x), buckets, window)
                                          : avg_pool1d(norm1(x), pool_kernel);
    Tensor hidden = add(x, d(std::move(mixed)));
    Tensor m = fc2(gelu(fc1(norm2(hidden))));
    return add(hidden, d(std::move(m)));
}

namespace {

struct ParamBuilder {
    std::vector<Parameter>& out;
    std::mt19937_64& rng;
    std::set<std::string> names;

    Parameter reg(const std::string& name, Tensor t) {
        if (!names.insert(name).second) {
            throw ContractError("duplicate parameter name '" + name + "'");
        }
        Parameter p(name, std::move(t));
        out.push_back(p);
        return p;
    }
    Parameter xavier(const std::string& name, std::size_t fan_in, std::size_t fan_out) {
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-limit, limit);
        Tensor t({fan_in, fan_out});
        for (auto& v : t.vec()) v = dist(rng);
        return reg(name, std::move(t));
    }
    Parameter constant(const std::string& name, std::vector<std::size_t> shape, double v) {
        return reg(name, Tensor(std::move(shape), v));
    }
};

Linear make_linear(ParamBuilder& b, const std::string& prefix, std::size_t in, std::size_t out) {
    return Linear{b.xavier(prefix + ".w", in, out), b.constant(prefix + ".b", {out}, 0.0)};
}

LayerNormLayer make_norm(ParamBuilder& b, const std::string& prefix, std::size_t c) {
    return LayerNormLayer{b.constant(prefix + ".gamma", {c}, 1.0),
                          b.constant(prefix + ".beta", {c}, 0.0)};
}

}  // namespace

MsFormer::MsFormer(ModelConfig cfg, std::uint64_t seed)
    : cfg_(cfg), dropout_rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    ParamBuilder b{params_, rng, {}};

    const auto c = static_cast<std::size_t>(cfg_.embed_dim);
    const auto hidden = static_cast<std::size_t>(std::ceil(cfg_.mlp_ratio * cfg_.embed_dim));
    embed_ = make_linear(b, "embed", static_cast<std::size_t>(cfg_.input_dim), c);

    for (int s = 0; s < 4; ++s) {
        Stage stage;
        stage.lambda = cfg_.lambda_schedule[static_cast<std::size_t>(s)];
        stage.window = cfg_.window_len / stage.lambda;
        const StageSpec& spec = cfg_.stage_layout[static_cast<std::size_t>(s)];
        if (spec.mixer == MixerKind::RPE && cfg_.rpe_mode != RpeMode::Off) {
            stage.buckets = relpos_bucket_map(stage.window, stage.lambda, cfg_.c1, cfg_.c2,
                                              cfg_.log_range, cfg_.rpe_mode);
        }
        const std::string sp = "stage" + std::to_string(s + 1);
        for (int bi = 0; bi < spec.blocks; ++bi) {
            const std::string bp = sp + ".block" + std::to_string(bi);
            Block block;
            block.kind = spec.mixer;
            block.pool_kernel = cfg_.pool_kernel;
            block.norm1 = make_norm(b, bp + ".norm1", c);
            if (spec.mixer == MixerKind::RPE) {
                AttentionLayer attn;
                attn.heads = cfg_.heads;
                attn.wq = make_linear(b, bp + ".attn.wq", c, c);
                attn.wk = make_linear(b, bp + ".attn.wk", c, c);
                attn.wv = make_linear(b, bp + ".attn.wv", c, c);
                attn.wo = make_linear(b, bp + ".attn.wo", c, c);
                if (cfg_.rpe_mode != RpeMode::Off) {
                    attn.bias_table = b.constant(
                        bp + ".attn.bias_table",
                        {static_cast<std::size_t>(cfg_.heads),
                         static_cast<std::size_t>(2 * cfg_.c2 + 1)},
                        0.0);
                }
                block.attn = std::move(attn);
            }
            block.norm2 = make_norm(b, bp + ".norm2", c);
            block.fc1 = make_linear(b, bp + ".mlp.fc1", c, hidden);
            block.fc2 = make_linear(b, bp + ".mlp.fc2", hidden, c);
            stage.blocks.push_back(std::move(block));
        }
        stages_.push_back(std::move(stage));
    }

    head_norm_ = make_norm(b, "head.norm", c);
    head_ = make_linear(b, "head.fc", c, 1);
}

Tensor MsFormer::maybe_dropout(const Tensor& x) {
    const double p = cfg_.dropout;
    std::bernoulli_distribution keep(1.0 - p);
    const double s = 1.0 / (1.0 - p);
    Tensor mask(x.shape());
    for (auto& v : mask.vec()) v = keep(dropout_rng_) ? s : 0.0;
    return mul(x, mask);
}

Tensor MsFormer::forward(const Tensor& x) {
    const auto& sh = x.shape();
    if (sh.size() != 3 || sh[1] != static_cast<std::size_t>(cfg_.window_len) ||
        sh[2] != static_cast<std::size_t>(cfg_.input_dim)) {
        throw ConfigError("forward: input " + shape_str(sh) + " does not match configured [N," +
                          std::to_string(cfg_.window_len) + "," + std::to_string(cfg_.input_dim) +
                          "]");
    }
    TensorFn drop;
    if (training_ && cfg_.dropout > 0.0) {
        drop = [this](const Tensor& t) { return maybe_dropout(t); };
    }

    Tensor tokens = embed_(x);
    for (const Stage& stage : stages_) {
        StageIO io = ms_sample(tokens, stage.lambda);
        for (const Block& block : stage.blocks) {
            io.tokens = block.forward(io.tokens, stage.buckets, stage.window, drop);
        }
        tokens = window_reverse(io);
    }
    Tensor pooled = mean(head_norm_(tokens), 1);  // [N, C]
    Tensor out = head_(pooled);                   // [N, 1]
    return reshape(out, {sh[0]});
}

}  // namespace msformer
