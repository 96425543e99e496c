#pragma once

// The MsFormer network: per-timestep embedding, four stages of
// sample -> token-mixer blocks -> reverse, and a pooled regression head.
// Stages restructure the window into interleaved sub-sequences stacked on
// the batch axis; attention stages add a learned relative-position bias
// whose bucket index scales offsets by the stage's down-sampling factor.

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "msformer/ops.hpp"
#include "msformer/optim.hpp"

namespace msformer {

enum class MixerKind { LA, RPE };
enum class RpeMode { Literal, Continuous, Off };

std::string to_string(MixerKind k);
std::string to_string(RpeMode m);
MixerKind mixer_kind_from_string(const std::string& s);
RpeMode rpe_mode_from_string(const std::string& s);

struct StageSpec {
    MixerKind mixer = MixerKind::LA;
    int blocks = 1;
};

struct ModelConfig {
    int window_len = 28;
    int input_dim = 0;  // 0 = resolved from the dataset
    int embed_dim = 128;
    int heads = 4;
    std::array<int, 4> lambda_schedule{4, 4, 2, 1};
    std::array<StageSpec, 4> stage_layout{
        StageSpec{MixerKind::LA, 1}, StageSpec{MixerKind::LA, 1},
        StageSpec{MixerKind::RPE, 2}, StageSpec{MixerKind::RPE, 1}};
    double mlp_ratio = 2.0;
    int pool_kernel = 3;
    int c1 = 8;
    int c2 = 16;
    int log_range = 128;
    RpeMode rpe_mode = RpeMode::Literal;
    double rul_cap = 125.0;
    double dropout = 0.0;

    int head_dim() const { return embed_dim / heads; }
    void validate() const;  // throws ConfigError describing the first violation
};

// Bucket for the scaled offset a = (i - j) * lambda: identity near zero,
// logarithmic in the midrange, clipped far out, then shifted by c2 for
// nonnegative offsets. `literal` switches branches at |a| = c2 exactly as
// the piecewise definition reads; `continuous` keeps the log branch up to
// log_range so the map stays continuous.
int relpos_index(int i, int j, int lambda, int c1, int c2, int log_range, RpeMode mode);

// Precomputed bucket map for a W x W attention window (row-major i*W+j).
std::vector<std::int64_t> relpos_bucket_map(int window, int lambda, int c1, int c2, int log_range,
                                            RpeMode mode);

// Bias tensor [h, W, W] gathered from a [h, 2*c2+1] table; gradients scatter
// back into the shared buckets.
Tensor relpos_bias(const Parameter& table, const std::vector<std::int64_t>& buckets, int window);

// Multi-scale sampling: [N,L,C] -> lambda interleaved sub-sequences of
// length W = L/lambda stacked along the batch axis, plus the metadata
// needed to invert it.
struct StageIO {
    Tensor tokens;       // [lambda*N, W, C]
    std::size_t batch;   // original N
    int lambda;
};

StageIO ms_sample(const Tensor& x, int lambda);
Tensor window_reverse(const StageIO& s);

struct Linear {
    Parameter weight;  // [in, out]
    Parameter bias;    // [out]
    Tensor operator()(const Tensor& x) const { return add(matmul(x, weight.value), bias.value); }
};

struct LayerNormLayer {
    Parameter gamma, beta;
    double eps = 1e-5;
    Tensor operator()(const Tensor& x) const {
        return layer_norm(x, gamma.value, beta.value, eps);
    }
};

struct AttentionLayer {
    Linear wq, wk, wv, wo;
    std::optional<Parameter> bias_table;  // [h, 2*c2+1]; absent when rpe is off
    int heads = 1;

    Tensor operator()(const Tensor& x, const std::vector<std::int64_t>& buckets,
                      int window) const;
};

using TensorFn = std::function<Tensor(const Tensor&)>;

struct Block {
    MixerKind kind = MixerKind::LA;
    LayerNormLayer norm1, norm2;
    std::optional<AttentionLayer> attn;
    int pool_kernel = 3;
    Linear fc1, fc2;

    Tensor forward(const Tensor& x, const std::vector<std::int64_t>& buckets, int window,
                   const TensorFn& drop = {}) const;
};

class MsFormer {
  public:
    MsFormer(ModelConfig cfg, std::uint64_t seed);

    // [N, L, D_in] -> [N] regression output in scaled target units.
    Tensor forward(const Tensor& x);

    std::vector<Parameter>& parameters() { return params_; }
    const std::vector<Parameter>& parameters() const { return params_; }
    const ModelConfig& config() const { return cfg_; }
    std::int64_t param_count() const { return param_element_count(params_); }

    void set_training(bool on) { training_ = on; }
    bool training() const { return training_; }

  private:
    struct Stage {
        int lambda = 1;
        int window = 0;
        std::vector<std::int64_t> buckets;
        std::vector<Block> blocks;
    };

    Tensor maybe_dropout(const Tensor& x);

    ModelConfig cfg_;
    Linear embed_;
    std::vector<Stage> stages_;
    LayerNormLayer head_norm_;
    Linear head_;
    std::vector<Parameter> params_;
    bool training_ = false;
    std::mt19937_64 dropout_rng_;
};

}  // namespace msformer
