#include "msformer/selfcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <sstream>

#include "msformer/harness.hpp"
#include "msformer/metrics.hpp"
#include "msformer/model.hpp"

namespace msformer {

namespace {

Tensor rand_tensor(std::mt19937_64& rng, std::vector<std::size_t> shape, double lo = -1.0,
                   double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor t(std::move(shape));
    for (auto& v : t.vec()) v = dist(rng);
    return t;
}

std::string fmt(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

}  // namespace

double max_grad_rel_error(const std::function<Tensor()>& loss, std::vector<Parameter>& params,
                          double h) {
    zero_grads(params);
    Tensor l = loss();
    l.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) analytic.push_back(p.value.grad());
    zero_grads(params);

    double worst = 0.0;
    NoGradGuard ng;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& data = params[pi].value.vec();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            data[i] = orig + h;
            const double fp = loss().item();
            data[i] = orig - h;
            const double fm = loss().item();
            data[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[pi][i];
            const double rel =
                std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-3});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

namespace {

// One randomized finite-difference check; the loss pairs the op output with
// a fixed random weighting so every output element influences the scalar.
struct OpGradCase {
    std::string name;
    std::function<double()> run;  // returns max rel error
};

double weighted_loss_check(std::vector<Parameter>& params,
                           const std::function<Tensor()>& output, std::mt19937_64& rng) {
    Tensor probe;
    {
        NoGradGuard ng;
        probe = output();
    }
    Tensor w = rand_tensor(rng, probe.shape(), 0.2, 1.0);
    auto loss = [&]() { return sum_all(mul(output(), w)); };
    return max_grad_rel_error(loss, params);
}

std::vector<OpGradCase> op_grad_cases() {
    std::vector<OpGradCase> cases;
    auto add_case = [&](std::string name, std::function<double()> run) {
        cases.push_back(OpGradCase{std::move(name), std::move(run)});
    };

    add_case("matmul", [] {
        std::mt19937_64 rng(101);
        double worst = 0.0;
        const std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> shapes =
            {{{3, 4}, {4, 2}},
             {{2, 3, 4}, {2, 4, 3}},
             {{2, 2, 3}, {3, 5}},            // batch broadcast on rhs
             {{1, 2, 3, 4}, {5, 1, 4, 2}}};  // broadcast both sides
        for (const auto& [sa, sb] : shapes) {
            std::vector<Parameter> params{Parameter("a", rand_tensor(rng, sa)),
                                          Parameter("b", rand_tensor(rng, sb))};
            auto out = [&] { return matmul(params[0].value, params[1].value); };
            worst = std::max(worst, weighted_loss_check(params, out, rng));
        }
        return worst;
    });

    add_case("softmax", [] {
        std::mt19937_64 rng(102);
        double worst = 0.0;
        for (int axis : {0, 1, -1}) {
            std::vector<Parameter> params{Parameter("x", rand_tensor(rng, {3, 5}, -3.0, 3.0))};
            auto out = [&, axis] { return softmax(params[0].value, axis); };
            worst = std::max(worst, weighted_loss_check(params, out, rng));
        }
        return worst;
    });

    add_case("layer_norm", [] {
        std::mt19937_64 rng(103);
        std::vector<Parameter> params{Parameter("x", rand_tensor(rng, {4, 6}, -2.0, 2.0)),
                                      Parameter("gamma", rand_tensor(rng, {6}, 0.5, 1.5)),
                                      Parameter("beta", rand_tensor(rng, {6}, -0.5, 0.5))};
        auto out = [&] { return layer_norm(params[0].value, params[1].value, params[2].value); };
        return weighted_loss_check(params, out, rng);
    });

    add_case("avg_pool1d", [] {
        std::mt19937_64 rng(104);
        double worst = 0.0;
        for (int kernel : {1, 3, 5}) {
            std::vector<Parameter> params{Parameter("x", rand_tensor(rng, {2, 7, 3}))};
            auto out = [&, kernel] { return avg_pool1d(params[0].value, kernel); };
            worst = std::max(worst, weighted_loss_check(params, out, rng));
        }
        return worst;
    });

    add_case("add", [] {
        std::mt19937_64 rng(105);
        std::vector<Parameter> params{Parameter("a", rand_tensor(rng, {2, 3, 4})),
                                      Parameter("b", rand_tensor(rng, {4}))};
        auto out = [&] { return add(params[0].value, params[1].value); };
        return weighted_loss_check(params, out, rng);
    });

    add_case("sub", [] {
        std::mt19937_64 rng(106);
        std::vector<Parameter> params{Parameter("a", rand_tensor(rng, {3, 4})),
                                      Parameter("b", rand_tensor(rng, {1, 4}))};
        auto out = [&] { return sub(params[0].value, params[1].value); };
        return weighted_loss_check(params, out, rng);
    });

    add_case("mul", [] {
        std::mt19937_64 rng(107);
        std::vector<Parameter> params{Parameter("a", rand_tensor(rng, {2, 3, 4})),
                                      Parameter("b", rand_tensor(rng, {3, 1}))};
        auto out = [&] { return mul(params[0].value, params[1].value); };
        return weighted_loss_check(params, out, rng);
    });

    add_case("scale", [] {
        std::mt19937_64 rng(108);
        std::vector<Parameter> params{Parameter("x", rand_tensor(rng, {3, 4}))};
        auto out = [&] { return scale(params[0].value, -0.731); };
        return weighted_loss_check(params, out, rng);
    });

    add_case("gelu", [] {
        std::mt19937_64 rng(109);
        std::vector<Parameter> params{Parameter("x", rand_tensor(rng, {4, 5}, -3.0, 3.0))};
        auto out = [&] { return gelu(params[0].value); };
        return weighted_loss_check(params, out, rng);
    });

    add_case("reshape", [] {
        std::mt19937_64 rng(110);
        std::vector<Parameter> params{Parameter("x", rand_tensor(rng, {2, 6}))};
        auto out = [&] { return reshape(params[0].value, {3, 4}); };
        return weighted_loss_check(params, out, rng);
    });

    add_case("transpose", [] {
        std::mt19937_64 rng(111);
        std::vector<Parameter> params{Parameter("x", rand_tensor(rng, {2, 3, 4}))};
        auto out = [&] { return transpose(params[0].value, {2, 0, 1}); };
        return weighted_loss_check(params, out, rng);
    });

    add_case("concat", [] {
        std::mt19937_64 rng(112);
        std::vector<Parameter> params{Parameter("a", rand_tensor(rng, {2, 3})),
                                      Parameter("b", rand_tensor(rng, {2, 2}))};
        auto out = [&] { return concat({params[0].value, params[1].value}, 1); };
        return weighted_loss_check(params, out, rng);
    });

    add_case("gather", [] {
        std::mt19937_64 rng(113);
        std::vector<Parameter> params{Parameter("x", rand_tensor(rng, {3, 5, 2}))};
        const std::vector<std::int64_t> idx{4, 0, 2, 2};  // repeats exercise accumulation
        auto out = [&] { return gather(params[0].value, 1, idx); };
        return weighted_loss_check(params, out, rng);
    });

    add_case("mean", [] {
        std::mt19937_64 rng(114);
        std::vector<Parameter> params{Parameter("x", rand_tensor(rng, {2, 5, 3}))};
        auto out = [&] { return mean(params[0].value, 1); };
        return weighted_loss_check(params, out, rng);
    });

    add_case("sum_all", [] {
        std::mt19937_64 rng(115);
        std::vector<Parameter> params{Parameter("x", rand_tensor(rng, {3, 4}))};
        auto loss = [&] { return sum_all(params[0].value); };
        return max_grad_rel_error(loss, params);
    });

    add_case("mean_all", [] {
        std::mt19937_64 rng(116);
        std::vector<Parameter> params{Parameter("x", rand_tensor(rng, {2, 3, 2}))};
        auto loss = [&] { return mean_all(params[0].value); };
        return max_grad_rel_error(loss, params);
    });

    add_case("mse", [] {
        std::mt19937_64 rng(117);
        std::vector<Parameter> params{Parameter("pred", rand_tensor(rng, {6})),
                                      Parameter("target", rand_tensor(rng, {6}))};
        auto loss = [&] { return mse(params[0].value, params[1].value); };
        return max_grad_rel_error(loss, params);
    });

    return cases;
}

ModelConfig tiny_model_config() {
    ModelConfig cfg;
    cfg.window_len = 8;
    cfg.input_dim = 3;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.lambda_schedule = {2, 2, 2, 1};
    cfg.stage_layout = {StageSpec{MixerKind::LA, 1}, StageSpec{MixerKind::LA, 1},
                        StageSpec{MixerKind::RPE, 2}, StageSpec{MixerKind::RPE, 1}};
    cfg.mlp_ratio = 2.0;
    cfg.pool_kernel = 3;
    cfg.c1 = 2;
    cfg.c2 = 4;
    cfg.log_range = 128;
    cfg.rpe_mode = RpeMode::Literal;
    cfg.rul_cap = 125.0;
    return cfg;
}

}  // namespace

CheckResult check_gradient_fidelity() {
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& c : op_grad_cases()) {
        const double err = c.run();
        if (!(err < 1e-5)) {
            return CheckResult{"gradient fidelity", false,
                               "gradient check failed for op " + c.name + " (max rel err " +
                                   fmt(err) + ", tolerance 1e-5)"};
        }
    }

    // Whole tiny-config model: every parameter, including the shared
    // relative-bias buckets, against central differences.
    std::mt19937_64 rng(991);
    MsFormer model(tiny_model_config(), 17);
    Tensor x = rand_tensor(rng, {2, 8, 3});
    Tensor y = rand_tensor(rng, {2}, 0.0, 1.0);
    auto loss = [&] { return mse(model.forward(x), y); };
    const double err = max_grad_rel_error(loss, model.parameters(), 1e-5);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!(err < 1e-4)) {
        return CheckResult{"gradient fidelity", false,
                           "full-model gradient check failed (max rel err " + fmt(err) +
                               ", tolerance 1e-4)"};
    }
    if (secs >= 120.0) {
        return CheckResult{"gradient fidelity", false,
                           "passed numerically but took " + fmt(secs) + "s (budget 120s)"};
    }
    return CheckResult{"gradient fidelity", true,
                       "ops < 1e-5, full model rel err " + fmt(err) + ", " + fmt(secs) + "s"};
}

CheckResult check_ms_wr_roundtrip() {
    std::mt19937_64 rng(2024);
    Tensor x = rand_tensor(rng, {3, 28, 5});
    for (int lambda : {1, 2, 4, 7, 14, 28}) {
        NoGradGuard ng;
        StageIO io = ms_sample(x, lambda);
        Tensor back = window_reverse(io);
        if (back.shape() != x.shape() ||
            std::memcmp(back.data(), x.data(), x.size() * sizeof(double)) != 0) {
            return CheckResult{"ms/wr round trip", false,
                               "not bitwise identity for lambda " + std::to_string(lambda)};
        }
    }
    return CheckResult{"ms/wr round trip", true, "bitwise identity for all divisors of L=28"};
}

namespace {

// Direct long-double evaluation of the piecewise bucket definition, kept
// deliberately separate from the production integer path.
int oracle_bucket(long a, int c1, int c2, int log_range, bool literal) {
    const long double aa = a < 0 ? static_cast<long double>(-a) : static_cast<long double>(a);
    long double p;
    const long double knee = literal ? c2 : log_range;
    if (aa < c1) {
        p = aa;
    } else if (aa < knee) {
        p = c1 + c1 * std::log(aa / c1) / std::log(static_cast<long double>(log_range) / c1);
    } else {
        p = c2;
    }
    long idx = std::llround(static_cast<double>(p));
    if (idx > c2) idx = c2;
    return static_cast<int>(a >= 0 ? idx + c2 : idx);
}

}  // namespace

CheckResult check_relpos_index() {
    const int c1 = 8, c2 = 16, log_range = 128;
    for (int w : {7, 14, 28}) {
        for (int lambda : {1, 2, 4}) {
            for (RpeMode mode : {RpeMode::Literal, RpeMode::Continuous}) {
                const auto map = relpos_bucket_map(w, lambda, c1, c2, log_range, mode);
                for (int i = 0; i < w; ++i) {
                    for (int j = 0; j < w; ++j) {
                        const long a = static_cast<long>(i - j) * lambda;
                        const int want =
                            oracle_bucket(a, c1, c2, log_range, mode == RpeMode::Literal);
                        const int got = map[static_cast<std::size_t>(i) * w + j];
                        if (got != want) {
                            return CheckResult{
                                "relpos index", false,
                                "bucket mismatch at W=" + std::to_string(w) + " lambda=" +
                                    std::to_string(lambda) + " (i,j)=(" + std::to_string(i) +
                                    "," + std::to_string(j) + "): got " + std::to_string(got) +
                                    ", enumeration says " + std::to_string(want)};
                        }
                        // |p| symmetry, bound, and the zero-offset anchor. The
                        // sign offset is only invertible given the sign of a.
                        const int mag = a >= 0 ? got - c2 : got;
                        const int mirror =
                            relpos_index(j, i, lambda, c1, c2, log_range, mode);
                        const int mirror_mag = -a >= 0 ? mirror - c2 : mirror;
                        if (mag != mirror_mag) {
                            return CheckResult{"relpos index", false,
                                               "|p| not symmetric at offset " + std::to_string(a)};
                        }
                        if (mag > c2 || got < 0 || got > 2 * c2) {
                            return CheckResult{"relpos index", false,
                                               "bucket out of range at offset " +
                                                   std::to_string(a)};
                        }
                        if (a == 0 && got != c2) {
                            return CheckResult{"relpos index", false,
                                               "zero offset mapped to " + std::to_string(got) +
                                                   ", expected c2=" + std::to_string(c2)};
                        }
                    }
                }
                // Monotone nondecreasing |p| in |a| over the representable range.
                int prev = 0;
                for (int a = 0; a <= (w - 1) * lambda; ++a) {
                    const int mag = relpos_index(a, 0, 1, c1, c2, log_range, mode) - c2;
                    if (mag < prev) {
                        return CheckResult{"relpos index", false,
                                           "|p| not monotone at |a|=" + std::to_string(a)};
                    }
                    prev = mag;
                }
            }
        }
    }
    return CheckResult{"relpos index", true,
                       "matches enumeration for W in {7,14,28}, lambda in {1,2,4}, both modes"};
}

CheckResult check_metric_oracles() {
    std::mt19937_64 rng(555);
    std::uniform_int_distribution<std::size_t> len_dist(1, 50);
    std::uniform_real_distribution<double> truth_dist(0.0, 200.0);
    std::uniform_real_distribution<double> err_dist(-50.0, 50.0);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = len_dist(rng);
        std::vector<double> truth(n), pred(n);
        for (std::size_t i = 0; i < n; ++i) {
            truth[i] = truth_dist(rng);
            pred[i] = std::max(0.0, truth[i] + err_dist(rng));
        }
        // Long-double recomputation, independent accumulation order.
        long double se = 0.0L, ae = 0.0L, sc = 0.0L;
        for (std::size_t i = n; i-- > 0;) {
            const long double d = static_cast<long double>(pred[i]) - truth[i];
            se += d * d;
            ae += d < 0 ? -d : d;
            sc += d < 0 ? std::exp(-d / 13.0L) - 1.0L : std::exp(d / 10.0L) - 1.0L;
        }
        const double want_rmse = static_cast<double>(std::sqrt(se / n));
        const double want_mae = static_cast<double>(ae / n);
        const double want_score = static_cast<double>(sc);
        auto close = [](double a, double b) {
            return std::fabs(a - b) <= 1e-9 * std::max(1.0, std::fabs(b));
        };
        if (!close(rmse(truth, pred), want_rmse) || !close(mae(truth, pred), want_mae) ||
            !close(score(truth, pred), want_score)) {
            return CheckResult{"metric oracles", false,
                               "metric disagrees with high-precision recomputation on trial " +
                                   std::to_string(trial)};
        }
    }
    // Late predictions must cost more than early ones at every error size.
    for (double e = 0.5; e <= 50.0; e += 0.5) {
        const std::vector<double> y{100.0};
        const double early = score(y, {100.0 - e});
        const double late = score(y, {100.0 + e});
        if (!(late > early)) {
            return CheckResult{"metric oracles", false,
                               "score asymmetry violated at error " + fmt(e)};
        }
    }
    return CheckResult{"metric oracles", true,
                       "1000 random vectors within 1e-9; late > early for e in (0,50]"};
}

CheckResult check_batch_independence() {
    ModelConfig cfg;
    cfg.window_len = 28;
    cfg.input_dim = 6;
    cfg.embed_dim = 16;
    cfg.heads = 2;
    cfg.rul_cap = 125.0;
    MsFormer model(cfg, 23);
    std::mt19937_64 rng(77);
    const std::size_t n = 5;
    Tensor batch = rand_tensor(rng, {n, 28, 6});

    NoGradGuard ng;
    Tensor together = model.forward(batch);
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        Tensor one({1, 28, 6});
        std::copy(batch.data() + i * 28 * 6, batch.data() + (i + 1) * 28 * 6, one.data());
        Tensor solo = model.forward(one);
        worst = std::max(worst, std::fabs(solo.vec()[0] - together.vec()[i]));
    }
    if (!(worst <= 1e-9)) {
        return CheckResult{"batch independence", false,
                           "per-sample vs batched forward differ by " + fmt(worst)};
    }
    return CheckResult{"batch independence", true,
                       "per-sample vs batched forward agree within " + fmt(worst)};
}

CheckResult check_overfit_smoke() {
    auto raw = synth_degradation(11, 4, 6, 0.02);
    const auto mask = select_features(raw);
    const NormStats stats = fit_norm_stats(raw, mask, false);
    auto store = std::make_shared<std::vector<Trajectory>>(normalize(raw, stats));

    DatasetSplits splits;
    splits.train_store = store;
    splits.input_dim = static_cast<int>(stats.retained());
    splits.rul_cap = 125.0;
    for (const auto& t : *store) {
        const auto w = make_windows(t, 28, splits.rul_cap);
        for (const auto& wr : w) {
            if (splits.train_windows.size() < 64) splits.train_windows.push_back(wr);
        }
    }

    ModelConfig cfg;
    cfg.window_len = 28;
    cfg.input_dim = splits.input_dim;
    cfg.embed_dim = 32;
    cfg.heads = 4;
    cfg.rul_cap = splits.rul_cap;
    MsFormer model(cfg, 3);

    TrainConfig tc;
    tc.epochs = 500;  // one full batch per epoch = one Adam step
    tc.batch_size = 64;
    tc.lr = 1e-3;
    tc.seed = 5;
    tc.eval_every = 0;
    const RunReport report = train(model, splits, tc);

    double best = std::numeric_limits<double>::infinity();
    int best_step = 0;
    for (std::size_t e = 0; e < report.train_loss.size(); ++e) {
        if (report.train_loss[e] < best) {
            best = report.train_loss[e];
            best_step = static_cast<int>(e) + 1;
        }
    }
    if (!(best < 1.0)) {
        return CheckResult{"overfit smoke", false,
                           "training MSE only reached " + fmt(best) +
                               " RUL-cycle^2 after 500 steps (need < 1.0)"};
    }
    return CheckResult{"overfit smoke", true,
                       "training MSE " + fmt(best) + " RUL-cycle^2 by step " +
                           std::to_string(best_step)};
}

CheckResult check_param_count() {
    ModelConfig cfg;      // defaults
    cfg.input_dim = 14;   // typical retained-sensor count
    MsFormer model(cfg, 1);
    const std::int64_t n = model.param_count();
    if (n < 400000 || n > 1000000) {
        return CheckResult{"parameter count", false,
                           "default config has " + std::to_string(n) +
                               " parameters, outside [0.4M, 1.0M]"};
    }
    return CheckResult{"parameter count", true,
                       "default config: " + std::to_string(n) + " parameters (within [0.4M, 1.0M])"};
}

std::vector<CheckResult> run_selfcheck() {
    std::vector<CheckResult> results;
    results.push_back(check_gradient_fidelity());
    results.push_back(check_ms_wr_roundtrip());
    results.push_back(check_relpos_index());
    results.push_back(check_metric_oracles());
    results.push_back(check_batch_independence());
    results.push_back(check_overfit_smoke());
    results.push_back(check_param_count());
    return results;
}

}  // namespace msformer
