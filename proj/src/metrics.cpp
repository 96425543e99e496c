#include "msformer/metrics.hpp"

#include <cmath>
#include <string>

#include "msformer/errors.hpp"

namespace msformer {

namespace {

void check_lengths(const std::vector<double>& truth, const std::vector<double>& pred,
                   const char* op) {
    if (truth.empty()) throw ContractError(std::string(op) + ": empty input");
    if (truth.size() != pred.size()) {
        throw ContractError(std::string(op) + ": " + std::to_string(truth.size()) +
                            " truth values vs " + std::to_string(pred.size()) + " predictions");
    }
}

}  // namespace

double rmse(const std::vector<double>& truth, const std::vector<double>& pred) {
    check_lengths(truth, pred, "rmse");
    double s = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const double d = truth[i] - pred[i];
        s += d * d;
    }
    return std::sqrt(s / static_cast<double>(truth.size()));
}

double mae(const std::vector<double>& truth, const std::vector<double>& pred) {
    check_lengths(truth, pred, "mae");
    double s = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        s += std::fabs(truth[i] - pred[i]);
    }
    return s / static_cast<double>(truth.size());
}

double score(const std::vector<double>& truth, const std::vector<double>& pred) {
    check_lengths(truth, pred, "score");
    double s = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const double d = pred[i] - truth[i];
        s += d < 0.0 ? std::exp(-d / 13.0) - 1.0 : std::exp(d / 10.0) - 1.0;
    }
    return s;
}

double score_mean(const std::vector<double>& truth, const std::vector<double>& pred) {
    return score(truth, pred) / static_cast<double>(truth.size());
}

}  // namespace msformer
