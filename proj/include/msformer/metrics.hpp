#pragma once

#include <vector>

namespace msformer {

// Regression metrics over aligned truth/prediction vectors. The prognostics
// score is asymmetric: a late prediction (pred > truth) costs exp(err/10)-1,
// an early one exp(err/13)-1, summed over samples.
double rmse(const std::vector<double>& truth, const std::vector<double>& pred);
double mae(const std::vector<double>& truth, const std::vector<double>& pred);
double score(const std::vector<double>& truth, const std::vector<double>& pred);
double score_mean(const std::vector<double>& truth, const std::vector<double>& pred);

}  // namespace msformer
