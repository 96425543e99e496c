#pragma once

// Self-contained property suite: gradient fidelity against central finite
// differences, sampling round trips, position-bucket enumeration, metric
// oracles, batch independence, an overfit smoke test, and the parameter
// budget. No dataset required; everything runs on synthetic fixtures.

#include <functional>
#include <string>
#include <vector>

#include "msformer/optim.hpp"

namespace msformer {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

// Max relative error between analytic gradients of loss() and central finite
// differences over every element of every parameter. loss() must be a pure
// function of the parameter values.
double max_grad_rel_error(const std::function<Tensor()>& loss, std::vector<Parameter>& params,
                          double h = 1e-5);

CheckResult check_gradient_fidelity();
CheckResult check_ms_wr_roundtrip();
CheckResult check_relpos_index();
CheckResult check_metric_oracles();
CheckResult check_batch_independence();
CheckResult check_overfit_smoke();
CheckResult check_param_count();

std::vector<CheckResult> run_selfcheck();

}  // namespace msformer
