#include "msformer/optim.hpp"

#include <cmath>

namespace msformer {

void zero_grads(std::vector<Parameter>& params) {
    for (auto& p : params) p.value.zero_grad();
}

std::int64_t param_element_count(const std::vector<Parameter>& params) {
    std::int64_t n = 0;
    for (const auto& p : params) n += static_cast<std::int64_t>(p.value.size());
    return n;
}

void Adam::step(std::vector<Parameter>& params) {
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i].value.size(), 0.0);
            v_[i].assign(params[i].value.size(), 0.0);
        }
    } else if (m_.size() != params.size()) {
        throw ContractError("Adam::step: parameter list changed size under the optimizer");
    }

    ++step_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));

    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = params[i];
        if (!p.value.has_grad()) {
            throw ContractError("Adam::step: parameter '" + p.name + "' has no gradient");
        }
        const auto& g = p.value.grad();
        auto& data = p.value.vec();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < data.size(); ++j) {
            m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * g[j];
            v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            data[j] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
        }
    }
}

}  // namespace msformer
