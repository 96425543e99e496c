#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msformer/tensor.hpp"

namespace msformer {

// A named leaf tensor with requires_grad set. Names are slash/dot paths
// ("stage3.block0.attn.wq") and must be unique within a model; checkpoints
// key on them.
struct Parameter {
    std::string name;
    Tensor value;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
        value.set_requires_grad(true);
    }
};

void zero_grads(std::vector<Parameter>& params);
std::int64_t param_element_count(const std::vector<Parameter>& params);

// Adam with bias correction; moments mirror parameter shapes.
class Adam {
  public:
    struct Options {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    Adam() = default;
    explicit Adam(Options opt) : opt_(opt) {}

    // One update over all parameters; every parameter must carry a gradient.
    void step(std::vector<Parameter>& params);

    std::int64_t step_count() const { return step_; }
    const Options& options() const { return opt_; }

  private:
    Options opt_;
    std::int64_t step_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace msformer
