#pragma once

// Dense float64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a graph node. Ops (see ops.hpp) build the
// graph as they run; Tensor::backward() walks it once in reverse topological
// order. Gradients accumulate until explicitly zeroed, which is what makes
// gradient-check instrumentation possible.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "msformer/errors.hpp"

namespace msformer {

namespace detail {

struct Node {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first needed; same length as data afterwards
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // pushes this->grad into parents
    const char* op = "leaf";

    std::size_t size() const { return data.size(); }
    bool is_leaf() const { return parents.empty(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

std::string shape_str(const std::vector<std::size_t>& shape);
std::size_t shape_numel(const std::vector<std::size_t>& shape);

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0, bool requires_grad = false);
    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node().shape; }
    std::size_t size() const { return node().data.size(); }
    std::size_t rank() const { return node().shape.size(); }

    std::vector<double>& vec() { return node().data; }
    const std::vector<double>& vec() const { return node().data; }
    double* data() { return node().data.data(); }
    const double* data() const { return node().data.data(); }

    // Scalar extraction; contract error on anything but a one-element tensor.
    double item() const;

    // Multi-index access, mostly for tests and small fixtures.
    double& at(std::initializer_list<std::size_t> idx);
    double at(std::initializer_list<std::size_t> idx) const;

    bool requires_grad() const { return node().requires_grad; }
    Tensor& set_requires_grad(bool v);

    bool has_grad() const { return defined() && !node().grad.empty(); }
    const std::vector<double>& grad() const;
    std::vector<double>& grad_ref();  // allocates (zeros) when absent
    void zero_grad();

    // Reverse-mode sweep from a scalar. Non-leaf gradients are reset per call;
    // leaf (parameter) gradients accumulate across calls.
    void backward();

    std::shared_ptr<detail::Node> node_ptr() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

  private:
    detail::Node& node() {
        if (!node_) throw ContractError("Tensor: use of an undefined tensor");
        return *node_;
    }
    const detail::Node& node() const {
        if (!node_) throw ContractError("Tensor: use of an undefined tensor");
        return *node_;
    }

    std::shared_ptr<detail::Node> node_;
};

// Graph construction toggle (thread-local). Forward passes under NoGradGuard
// build plain value nodes with no parents, so eval is graph-free.
bool grad_enabled();
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// Finiteness is checked explicitly, never silently assumed.
bool all_finite(const Tensor& t);
void check_finite(const Tensor& t, const std::string& what);

}  // namespace msformer
