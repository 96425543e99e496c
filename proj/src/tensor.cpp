#include "msformer/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace msformer {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill, bool requires_grad) {
    for (std::size_t d : shape) {
        if (d == 0) throw ShapeError("Tensor: zero dimension in shape " + shape_str(shape));
    }
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->data.assign(shape_numel(node_->shape), fill);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data,
                         bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("Tensor::from_data: shape " + shape_str(shape) + " wants " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
    }
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

double Tensor::item() const {
    if (size() != 1) {
        throw ContractError("Tensor::item: tensor has shape " + shape_str(shape()) +
                            ", expected a single element");
    }
    return node().data[0];
}

static std::size_t flat_index(const detail::Node& n, std::initializer_list<std::size_t> idx) {
    if (idx.size() != n.shape.size()) {
        throw ContractError("Tensor::at: rank mismatch");
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
        if (i >= n.shape[axis]) {
            throw IndexError("Tensor::at: index " + std::to_string(i) + " out of range for axis " +
                             std::to_string(axis) + " of " + shape_str(n.shape));
        }
        off = off * n.shape[axis] + i;
        ++axis;
    }
    return off;
}

double& Tensor::at(std::initializer_list<std::size_t> idx) {
    return node().data[flat_index(node(), idx)];
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
    return node().data[flat_index(node(), idx)];
}

Tensor& Tensor::set_requires_grad(bool v) {
    if (!node().is_leaf() && v == false) {
        throw ContractError("Tensor::set_requires_grad: cannot detach a non-leaf node");
    }
    node().requires_grad = v;
    return *this;
}

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) {
        throw ContractError("Tensor::grad: no gradient present (shape " + shape_str(shape()) + ")");
    }
    return node().grad;
}

std::vector<double>& Tensor::grad_ref() {
    node().ensure_grad();
    return node().grad;
}

void Tensor::zero_grad() {
    auto& g = node().grad;
    if (!g.empty()) g.assign(g.size(), 0.0);
}

namespace {

// Iterative post-order DFS; each node appears after all of its parents' uses,
// i.e. the returned order is valid for a reverse sweep from the back.
void toposort(const std::shared_ptr<detail::Node>& root,
              std::vector<std::shared_ptr<detail::Node>>& order) {
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            auto parent = node->parents[next++];
            if (seen.insert(parent.get()).second) {
                stack.emplace_back(std::move(parent), 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

}  // namespace

void Tensor::backward() {
    if (size() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(shape()));
    }
    std::vector<std::shared_ptr<detail::Node>> order;
    toposort(node_, order);

    // Intermediate grads are scratch for this sweep; leaf grads accumulate.
    for (auto& n : order) {
        if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
    }
    node_->ensure_grad();
    node_->grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node& n = **it;
        if (n.requires_grad && n.backward_fn) n.backward_fn(n);
    }
}

bool all_finite(const Tensor& t) {
    for (double v : t.vec()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void check_finite(const Tensor& t, const std::string& what) {
    const auto& d = t.vec();
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!std::isfinite(d[i])) {
            throw NumericError(what + ": non-finite value " + std::to_string(d[i]) +
                               " at flat index " + std::to_string(i));
        }
    }
}

}  // namespace msformer
