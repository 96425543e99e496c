#pragma once

// Differentiable tensor operations. Every op returns a fresh tensor; when
// grad mode is on and an input is tracked, the result carries a backward
// closure that scatters upstream gradients into the inputs.

#include <cstdint>
#include <vector>

#include "msformer/tensor.hpp"

namespace msformer {

// Batched matrix product [..,m,k] x [..,k,n] -> [..,m,n]; leading batch
// dimensions broadcast (right-aligned, numpy rules).
Tensor matmul(const Tensor& a, const Tensor& b);

// Max-stabilized softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);

// Normalization over the last dimension followed by a per-channel affine.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Stride-1 moving average along the middle axis of [N,L,C]; odd kernel,
// windows shrink at the edges so output length equals input length.
Tensor avg_pool1d(const Tensor& x, int kernel);

// Elementwise suite. add/sub/mul broadcast (right-aligned).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor gelu(const Tensor& x);

Tensor reshape(const Tensor& x, std::vector<std::size_t> shape);
Tensor transpose(const Tensor& x, std::vector<std::size_t> perm);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor gather(const Tensor& x, std::size_t axis, const std::vector<std::int64_t>& indices);

Tensor mean(const Tensor& x, std::size_t axis);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor mse(const Tensor& pred, const Tensor& target);

namespace testhooks {
// Deliberate-fault injection for the selfcheck negative test. 1.0 in normal
// operation; anything else corrupts the gelu backward pass.
extern double gelu_backward_scale;
}  // namespace testhooks

}  // namespace msformer
