#pragma once

// Differentiable operators. Shape errors throw dcm::ShapeError naming the
// operator and the offending shapes.

#include <cstddef>
#include <cstdint>
#include <span>

#include "dcm/autograd/tensor.hpp"

namespace dcm::ag {

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T offset);

/// x:[N,F] + b:[F] broadcast over rows.
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b);

/// [m,k] x [k,n] -> [m,n]
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// x:[N,in], w:[out,in], b:[out] -> x w^T + b
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> exp(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);

/// log(max(x, floor)); the gradient is zero where the floor is active.
template <typename T> Tensor<T> safe_log(const Tensor<T>& x, T floor = T(1e-12));

/// Sum / mean of all elements, shape [1].
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);
/// [N, ...] -> [N, prod(...)]
template <typename T> Tensor<T> flatten(const Tensor<T>& x);

/// x:[N,C,H,W], w:[O,C,k,k] -> [N,O,Ho,Wo]. `bias` may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad);

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel batch normalization over [N,C,H,W]. In training mode batch
/// statistics normalize the input and the running estimates are updated in
/// place (unbiased variance); in evaluation mode the running estimates are used.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::span<T> running_mean, std::span<T> running_var,
                     const BatchNormOptions& options);

/// [N,C,H,W] -> [N,C]
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);

/// [N,C,H,W] -> [N,C,oh,ow] with floor/ceil bin edges.
template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, std::size_t out_h, std::size_t out_w);

/// Zero padding of `pad` pixels on every spatial side.
template <typename T> Tensor<T> pad2d(const Tensor<T>& x, std::size_t pad);

/// x:[N,M] -> [N], picking x[n, index[n]].
template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::span<const std::int32_t> index);

/// Row-wise softmax of logits / temperature; max-subtracted.
template <typename T> Tensor<T> softmax(const Tensor<T>& logits, T temperature = T{1});
template <typename T> Tensor<T> log_softmax(const Tensor<T>& logits, T temperature = T{1});

/// Mean one-hot cross-entropy of [N,M] logits against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels);

}  // namespace dcm::ag
