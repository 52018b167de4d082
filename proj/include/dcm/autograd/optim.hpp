#pragma once

#include <span>
#include <vector>

#include "dcm/autograd/tensor.hpp"

namespace dcm::ag {

struct SgdOptions {
  double momentum = 0.9;
  double weight_decay = 0.0;
  bool nesterov = false;
};

/// Velocity buffers paired by position with a fixed parameter list.
template <typename T>
struct OptimizerState {
  SgdOptions options;
  std::vector<std::vector<T>> velocity;

  OptimizerState() = default;
  OptimizerState(std::span<const Tensor<T>> params, SgdOptions opts);
};

/// One SGD step:
///   d = g + wd * w
///   v <- mu * v + d
///   w <- w - lr * v              (plain momentum)
///   w <- w - lr * (d + mu * v)   (Nesterov)
/// Parameters without a gradient are left untouched. A non-finite gradient
/// anywhere aborts the whole step with DivergenceError before any update.
template <typename T>
void sgd_step(std::span<Tensor<T>> params, OptimizerState<T>& state, double lr);

template <typename T>
void zero_grad(std::span<Tensor<T>> params);

extern template struct OptimizerState<float>;
extern template struct OptimizerState<double>;

}  // namespace dcm::ag
