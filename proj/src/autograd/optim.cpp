#include "dcm/autograd/optim.hpp"

#include <fmt/format.h>

#include <cmath>

#include "dcm/common/error.hpp"

namespace dcm::ag {

template <typename T>
OptimizerState<T>::OptimizerState(std::span<const Tensor<T>> params, SgdOptions opts)
    : options(opts) {
  velocity.reserve(params.size());
  for (const auto& p : params) velocity.emplace_back(p.numel(), T{0});
}

template <typename T>
void sgd_step(std::span<Tensor<T>> params, OptimizerState<T>& state, double lr) {
  if (!(lr >= 0.0)) throw Error(fmt::format("sgd_step: learning rate must be >= 0, got {}", lr));
  if (state.velocity.size() != params.size()) {
    throw Error(fmt::format("sgd_step: optimizer tracks {} parameters, got {}",
                            state.velocity.size(), params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.velocity[i].size() != params[i].numel()) {
      throw ShapeError(fmt::format("sgd_step: velocity {} has {} entries for a parameter of {}", i,
                                   state.velocity[i].size(), params[i].shape().str()));
    }
    for (T g : params[i].grad()) {
      if (!std::isfinite(g)) {
        throw DivergenceError(fmt::format("sgd_step: non-finite gradient in parameter {}", i));
      }
    }
  }
  const T mu = static_cast<T>(state.options.momentum);
  const T wd = static_cast<T>(state.options.weight_decay);
  const T rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) continue;
    auto w = params[i].mutable_values();
    auto g = params[i].grad();
    auto& v = state.velocity[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const T d = g[j] + wd * w[j];
      v[j] = mu * v[j] + d;
      w[j] -= state.options.nesterov ? rate * (d + mu * v[j]) : rate * v[j];
    }
  }
}

template <typename T>
void zero_grad(std::span<Tensor<T>> params) {
  for (auto& p : params) p.zero_grad();
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void sgd_step<float>(std::span<Tensor<float>>, OptimizerState<float>&, double);
template void sgd_step<double>(std::span<Tensor<double>>, OptimizerState<double>&, double);
template void zero_grad<float>(std::span<Tensor<float>>);
template void zero_grad<double>(std::span<Tensor<double>>);

}  // namespace dcm::ag
