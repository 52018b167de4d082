#pragma once

#include <cstddef>
#include <functional>
#include <span>

#include "dcm/autograd/tensor.hpp"

namespace dcm::ag {

struct GradCheckReport {
  /// max over checked coordinates of |analytic - central| / max(1, |analytic|)
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates whose one-sided slopes disagree (a kink such as relu at 0
  /// lies within eps); these are excluded from the maximum.
  std::size_t skipped = 0;
};

/// Compares the autograd gradient of scalar f at `point` with central
/// differences. eps must lie in [1e-8, 1e-3].
template <typename T>
GradCheckReport finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                                  const Tensor<T>& point, double eps = 1e-6);

/// Same check for a closure over existing leaves (e.g. network parameters).
/// At most `max_coords_per_tensor` evenly spaced coordinates of each leaf are
/// perturbed; 0 means all.
template <typename T>
GradCheckReport finite_diff_check_leaves(const std::function<Tensor<T>()>& f,
                                         std::span<Tensor<T>> leaves, double eps = 1e-6,
                                         std::size_t max_coords_per_tensor = 0);

}  // namespace dcm::ag
