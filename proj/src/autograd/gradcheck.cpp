#include "dcm/autograd/gradcheck.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "dcm/common/error.hpp"

namespace dcm::ag {

namespace {

// One-sided slopes differing by more than this (relative) mark a kink.
constexpr double kKinkTolerance = 1e-2;

void require_eps(double eps) {
  if (!(eps >= 1e-8 && eps <= 1e-3)) {
    throw Error(fmt::format("finite_diff_check: eps {} outside [1e-8, 1e-3]", eps));
  }
}

template <typename T>
double evaluate(const std::function<Tensor<T>()>& f) {
  NoGradGuard guard;
  const Tensor<T> out = f();
  if (out.numel() != 1) {
    throw ShapeError(
        fmt::format("finite_diff_check: function must return a scalar, got {}", out.shape().str()));
  }
  return static_cast<double>(out.item());
}

template <typename T>
void check_coordinate(const std::function<Tensor<T>()>& f, Tensor<T>& leaf, std::size_t index,
                      double analytic, double f0, double eps, GradCheckReport& report) {
  auto values = leaf.mutable_values();
  const T saved = values[index];
  values[index] = static_cast<T>(static_cast<double>(saved) + eps);
  const double up = evaluate(f);
  values[index] = static_cast<T>(static_cast<double>(saved) - eps);
  const double down = evaluate(f);
  values[index] = saved;

  const double right = (up - f0) / eps;
  const double left = (f0 - down) / eps;
  const double scale = std::max({1.0, std::abs(left), std::abs(right)});
  if (std::abs(right - left) > kKinkTolerance * scale) {
    ++report.skipped;
    return;
  }
  const double central = (up - down) / (2.0 * eps);
  const double rel = std::abs(analytic - central) / std::max(1.0, std::abs(analytic));
  report.max_relative_error = std::max(report.max_relative_error, rel);
  ++report.checked;
}

}  // namespace

template <typename T>
GradCheckReport finite_diff_check_leaves(const std::function<Tensor<T>()>& f,
                                         std::span<Tensor<T>> leaves, double eps,
                                         std::size_t max_coords_per_tensor) {
  require_eps(eps);
  for (auto& leaf : leaves) leaf.zero_grad();
  const Tensor<T> out = f();
  if (out.numel() != 1) {
    throw ShapeError(
        fmt::format("finite_diff_check: function must return a scalar, got {}", out.shape().str()));
  }
  out.backward();
  std::vector<std::vector<T>> analytic;
  analytic.reserve(leaves.size());
  for (auto& leaf : leaves) {
    if (leaf.has_grad()) {
      analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
    } else {
      analytic.emplace_back(leaf.numel(), T{0});
    }
    leaf.zero_grad();
  }

  const double f0 = evaluate(f);
  GradCheckReport report;
  for (std::size_t t = 0; t < leaves.size(); ++t) {
    const std::size_t n = leaves[t].numel();
    const std::size_t stride =
        (max_coords_per_tensor == 0 || n <= max_coords_per_tensor) ? 1 : n / max_coords_per_tensor;
    for (std::size_t i = 0; i < n; i += stride) {
      check_coordinate(f, leaves[t], i, static_cast<double>(analytic[t][i]), f0, eps, report);
    }
  }
  return report;
}

template <typename T>
GradCheckReport finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                                  const Tensor<T>& point, double eps) {
  Tensor<T> x = point.clone();
  x.set_requires_grad(true);
  std::vector<Tensor<T>> leaves{x};
  return finite_diff_check_leaves<T>([&] { return f(x); }, leaves, eps, 0);
}

template GradCheckReport finite_diff_check<float>(
    const std::function<Tensor<float>(const Tensor<float>&)>&, const Tensor<float>&, double);
template GradCheckReport finite_diff_check<double>(
    const std::function<Tensor<double>(const Tensor<double>&)>&, const Tensor<double>&, double);
template GradCheckReport finite_diff_check_leaves<float>(const std::function<Tensor<float>()>&,
                                                         std::span<Tensor<float>>, double,
                                                         std::size_t);
template GradCheckReport finite_diff_check_leaves<double>(const std::function<Tensor<double>()>&,
                                                          std::span<Tensor<double>>, double,
                                                          std::size_t);

}  // namespace dcm::ag
