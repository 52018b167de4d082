#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a shared handle to a graph node. Operators in ops.hpp create
// new nodes and, while gradient recording is enabled and some operand
// requires a gradient, remember their operands and a backward closure.
// backward() runs the closures in reverse topological order, accumulates
// into leaf gradients, then releases the graph.
//
// Gradient policy: a leaf's gradient must be cleared with zero_grad() before
// it can receive another backward pass. Calling backward() again while a
// reachable leaf still holds gradients from an earlier pass is an error, as
// is calling backward() twice on the same root.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "dcm/autograd/shape.hpp"

namespace dcm::ag {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  bool leaf = true;
  bool grad_pending = false;  // leaf holds gradients from a finished backward
  bool consumed = false;      // root of a graph that has been run and released
  const char* op = "leaf";
  std::size_t stride = 1;  // spatial stride, recorded by conv2d for graph walks
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void accumulate(std::span<const T> g);
};

/// Thread-local switch for graph recording.
bool grad_enabled() noexcept;

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Number of operator nodes created on this thread since the last reset.
std::size_t op_count() noexcept;
void reset_op_count() noexcept;
void count_op() noexcept;

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, T value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::span<const T> values() const { return node_->value; }
  /// Writable storage; only leaves may be mutated (parameter updates, loads).
  std::span<T> mutable_values();
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return node_->leaf; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad();

  /// Same values, no history, no gradient.
  Tensor detach() const;
  /// Deep copy of values; keeps requires_grad, drops history and gradient.
  Tensor clone() const;

  /// Populates gradients of every reachable leaf that requires them.
  void backward() const;

  const Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an operator result. History is recorded only when grad mode is on
/// and at least one operand requires a gradient.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> operands, std::function<void(Node<T>&)> backward_fn,
                      std::size_t stride = 1);

/// Longest chain of stride>1 operators between `out` and any leaf of its
/// recorded graph.
template <typename T>
std::size_t downsampling_depth(const Tensor<T>& out);

extern template struct Node<float>;
extern template struct Node<double>;
extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace dcm::ag
