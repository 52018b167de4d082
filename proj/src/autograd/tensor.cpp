#include "dcm/autograd/tensor.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <unordered_map>
#include <unordered_set>

#include "dcm/common/error.hpp"

namespace dcm::ag {

namespace {
thread_local bool t_grad_enabled = true;
thread_local std::size_t t_op_count = 0;
}  // namespace

bool grad_enabled() noexcept { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

std::size_t op_count() noexcept { return t_op_count; }
void reset_op_count() noexcept { t_op_count = 0; }
void count_op() noexcept { ++t_op_count; }

template <typename T>
void Node<T>::accumulate(std::span<const T> g) {
  if (!requires_grad) return;
  if (grad.empty()) {
    grad.assign(g.begin(), g.end());
    return;
  }
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, T{0}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value, bool requires_grad) {
  return from(shape, std::vector<T>(shape.numel(), value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(const Shape& shape, std::vector<T> values, bool requires_grad) {
  if (values.size() != shape.numel()) {
    throw ShapeError(fmt::format("tensor of shape {} needs {} values, got {}", shape.str(),
                                 shape.numel(), values.size()));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from(Shape{1}, {value}, requires_grad);
}

template <typename T>
std::span<T> Tensor<T>::mutable_values() {
  if (!node_->leaf) throw GraphError("only leaf tensors may be modified in place");
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ShapeError(fmt::format("item() needs a single-element tensor, got {}", shape().str()));
  }
  return node_->value[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (!node_->leaf) throw GraphError("requires_grad can only be set on leaf tensors");
  node_->requires_grad = on;
  return *this;
}

template <typename T>
void Tensor<T>::zero_grad() {
  node_->grad.clear();
  node_->grad_pending = false;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(node_->shape, node_->value, false);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return from(node_->shape, node_->value, node_->requires_grad);
}

template <typename T>
void Tensor<T>::backward() const {
  Node<T>& root = *node_;
  if (root.value.size() != 1) {
    throw GraphError(fmt::format("backward() needs a scalar loss, got shape {}", root.shape.str()));
  }
  if (root.consumed) {
    throw GraphError("backward() called twice on the same graph");
  }
  if (!root.requires_grad) {
    throw GraphError("backward() on a tensor that does not require grad");
  }

  // Iterative post-order DFS gives a topological order (operands first).
  std::vector<Node<T>*> order;
  std::vector<std::shared_ptr<Node<T>>> keep_alive;  // parents are released below
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{&root, 0}};
  visited.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        keep_alive.push_back(node->parents[next - 1]);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    if (!n->leaf && n->consumed) {
      throw GraphError("backward() reached a graph segment released by an earlier backward()");
    }
    if (n->leaf && n->grad_pending) {
      throw GraphError(
          "backward() would accumulate into gradients left by an earlier pass; "
          "call zero_grad() first");
    }
  }

  root.grad.assign(1, T{1});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& n = **it;
    if (n.leaf) continue;
    if (!n.grad.empty() && n.backward_fn) n.backward_fn(n);
    // Interior gradients and history are no longer needed.
    std::vector<T>().swap(n.grad);
    n.backward_fn = nullptr;
    n.parents.clear();
    n.consumed = true;
  }
  for (Node<T>* n : order) {
    if (n->leaf) n->grad_pending = true;
  }
  root.consumed = true;
}

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> operands, std::function<void(Node<T>&)> backward_fn,
                      std::size_t stride) {
  count_op();
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->leaf = false;
  node->op = op;
  node->stride = stride;
  const bool needs = grad_enabled() &&
                     std::any_of(operands.begin(), operands.end(),
                                 [](const Tensor<T>& t) { return t.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(operands.size());
    for (auto& t : operands) node->parents.push_back(t.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
std::size_t downsampling_depth(const Tensor<T>& out) {
  std::unordered_map<const Node<T>*, std::size_t> memo;
  std::function<std::size_t(const Node<T>*)> depth = [&](const Node<T>* n) -> std::size_t {
    if (auto it = memo.find(n); it != memo.end()) return it->second;
    std::size_t best = 0;
    for (const auto& p : n->parents) best = std::max(best, depth(p.get()));
    const std::size_t d = best + (n->stride > 1 ? 1 : 0);
    memo.emplace(n, d);
    return d;
  };
  return depth(&out.node());
}

template struct Node<float>;
template struct Node<double>;
template class Tensor<float>;
template class Tensor<double>;

template Tensor<float> make_result<float>(const char*, Shape, std::vector<float>,
                                          std::vector<Tensor<float>>,
                                          std::function<void(Node<float>&)>, std::size_t);
template Tensor<double> make_result<double>(const char*, Shape, std::vector<double>,
                                            std::vector<Tensor<double>>,
                                            std::function<void(Node<double>&)>, std::size_t);
template std::size_t downsampling_depth<float>(const Tensor<float>&);
template std::size_t downsampling_depth<double>(const Tensor<double>&);

}  // namespace dcm::ag
