#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "twbert/core/errors.hpp"

namespace twbert {

template <typename Real>
concept Scalar = std::same_as<Real, float> || std::same_as<Real, double>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {
inline thread_local bool grad_recording = true;
}  // namespace detail

/// True while operations record the graph needed by backward().
inline bool grad_enabled() { return detail::grad_recording; }

/// Disables graph recording for the lifetime of the guard (inference,
/// momentum encoders, finite-difference probes).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_recording) { detail::grad_recording = false; }
  ~NoGradGuard() { detail::grad_recording = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <Scalar Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents' grads.
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  bool is_leaf = true;
  // Leaves only: whether any backward pass reached this node since the last clear.
  bool grad_touched = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
  }
};

/// Dense row-major tensor with optional reverse-mode gradient tracking.
///
/// A Tensor is a cheap shared handle. Leaf tensors created with
/// requires_grad hold trainable values whose gradient accumulates across
/// backward() calls until cleared. Every other tensor is the result of an
/// operation and records its inputs while grad_enabled().
template <Scalar Real>
class Tensor {
 public:
  using value_type = Real;
  using NodePtr = std::shared_ptr<Node<Real>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("Tensor: shape " + shape_string(shape) + " needs " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("Tensor: zero-sized dimension in " + shape_string(shape));
    }
    auto node = std::make_shared<Node<Real>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    if (requires_grad) node->ensure_grad();
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<Real>(n, Real(0)), requires_grad);
  }

  static Tensor filled(Shape shape, Real v) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<Real>(n, v));
  }

  static Tensor scalar(Real v) { return from({1}, {v}); }

  /// 2-D constant from nested rows (test convenience).
  static Tensor matrix(const std::vector<std::vector<Real>>& rows) {
    if (rows.empty() || rows.front().empty()) throw DimensionError("Tensor::matrix: empty");
    std::vector<Real> flat;
    for (const auto& r : rows) {
      if (r.size() != rows.front().size()) throw DimensionError("Tensor::matrix: ragged rows");
      flat.insert(flat.end(), r.begin(), r.end());
    }
    return from({rows.size(), rows.front().size()}, std::move(flat));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const NodePtr& node() const { return node_; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  /// Width of the last axis.
  std::size_t cols() const { return node_->shape.back(); }
  /// Number of vectors along the last axis.
  std::size_t rows() const { return numel() / cols(); }

  std::span<const Real> values() const { return node_->value; }
  /// Mutable access to the stored values. Only meaningful for leaves; editing
  /// an interior node does not update its dependents.
  std::span<Real> mutable_values() { return node_->value; }

  Real operator[](std::size_t i) const { return node_->value[i]; }
  Real at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  Real item() const {
    if (numel() != 1) throw ContractError("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  std::span<const Real> grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  bool grad_touched() const { return node_->grad_touched; }
  void zero_grad() {
    node_->ensure_grad();
    std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
    node_->grad_touched = false;
  }

  /// Value copy detached from any graph.
  Tensor detach() const { return from(shape(), node_->value); }

  bool all_finite() const {
    return std::all_of(node_->value.begin(), node_->value.end(),
                       [](Real v) { return std::isfinite(v); });
  }

 private:
  NodePtr node_;
};

namespace detail {

/// Builds the result node of an operation. The graph edge is recorded only
/// when recording is on and some input requires a gradient.
template <Scalar Real>
Tensor<Real> make_result(Shape shape, std::vector<Real> value,
                         std::vector<std::shared_ptr<Node<Real>>> parents,
                         std::function<void(Node<Real>&)> backward_fn) {
  auto node = std::make_shared<Node<Real>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->is_leaf = false;
  const bool needs = grad_enabled() &&
                     std::any_of(parents.begin(), parents.end(),
                                 [](const auto& p) { return p->requires_grad; });
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<Real>(std::move(node));
}

/// Gradient buffer of a parent, or nullptr when it does not take gradients.
template <Scalar Real>
Real* grad_of(const std::shared_ptr<Node<Real>>& n) {
  if (!n->requires_grad) return nullptr;
  n->ensure_grad();
  if (n->is_leaf) n->grad_touched = true;
  return n->grad.data();
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss.
///
/// Interior gradients are recomputed from zero on every call; leaf gradients
/// accumulate until zero_grad(). Leaves the loss does not depend on keep
/// their current gradient (zero after a clear).
template <Scalar Real>
void backward(const Tensor<Real>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  const auto& root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<Real>*> order;
  std::unordered_set<Node<Real>*> seen;
  std::vector<std::pair<Node<Real>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Real>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<Real>* n : order) {
    if (!n->is_leaf) n->grad.assign(n->value.size(), Real(0));
  }
  root->ensure_grad();
  root->grad[0] += Real(1);
  if (root->is_leaf) root->grad_touched = true;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

/// A named trainable tensor. Its gradient lives in the tensor's leaf node.
template <Scalar Real>
struct Parameter {
  std::string name;
  Tensor<Real> value;
};

}  // namespace twbert
