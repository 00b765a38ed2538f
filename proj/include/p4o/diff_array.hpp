// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "p4o/errors.hpp"

namespace p4o {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Graph recording is on by default; NoGradGuard turns it off for the current
// thread (acting, replays, finite differences).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

void set_grad_enabled(bool enabled);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  T* grad_data() {
    if (grad.empty()) grad.assign(value.size(), T{0});
    return grad.data();
  }
  Node& parent(std::size_t i) const { return *parents[i]; }
};

}  // namespace detail

// N-dimensional array of T that records the operations producing it, so a
// scalar result can be differentiated with respect to every leaf that
// requires gradients. Values are immutable once other nodes depend on them;
// leaves (parameters) are updated in place between graphs.
template <typename T>
class DiffArray {
 public:
  using Node = detail::Node<T>;
  using BackwardFn = std::function<void(Node&)>;

  DiffArray() = default;

  DiffArray(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (shape_size(shape) != values.size()) {
      throw DimensionError("DiffArray: shape " + shape_string(shape) + " holds " +
                           std::to_string(shape_size(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static DiffArray zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_size(shape);
    return DiffArray(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
  }
  static DiffArray full(Shape shape, T value) {
    const std::size_t n = shape_size(shape);
    return DiffArray(std::move(shape), std::vector<T>(n, value));
  }
  static DiffArray scalar(T value, bool requires_grad = false) {
    return DiffArray(Shape{}, std::vector<T>{value}, requires_grad);
  }

  // Result of an operation. Records parents and the backward closure only
  // when recording is enabled and some parent requires gradients.
  static DiffArray from_op(Shape shape, std::vector<T> values,
                           std::initializer_list<DiffArray> parents, BackwardFn backward) {
    return from_op(std::move(shape), std::move(values), std::vector<DiffArray>(parents),
                   std::move(backward));
  }
  static DiffArray from_op(Shape shape, std::vector<T> values,
                           const std::vector<DiffArray>& parents, BackwardFn backward) {
    DiffArray out(std::move(shape), std::move(values));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& p : parents) any = any || (p.defined() && p.requires_grad());
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->parents.reserve(parents.size());
    for (const auto& p : parents) {
      // Undefined parents keep their slot so closures can index positionally.
      out.node_->parents.push_back(p.defined() ? p.node_ : std::make_shared<Node>());
    }
    out.node_->backward_fn = std::move(backward);
    return out;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  const T* data() const { return node_->value.data(); }

  // In-place access for leaves only.
  std::span<T> mutable_values() {
    if (!node_->parents.empty()) {
      throw std::logic_error("DiffArray: cannot mutate the value of an operation result");
    }
    return node_->value;
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Empty span until a backward pass reached this array.
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (size() != 1) {
      throw DimensionError("DiffArray::item: shape " + shape_string(shape()) + " is not scalar");
    }
    return node_->value[0];
  }

  // Leaf copy of the values, cut from the graph.
  DiffArray detach() const { return DiffArray(node_->shape, node_->value); }

  // Reverse-mode sweep from this scalar. Accumulates into every reachable
  // array that requires gradients. Call at most once per graph.
  void backward() const;

  Node& node() const { return *node_; }
  bool same_node(const DiffArray& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node> node_;
};

template <typename T>
void DiffArray<T>::backward() const {
  if (size() != 1) {
    throw DimensionError("backward: loss must be scalar, got shape " + shape_string(shape()));
  }
  if (!requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen{node_.get()};
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  while (!stack.empty()) {
    Node* current = stack.back().first;
    std::size_t& next = stack.back().second;
    if (next < current->parents.size()) {
      Node* p = current->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(current);
      stack.pop_back();
    }
  }
  node_->grad_data()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

}  // namespace p4o
