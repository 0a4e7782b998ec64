// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is an immutable value node in a dynamically built graph. Running
// GradientTape::backward over a scalar loss visits each recorded node once
// and accumulates gradients additively into a tape-owned map, so several
// tapes can differentiate graphs that share parameters without interfering.
//
// The scalar type is a template parameter: float for training, double for
// finite-difference gradient checks.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "star/common.hpp"
#include "star/random.hpp"

namespace star {

template <class S>
class GradientTapeT;

template <class S>
struct NodeT {
  Shape shape;
  std::vector<S> value;
  bool grad_enabled = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<NodeT<S>>> parents;
  // Receives d(loss)/d(this node) and pushes contributions into the tape's
  // buffers for the parents. Present only on grad-enabled non-leaf nodes.
  std::function<void(const S*, GradientTapeT<S>&)> backward;
};

template <class S>
class TensorT {
 public:
  using Scalar = S;

  TensorT() = default;
  explicit TensorT(std::shared_ptr<NodeT<S>> node) : node_(std::move(node)) {}

  static TensorT from_data(Shape shape, std::vector<S> data, bool grad_enabled = false) {
    if (shape_numel(shape) != static_cast<long long>(data.size()))
      throw DimensionError("data length " + std::to_string(data.size()) +
                           " does not fill shape " + shape_str(shape));
    auto n = std::make_shared<NodeT<S>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->grad_enabled = grad_enabled;
    return TensorT(std::move(n));
  }

  static TensorT zeros(Shape shape, bool grad_enabled = false) {
    return full(std::move(shape), S(0), grad_enabled);
  }

  static TensorT full(Shape shape, S v, bool grad_enabled = false) {
    auto count = static_cast<size_t>(shape_numel(shape));
    return from_data(std::move(shape), std::vector<S>(count, v), grad_enabled);
  }

  static TensorT scalar(S v, bool grad_enabled = false) {
    return from_data({}, {v}, grad_enabled);
  }

  static TensorT randn(Shape shape, Rng& rng, S stddev = S(1), bool grad_enabled = false) {
    auto count = static_cast<size_t>(shape_numel(shape));
    std::vector<S> d(count);
    for (auto& x : d) x = static_cast<S>(rng.normal()) * stddev;
    return from_data(std::move(shape), std::move(d), grad_enabled);
  }

  static TensorT uniform(Shape shape, Rng& rng, S lo, S hi, bool grad_enabled = false) {
    auto count = static_cast<size_t>(shape_numel(shape));
    std::vector<S> d(count);
    for (auto& x : d) x = static_cast<S>(rng.uniform(lo, hi));
    return from_data(std::move(shape), std::move(d), grad_enabled);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape.at(static_cast<size_t>(i)); }
  long long numel() const { return static_cast<long long>(node_->value.size()); }
  bool grad_enabled() const { return node_->grad_enabled; }
  const std::vector<S>& data() const { return node_->value; }

  // Direct mutation is reserved for optimizer updates and checkpoint loads,
  // which happen between steps when no graph references the value.
  std::vector<S>& raw_data() { return node_->value; }

  S item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }

  const std::shared_ptr<NodeT<S>>& node() const { return node_; }

 private:
  std::shared_ptr<NodeT<S>> node_;
};

template <class S>
class GradientTapeT {
 public:
  // Reverse-mode sweep from a scalar loss. Topological order is rebuilt per
  // call; each reachable grad-enabled node is visited exactly once.
  void backward(const TensorT<S>& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw ContractError("backward requires a scalar loss");
    NodeT<S>* root = loss.node().get();
    if (!root->grad_enabled) return;  // nothing differentiable upstream

    // Iterative post-order DFS over grad-enabled ancestors.
    std::vector<NodeT<S>*> order;
    std::unordered_map<NodeT<S>*, int> mark;  // 0 new, 1 open, 2 done
    std::vector<std::pair<NodeT<S>*, size_t>> stack;
    stack.emplace_back(root, 0);
    mark[root] = 1;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        NodeT<S>* p = node->parents[next++].get();
        if (p->grad_enabled && mark[p] == 0) {
          mark[p] = 1;
          stack.emplace_back(p, 0);
        }
      } else {
        mark[node] = 2;
        order.push_back(node);
        stack.pop_back();
      }
    }

    buffer(root).assign(1, S(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      NodeT<S>* node = *it;
      auto found = grads_.find(node);
      if (found == grads_.end()) continue;  // zero gradient, nothing to push
      if (node->backward) node->backward(found->second.data(), *this);
    }
  }

  // Gradient of a tensor, or nullptr when it did not participate.
  const std::vector<S>* grad(const TensorT<S>& t) const {
    auto it = grads_.find(t.node().get());
    return it == grads_.end() ? nullptr : &it->second;
  }

  std::vector<S>& buffer(NodeT<S>* node) {
    auto [it, inserted] = grads_.emplace(node, std::vector<S>());
    if (inserted) it->second.assign(node->value.size(), S(0));
    return it->second;
  }

  void accumulate(const std::shared_ptr<NodeT<S>>& node, const S* g, size_t len) {
    if (!node->grad_enabled) return;
    auto& buf = buffer(node.get());
    for (size_t i = 0; i < len; ++i) buf[i] += g[i];
  }

  void clear() { grads_.clear(); }
  size_t recorded() const { return grads_.size(); }

 private:
  std::unordered_map<NodeT<S>*, std::vector<S>> grads_;
};

// Builds an op result. The backward callback is dropped when no parent
// participates in differentiation, which prunes frozen subgraphs for free.
template <class S>
TensorT<S> make_op(const char* op, Shape shape, std::vector<S> value,
                   std::vector<TensorT<S>> parents,
                   std::function<void(const S*, GradientTapeT<S>&)> backward) {
  auto n = std::make_shared<NodeT<S>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool enabled = false;
  n->parents.reserve(parents.size());
  for (auto& p : parents) {
    enabled = enabled || p.grad_enabled();
    n->parents.push_back(p.node());
  }
  n->grad_enabled = enabled;
  if (enabled) n->backward = std::move(backward);
  return TensorT<S>(std::move(n));
}

using Tensor = TensorT<float>;
using GradientTape = GradientTapeT<float>;

}  // namespace star
