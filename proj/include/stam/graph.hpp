#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stam/errors.hpp"
#include "stam/tensor.hpp"

namespace stam {

// Handle to a node of a Graph.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

// Reverse-mode tape. Nodes are appended in evaluation order, so the node list
// is topologically sorted and backward() walks it in exact reverse.
//
// Parameter leaves alias the gradient buffer of the bound Tensor: backward()
// accumulates into it additively and never clears it.
template <typename T>
class Graph {
 public:
  // Called with the node's value and its accumulated gradient; propagates the
  // gradient to the node's inputs through Graph::grad().
  using BackwardFn =
      std::function<void(Graph&, const Tensor<T>&, std::span<const T>)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Var input(Tensor<T> value) {
    Node n;
    n.own = std::move(value);
    return push(std::move(n));
  }

  // Binds a learnable parameter. Binding the same tensor twice returns the
  // same node.
  Var param(Tensor<T>& p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return Var{it->second};
    Node n;
    n.param = &p;
    n.requires_grad = true;
    Var v = push(std::move(n));
    bound_.emplace(&p, v.id);
    return v;
  }

  Var record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
    Node n;
    n.own = std::move(value);
    for (Var in : inputs) {
      check(in);
      n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  Var record(Tensor<T> value, const std::vector<Var>& inputs, BackwardFn fn) {
    Node n;
    n.own = std::move(value);
    for (Var in : inputs) {
      check(in);
      n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  const Tensor<T>& value(Var v) const {
    check(v);
    const Node& n = nodes_[v.id];
    return n.param ? *n.param : n.own;
  }

  const Shape& shape(Var v) const { return value(v).shape(); }

  bool requires_grad(Var v) const {
    check(v);
    return nodes_[v.id].requires_grad;
  }

  // Gradient buffer of a node, allocated (zeroed) on first access.
  std::span<T> grad(Var v) {
    check(v);
    Node& n = nodes_[v.id];
    if (n.param) return n.param->grad();
    if (n.grad.empty()) n.grad.assign(n.own.numel(), T{0});
    return n.grad;
  }

  // Back-propagates from a scalar output. A graph supports exactly one
  // backward pass; build a new graph for the next forward.
  void backward(Var out) {
    check(out);
    if (backward_done_) {
      throw GraphError("backward() already ran on this graph; record a new forward pass");
    }
    if (value(out).numel() != 1) {
      throw ContractError("backward() needs a scalar output, got shape " +
                          shape_str(value(out).shape()));
    }
    backward_done_ = true;
    if (!nodes_[out.id].requires_grad) return;
    grad(out)[0] += T{1};
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.own, std::span<const T>(n.grad));
    }
  }

  bool backward_done() const noexcept { return backward_done_; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> own;
    Tensor<T>* param = nullptr;
    std::vector<T> grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Node n) {
    if (backward_done_) {
      throw GraphError("cannot record on a graph after backward()");
    }
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  void check(Var v) const {
    if (v.id >= nodes_.size()) {
      throw GraphError("variable " + std::to_string(v.id) + " is not part of this graph");
    }
  }

  // A deque keeps references returned by value() valid as nodes are added.
  std::deque<Node> nodes_;
  std::unordered_map<const Tensor<T>*, std::size_t> bound_;
  bool backward_done_ = false;
};

}  // namespace stam
