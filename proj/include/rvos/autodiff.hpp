#pragma once

// Minimal tape-based reverse-mode differentiation over dense tensors.
// A Tape owns every node created during one forward pass; Var is a cheap
// handle into it. Nodes whose inputs carry no gradient store no closure.

#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "rvos/tensor.hpp"

namespace rvos::ad {

template <typename S>
class Tape;

template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor<S>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape; }
  std::size_t size() const { return tape->value(id).size(); }
  S item() const { return tape->value(id).data.at(0); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

template <typename S>
class Tape {
 public:
  /// Receives the gradient of the node's output; accumulates into parents via grad().
  using Backward = std::function<void(Tape&, const std::vector<S>&)>;

  Var<S> constant(Tensor<S> value) { return push(std::move(value), false, {}); }
  Var<S> leaf(Tensor<S> value) { return push(std::move(value), true, {}); }

  Var<S> record(Tensor<S> value, std::initializer_list<Var<S>> parents, Backward fn) {
    bool any = false;
    for (const auto& p : parents) any = any || requires_grad(p.id);
    return push(std::move(value), any, any ? std::move(fn) : Backward{});
  }

  Var<S> record(Tensor<S> value, const std::vector<Var<S>>& parents, Backward fn) {
    bool any = false;
    for (const auto& p : parents) any = any || requires_grad(p.id);
    return push(std::move(value), any, any ? std::move(fn) : Backward{});
  }

  const Tensor<S>& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node, zero-initialized on first access.
  std::vector<S>& grad(int id) {
    auto& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), S(0));
    return n.grad;
  }
  bool has_grad(int id) const { return !nodes_[id].grad.empty(); }

  void backward(Var<S> root, S seed = S(1)) {
    auto& g = grad(root.id);
    for (auto& v : g) v += seed;
    for (int i = root.id; i >= 0; --i) {
      auto& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<S> value;
    std::vector<S> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var<S> push(Tensor<S> value, bool requires_grad, Backward fn) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(fn)});
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::deque<Node> nodes_;
};

}  // namespace rvos::ad
