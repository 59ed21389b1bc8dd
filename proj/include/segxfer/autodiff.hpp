#pragma once

// Reverse-mode differentiation over an explicit computation record.
//
// A Graph owns every value produced during a forward pass. Each recorded node
// keeps its inputs, a forward function that recomputes its value from those
// inputs (used by replay()) and a backward function that pushes the node's
// output gradient into its inputs. Nodes are appended in evaluation order, so
// a reverse sweep over the node list is a valid topological order.

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "segxfer/tensor.hpp"

namespace segxfer {

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
class Var {
 public:
  Var() = default;

  Graph<T>* graph() const noexcept { return graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

  const Tensor<T>& value() const { return graph_->value(*this); }
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Graph<T>;
  Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Graph {
 public:
  using ForwardFn = std::function<Tensor<T>(const Graph&)>;
  // Receives the node's output gradient and its output value.
  using BackwardFn = std::function<void(Graph&, const Tensor<T>&, const Tensor<T>&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that never receives a gradient.
  Var<T> constant(Tensor<T> value) {
    return push(Node{"constant", std::move(value), {}, {}, {}, {}, false, false});
  }

  /// Trainable leaf. Every parameter holds a gradient after backward().
  Var<T> parameter(Tensor<T> value, std::string name = {}) {
    return push(Node{"parameter", std::move(value), {}, {}, {}, std::move(name), true, true});
  }

  /// Appends an operation node. The backward function is dropped when no
  /// input requires a gradient.
  Var<T> record(std::string op, std::vector<Var<T>> inputs, Tensor<T> value, ForwardFn forward,
                BackwardFn backward) {
    bool needs_grad = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const auto& in : inputs) {
      check_owned(in);
      ids.push_back(in.id());
      needs_grad = needs_grad || nodes_[in.id()].requires_grad;
    }
    if (!needs_grad) backward = nullptr;
    return push(Node{std::move(op), std::move(value), std::move(ids), std::move(forward),
                     std::move(backward), {}, needs_grad, false});
  }

  bool requires_grad(Var<T> v) const { return node(v).requires_grad; }
  const Tensor<T>& value(Var<T> v) const { return node(v).value; }
  const std::string& op_name(Var<T> v) const { return node(v).op; }
  const std::string& name(Var<T> v) const { return node(v).name; }
  std::size_t size() const noexcept { return nodes_.size(); }

  bool has_grad(Var<T> v) const { return !node(v).grad.empty(); }

  const Tensor<T>& grad(Var<T> v) const {
    const auto& n = node(v);
    if (n.grad.empty()) throw UsageError("node '" + n.op + "' has no gradient");
    return n.grad;
  }

  /// Gradient accumulator of `v`, allocated as zeros on first use.
  Tensor<T>& grad_buffer(Var<T> v) {
    auto& n = node(v);
    if (n.grad.empty()) n.grad = Tensor<T>::zeros_like(n.value);
    return n.grad;
  }

  void accumulate(Var<T> v, const Tensor<T>& g) {
    if (!requires_grad(v)) return;
    grad_buffer(v) += g;
  }

  std::vector<Var<T>> parameters() {
    std::vector<Var<T>> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].parameter) out.push_back(Var<T>(this, i));
    }
    return out;
  }

  /// Back-propagates from a scalar loss node. Call once per graph.
  void backward(Var<T> loss) {
    if (loss.graph() != this || loss.id() >= nodes_.size()) {
      throw UsageError("loss node does not belong to this computation record");
    }
    auto& root = nodes_[loss.id()];
    if (root.value.size() != 1) throw UsageError("loss must be a scalar node");
    if (root.requires_grad) {
      grad_buffer(loss).fill(T{1});
      for (std::size_t i = loss.id() + 1; i-- > 0;) {
        auto& n = nodes_[i];
        if (n.backward && !n.grad.empty()) n.backward(*this, n.grad, n.value);
      }
    }
    for (auto& n : nodes_) {
      if (n.parameter && n.grad.empty()) n.grad = Tensor<T>::zeros_like(n.value);
    }
  }

  /// Re-evaluates every operation node from its inputs in record order and
  /// reports whether all recomputed values equal the recorded ones exactly.
  bool replay() {
    bool identical = true;
    for (auto& n : nodes_) {
      if (!n.forward) continue;
      Tensor<T> again = n.forward(*this);
      identical = identical && (again == n.value);
      n.value = std::move(again);
    }
    return identical;
  }

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    ForwardFn forward;
    BackwardFn backward;
    std::string name;
    bool requires_grad = false;
    bool parameter = false;
    Tensor<T> grad{};
  };

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  void check_owned(Var<T> v) const {
    if (v.graph() != this || v.id() >= nodes_.size()) {
      throw UsageError("variable belongs to a different computation record");
    }
  }

  Node& node(Var<T> v) {
    check_owned(v);
    return nodes_[v.id()];
  }
  const Node& node(Var<T> v) const {
    check_owned(v);
    return nodes_[v.id()];
  }

  std::deque<Node> nodes_;  // deque: node references stay valid as the record grows
};

}  // namespace segxfer
