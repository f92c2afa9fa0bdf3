#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "covidx/tensor.hpp"

namespace covidx {

/// Trainable tensor with a gradient accumulator of the same shape.
template <class T>
struct Parameter {
  std::string id;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string name, Tensor<T> init)
      : id(std::move(name)), value(std::move(init)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T(0)); }
};

// Thread-local switch; while disabled no backward closures are recorded.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  std::string op;
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs that need it.
  std::function<void(Node&)> backward_fn;
  Parameter<T>* param = nullptr;
  bool requires_grad = false;

  void accumulate(const Tensor<T>& delta) {
    if (grad.empty()) {
      grad = delta;
    } else {
      grad += delta;
    }
  }

  // Zero-initialised gradient buffer for in-place accumulation by an op.
  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle to a node of the computation graph.
template <class T>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  const std::string& op() const { return node_->op; }
  bool requires_grad() const { return node_->requires_grad; }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

template <class T>
Var<T> constant(Tensor<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->op = "constant";
  node->value = std::move(value);
  return Var<T>(std::move(node));
}

// Leaf bound to a parameter. The parameter must outlive the graph.
template <class T>
Var<T> param(Parameter<T>& p) {
  auto node = std::make_shared<Node<T>>();
  node->op = "parameter";
  node->value = p.value;
  node->param = &p;
  node->requires_grad = GradMode::enabled();
  return Var<T>(std::move(node));
}

namespace detail {

inline void check_finite_or_throw(bool finite, const std::string& op) {
  if (!finite) fail(ErrorKind::numeric, op + ": non-finite value produced");
}

// Builds a result node. The backward closure is attached only when some
// input needs a gradient and grad mode is on.
template <class T>
Var<T> make_result(std::string op, Tensor<T> value,
                   std::vector<std::shared_ptr<Node<T>>> inputs,
                   std::function<void(Node<T>&)> backward_fn) {
  check_finite_or_throw(value.all_finite(), op);
  auto node = std::make_shared<Node<T>>();
  node->op = std::move(op);
  node->value = std::move(value);
  bool needs = false;
  if (GradMode::enabled()) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  node->requires_grad = needs;
  if (needs) {
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(node));
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients are added into the
/// accumulators of every reachable parameter.
template <class T>
void backward(const Var<T>& loss) {
  if (!loss.defined()) {
    fail(ErrorKind::numeric, "backward: loss has not been computed (no forward pass)");
  }
  if (loss.value().size() != 1) {
    fail(ErrorKind::numeric, "backward: loss must be scalar, got shape " +
                                 shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) n->grad = Tensor<T>();
  loss.node()->grad = Tensor<T>(loss.shape(), T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->grad.empty()) continue;
    if (n->backward_fn) n->backward_fn(*n);
    if (n->param) n->param->grad += n->grad;
  }
}

}  // namespace covidx
