#pragma once

// Minimal reverse-mode differentiation over coarse tensor ops. Every op
// records its inputs and a closure that pushes the output gradient back into
// them; backward() walks the recorded graph once in reverse topological order
// and then releases it.

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "treemtl/tensor.hpp"

namespace treemtl {

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

/// While alive, ops on this thread record no graph (inference mode).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until something flows into it
    bool requires_grad = false;
    bool from_op = false;   // produced by a recorded op (as opposed to a leaf)
    bool released = false;  // graph already consumed by backward()
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    Tensor<T>& grad_buffer() {
        if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
        return grad;
    }
};

/// Handle to a graph node. Copies share the node.
template <class T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
    bool is_leaf() const noexcept { return !node_->from_op; }

    /// Accumulated gradient; zeros if nothing has flowed in yet.
    const Tensor<T>& grad() const { return node_->grad_buffer(); }
    Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
    bool has_grad() const noexcept { return node_->grad.size() == node_->value.size(); }
    void zero_grad() { node_->grad_buffer().fill(T{0}); }

    /// Same value, cut from the graph.
    Var detach() const { return Var(node_->value, false); }

    Node<T>* node() const noexcept { return node_.get(); }
    const std::shared_ptr<Node<T>>& shared() const noexcept { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Records an op result. The closure receives the result node, whose grad is
/// populated, and must accumulate into inputs that require grad.
template <class T>
Var<T> record(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward_fn) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->from_op = true;
    if (detail::grad_mode())
        for (const auto& in : inputs) node->requires_grad = node->requires_grad || in.requires_grad();
    if (node->requires_grad) {
        node->inputs.reserve(inputs.size());
        for (auto& in : inputs) node->inputs.push_back(in.shared());
        node->backward_fn = std::move(backward_fn);
    }
    return Var<T>(std::move(node));
}

/// Reverse pass from `root`, seeded with `seed` (default: ones). Leaf
/// gradients accumulate across calls; the graph is released afterwards.
template <class T>
void backward(const Var<T>& root, const Tensor<T>* seed = nullptr) {
    if (!root.defined()) throw StateError("backward on an undefined variable");
    Node<T>* top = root.node();
    if (!top->from_op) throw StateError("backward called before any forward op was recorded");
    if (top->released) throw StateError("backward called twice on the same graph");
    if (!top->requires_grad) {
        top->released = true;
        return;  // nothing upstream requires a gradient
    }

    // Shared ownership keeps every node alive while inputs are being released.
    std::vector<std::shared_ptr<Node<T>>> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack{{root.shared(), 0}};
    seen.insert(top);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            std::shared_ptr<Node<T>> child = node->inputs[next++];
            if (child->requires_grad && seen.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    Tensor<T>& g = top->grad_buffer();
    if (seed) {
        if (seed->shape() != top->value.shape()) throw DimensionError("backward seed shape mismatch");
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*seed)[i];
    } else {
        for (auto& v : g.data()) v += T{1};
    }

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = it->get();
        if (!node->from_op) continue;
        if (node->released) throw StateError("backward through an already released graph");
        if (node->backward_fn && node->grad.size() == node->value.size()) node->backward_fn(*node);
        node->backward_fn = nullptr;
        node->inputs.clear();
        node->grad = Tensor<T>();
        node->released = true;
    }
}

}  // namespace treemtl
